import numpy as np
import pytest

from eqd import autodiff as ad
from eqd.autodiff import Tensor
from eqd.errors import ConfigError, NoValidCandidate
from eqd.expr import constant_values, parse_prefix, tokenize
from eqd.finetune import FitnessConfig, build_quadruples, make_quadruple, sample_subsets
from eqd.nn import EquationModel, ModelConfig
from eqd.search import (
    SearchConfig,
    ascend,
    discover,
    make_candidate,
    refit_constants,
    save_candidate_log,
    select_initial,
)

TINY = dict(d_model=8, n_heads=2, n_encoder_layers=1, n_decoder_layers=2, d_ff=16,
            evaluator_hidden=8, value_dim=4, n_memory=2, L=30)


def _model(seed=0):
    return EquationModel.initialize(ModelConfig(**TINY), np.random.default_rng(seed))


def _table(n=80, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-4, 4, size=(n, 2))
    return X, X[:, 0] * X[:, 1] + X[:, 0]


def _quads(model, X, y, n=12):
    subs = sample_subsets(X, y, n, 20, np.random.default_rng(1))
    return build_quadruples(subs, model, FitnessConfig(), np.random.default_rng(2))


# ------------------------------------------------------------------ refitting


def test_refit_single_scale_matches_least_squares():
    rng = np.random.default_rng(0)
    X = rng.uniform(-4, 4, size=(50, 1))
    y = 3.7 * X[:, 0] + rng.normal(0, 0.1, 50)
    tree, _ = refit_constants(parse_prefix("mul C x_0"), X, y)
    oracle = float(np.sum(X[:, 0] * y) / np.sum(X[:, 0] ** 2))
    assert constant_values(tree)[0] == pytest.approx(oracle, abs=1e-6)


def test_refit_keeps_original_when_nothing_improves():
    X = np.linspace(-1, 1, 20)[:, None]
    y = 2.0 * X[:, 0]
    tree, mse = refit_constants(parse_prefix("mul 2.0 x_0"), X, y)
    assert constant_values(tree) == [2.0] and mse == 0.0


def test_candidate_reasons():
    X, y = _table()
    assert make_candidate(tokenize("x_0"), X[:0], y[:0], 0, 0).reason == "EmptyData"
    assert "out of range" in make_candidate(tokenize("x_5"), X, y, 0, 0).reason
    Xz = X.copy()
    Xz[0, 1] = 0.0
    assert not make_candidate(tokenize("div x_0 x_1"), Xz, y, 0, 0).valid
    good = make_candidate(tokenize("add mul x_0 x_1 x_0"), X, y, 0, 0)
    assert good.valid and good.r2_train == 1.0 and good.complexity == 5


# ------------------------------------------------------------------ ascent


def _linear(w):
    wt = Tensor(np.asarray(w, dtype=np.float64))
    return lambda x: ad.sum_(ad.mul_elem(x, wt))


def test_ascent_on_linear_score_is_closed_form():
    w = np.array([1.0, 2.0])
    traj = ascend(np.zeros(2), _linear(w), 0.1, 3)
    for t, E in enumerate(traj):
        np.testing.assert_allclose(E, t * 0.1 * w, atol=1e-15)


def test_zero_step_size_keeps_point():
    E0 = np.array([0.3, -1.2])
    traj = ascend(E0, _linear([1.0, 2.0]), 0.0, 5)
    assert len(traj) == 6 and all(np.array_equal(E, E0) for E in traj)


def test_backoff_halves_on_decrease():
    # score -(x - 1)^2 from x=0 has gradient 2
    def f(x):
        d = ad.sub(x, Tensor(np.array([1.0])))
        return ad.scale(ad.sum_(ad.square(d)), -1.0)

    traj = ascend(np.array([0.0]), f, 2.0, 1, backoff_retries=3)
    # 0 + 2*2 = 4 (worse), then 0 + 1*2 = 2 (equal, accepted)
    assert traj[-1][0] == pytest.approx(2.0)


def test_ascent_with_model_evaluator_does_not_decrease():
    m = _model()
    rng = np.random.default_rng(0)
    for _ in range(10):
        traj = ascend(rng.normal(size=8), m.evaluator, 1e-4, 5)
        with ad.no_grad():
            scores = [m.evaluator(Tensor(E)).item() for E in traj]
        assert all(b >= a - 1e-9 for a, b in zip(scores, scores[1:]))


# ------------------------------------------------------------------ initial points


def test_select_initial_ordering_and_ties():
    X, y = _table()
    qs = [make_quadruple(X, y, tokenize(t), FitnessConfig())
          for t in ["add mul x_0 x_1 x_0", "x_0", "add x_0 mul x_1 x_0", "x_1"]]
    picks = select_initial(qs, 3)
    assert picks[0] == 0 and picks[1] == 2  # equal fitness: shorter first, then index
    assert len(select_initial(qs, 10)) == 4
    with pytest.raises(ValueError):
        select_initial([], 1)


# ------------------------------------------------------------------ discovery


def test_discover_respects_budget():
    m = _model()
    X, y = _table()
    y = np.sin(X[:, 0]) * np.exp(0.2 * X[:, 1])  # not in the small search space
    quads = _quads(m, X, y)
    cfg = SearchConfig(k_init=4, max_steps=6, max_candidates=15)
    res = discover(m, X, y, quads, cfg, np.random.default_rng(0))
    assert len(res.log) <= 15
    assert len({c.init for c in res.log}) <= 4
    assert max(c.step for c in res.log) <= 6
    assert res.best.valid


def test_discover_stops_on_first_good_candidate():
    m = _model()
    X, y = _table()
    quads = _quads(m, X, y)
    quads[3] = make_quadruple(quads[3].X, quads[3].y, tokenize("add mul x_0 x_1 x_0"), FitnessConfig())
    res = discover(m, X, y, quads, SearchConfig(), np.random.default_rng(0))
    assert res.stopped_early
    assert res.log[-1].r2_train > 0.99
    assert all(not c.valid or c.r2_train <= 0.99 for c in res.log[:-1])


def test_discover_is_deterministic(tmp_path):
    m = _model()
    X, y = _table()
    quads = _quads(m, X, y)
    cfg = SearchConfig(k_init=3, max_steps=4, stop_r2=1.0)
    a = discover(m, X, y, quads, cfg, np.random.default_rng(5))
    b = discover(m, X, y, quads, cfg, np.random.default_rng(5))
    save_candidate_log(tmp_path / "a.jsonl", a)
    save_candidate_log(tmp_path / "b.jsonl", b)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert any(c.step >= 0 for c in a.log)


def test_discover_without_valid_candidates():
    m = _model()
    X, y = _table()
    quads = _quads(m, X, y)
    # only one row: R^2 is undefined for every candidate
    with pytest.raises(NoValidCandidate) as err:
        discover(m, X[:1], y[:1], quads, SearchConfig(k_init=2, max_steps=1), np.random.default_rng(0))
    assert err.value.diagnostics["candidates"] > 0


def test_search_config_validation():
    with pytest.raises(ConfigError):
        SearchConfig(decode_mode="beam")
    with pytest.raises(ConfigError):
        SearchConfig(max_candidates=0)
