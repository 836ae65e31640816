import numpy as np
import pytest

from eqd import surrogate as S
from eqd.errors import CorruptSegment
from eqd.expr import evaluate_batch, is_valid_prefix, parse_prefix, to_text, variables
from eqd.nn import EquationModel, ModelConfig, default_freeze_policy, freeze

TINY = dict(d_model=8, n_heads=2, n_encoder_layers=1, n_decoder_layers=2, d_ff=16,
            evaluator_hidden=8, value_dim=4, n_memory=2, L=30)


def test_corpus_contract():
    corpus = S.build_corpus(np.random.default_rng(0), 60, rows_per_example=20)
    assert len(corpus) == 60
    for ex in corpus:
        assert is_valid_prefix(ex.target)
        assert np.isfinite(ex.y).all()
        assert ex.X.min() >= -4 and ex.X.max() <= 4
        tree = parse_prefix(ex.target)
        assert variables(tree) == set(range(ex.X.shape[1]))
        y, flagged = evaluate_batch(tree, ex.X)
        assert not flagged.any()
        np.testing.assert_array_equal(y, ex.y)


def test_corpus_is_deterministic(tmp_path):
    a = S.build_corpus(np.random.default_rng(5), 20, rows_per_example=10)
    b = S.build_corpus(np.random.default_rng(5), 20, rows_per_example=10)
    assert S.corpus_digest(a) == S.corpus_digest(b)
    S.save_corpus(tmp_path / "c.jsonl", a)
    assert S.corpus_digest(S.load_corpus(tmp_path / "c.jsonl")) == S.corpus_digest(a)


def test_pretrain_reduces_loss_and_is_deterministic():
    corpus = S.build_corpus(np.random.default_rng(1), 40, rows_per_example=16)

    def run():
        m = EquationModel.initialize(ModelConfig(**TINY), np.random.default_rng(2))
        m, curve = S.pretrain(m, corpus, 3, 3e-3, 8, np.random.default_rng(3))
        return m, curve

    m1, c1 = run()
    m2, c2 = run()
    assert c1[-1] < c1[0]
    assert c1 == c2
    assert S.model_digest(m1) == S.model_digest(m2)
    assert m1.metadata["corpus_sha256"] == S.corpus_digest(corpus)


def test_suggestions_are_always_usable():
    m = EquationModel.initialize(ModelConfig(**TINY), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    X = rng.uniform(-4, 4, size=(30, 2))
    y = X[:, 0] + X[:, 1]
    for mode in ("greedy", "sample"):
        toks = S.suggest_equation(m, X, y, mode, np.random.default_rng(2), max_len=10)
        tree = parse_prefix(toks)
        assert variables(tree) <= {0, 1}
    with pytest.raises(ValueError):
        S.suggest_equation(m, X, np.full(30, np.nan), "greedy", rng)


def test_checkpoint_roundtrip(tmp_path):
    m = EquationModel.initialize(ModelConfig(**TINY), np.random.default_rng(0))
    m.metadata["note"] = "x"
    freeze(m.parameters(), default_freeze_policy(m.config))
    d1 = S.save_checkpoint(tmp_path / "s.eqck", m, seed=3, kind="surrogate")
    back = S.load_checkpoint(tmp_path / "s.eqck", np.random.default_rng(9))
    prefixes = S.SURROGATE_PREFIXES
    assert S.model_digest(back, prefixes) == S.model_digest(m, prefixes)
    assert back.metadata["note"] == "x"
    d2 = S.save_checkpoint(tmp_path / "f.eqck", m, seed=3, kind="finetuned")
    full = S.load_checkpoint(tmp_path / "f.eqck")
    assert S.model_digest(full) == S.model_digest(m)
    frozen = {n for n, p in full.parameters().items() if not p.trainable}
    assert frozen == {n for n, p in m.parameters().items() if not p.trainable}
    assert d1 != d2


def test_checkpoint_tensor_set_mismatch(tmp_path):
    from eqd import checkpoint

    m = EquationModel.initialize(ModelConfig(**TINY), np.random.default_rng(0))
    S.save_checkpoint(tmp_path / "s.eqck", m, kind="surrogate")
    header, tensors = checkpoint.load(tmp_path / "s.eqck")
    tensors.pop(next(iter(tensors)))
    header.pop("manifest")
    checkpoint.save(tmp_path / "bad.eqck", tensors, header)
    with pytest.raises(CorruptSegment):
        S.load_checkpoint(tmp_path / "bad.eqck")


def test_bundled_surrogate_loads():
    from eqd.cli import BUNDLED_SURROGATE

    m = S.load_checkpoint(BUNDLED_SURROGATE)
    assert m.metadata.get("epochs", 0) > 0
    assert to_text(S.suggest_equation(m, np.ones((5, 1)) * np.arange(5)[:, None], np.arange(5.0), "greedy",
                                      np.random.default_rng(0)))
