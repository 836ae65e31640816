"""Acceptance suite: one test per criterion, each recording a pass/fail line
that is printed in the pytest terminal summary.

The suite-level checks (6-8, 10) share benchmark runs through a session cache,
so the whole module takes roughly 40 minutes on one CPU core.
"""
import hashlib
import json
import math
import time

import numpy as np
import pytest

import gradcheck
from conftest import ACCEPTANCE_LINES
from eqd import autodiff as ad
from eqd import bench, checkpoint
from eqd import surrogate as S
from eqd.autodiff import Tensor
from eqd.cli import BUNDLED_SURROGATE, main
from eqd.config import RunConfig
from eqd.errors import MalformedPrefix
from eqd.expr import is_valid_prefix, parse_prefix, random_expr, serialize_prefix, to_text, tokenize
from eqd.finetune import FinetuneConfig, FitnessConfig, build_quadruples, fitness, run_finetune, sample_subsets
from eqd.nn import EquationModel, ModelConfig
from eqd.search import ascend, initial_embeddings
from eqd.seeding import rng_stream
from test_autodiff import OPS, _param, _project
from test_nn import TINY, fused_graph_loss

SEEDS = (0, 1, 2)


def record(k: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[k] = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


@pytest.fixture(scope="session")
def surrogate_weights():
    return bench.pretrained_arrays(S.load_checkpoint(BUNDLED_SURROGATE))


class SuiteCache:
    """Benchmark runs keyed by (seed, lambda, noise); ablations of one key are
    run together so full and no_search share their fine-tuned model."""

    def __init__(self, weights, root):
        self.weights = weights
        self.root = root
        self.runs: dict[tuple, dict] = {}
        self.seconds: dict[tuple, float] = {}

    def get(self, seed=0, lam=0.0, noise=0.0, ablations=("full",)):
        key = (seed, lam, noise)
        have = self.runs.setdefault(key, {})
        missing = [a for a in ablations if a not in have]
        if missing:
            cfg = RunConfig.from_dict({"master_seed": seed, "fitness": {"lam": lam}, "bench": {"noise": noise}})
            out = self.root / f"s{seed}_l{lam}_n{noise}_{'_'.join(missing)}"
            t0 = time.perf_counter()
            have.update(bench.run_suite(bench.toy_suite(), cfg, missing, self.weights, out))
            self.seconds[key + tuple(missing)] = time.perf_counter() - t0
        return {a: have[a] for a in ablations}


@pytest.fixture(scope="session")
def suites(surrogate_weights, tmp_path_factory):
    return SuiteCache(surrogate_weights, tmp_path_factory.mktemp("suites"))


# ------------------------------------------------------------------ 1


def test_criterion_01_gradient_oracles():
    t0 = time.perf_counter()
    worst = {}
    for k, name in enumerate(sorted(OPS)):
        rng = np.random.default_rng(k)
        a, b = _param(rng, 3, 4), _param(rng, 3, 4)
        if name == "relu":
            a.data = np.where(np.abs(a.data) < 0.05, 0.3, a.data)
        worst[name] = gradcheck.check(lambda: _project(OPS[name](a, b)), [a, b])
    rng = np.random.default_rng(100)
    logits = _param(rng, 2, 5, 7)
    targets = rng.integers(0, 7, size=(2, 5))
    worst["cross_entropy"] = gradcheck.check(lambda: ad.cross_entropy_from_logits(logits, targets), [logits])
    x, gamma, beta, table = _param(rng, 3, 5), _param(rng, 5), _param(rng, 5), _param(rng, 6, 5)
    worst["mse"] = gradcheck.check(lambda: ad.mse(x, np.ones((3, 5))), [x])
    worst["layer_norm"] = gradcheck.check(lambda: _project(ad.layer_norm(x, gamma, beta)), [x, gamma, beta])
    worst["embedding"] = gradcheck.check(lambda: _project(ad.embedding(table, np.array([[0, 3], [3, 5]]))), [table])
    model = EquationModel.initialize(ModelConfig(**TINY), np.random.default_rng(0))
    X = rng.uniform(-2, 2, size=(2, 6, 2))
    y = rng.uniform(-2, 2, size=(2, 6))
    eqs = [tokenize("add x_0 x_1"), tokenize("sin mul C x_0")]
    r = np.array([0.3, -0.2])
    worst["fused_graph"] = gradcheck.check(lambda: fused_graph_loss(model, X, y, eqs, r),
                                           list(model.parameters().values()), max_coords=6, rng=rng)
    secs = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and secs < 60
    record(1, ok, f"{len(worst)} gradient checks, worst rel err {worst[top]:.2e} ({top}), {secs:.1f}s")
    assert ok


# ------------------------------------------------------------------ 2


def _mutate(tokens, rng):
    toks = list(tokens)
    pool = tokenize("add mul sin pow2 x_0 x_1 1.0 C")
    kind = rng.integers(3)
    i = int(rng.integers(len(toks) + (1 if kind == 0 else 0)))
    if kind == 0:
        toks.insert(i, pool[int(rng.integers(len(pool)))])
    elif kind == 1 and len(toks) > 1:
        del toks[i]
    else:
        toks[min(i, len(toks) - 1)] = pool[int(rng.integers(len(pool)))]
    return toks


def _parses(tokens) -> bool:
    try:
        parse_prefix(tokens)
        return True
    except MalformedPrefix:
        return False


def test_criterion_02_expression_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    roundtrip = agree = checked = 0
    for _ in range(10_000):
        tree = random_expr(rng, int(rng.integers(1, 7)), int(rng.integers(1, 4)))
        toks = serialize_prefix(tree)
        roundtrip += parse_prefix(tokenize(to_text(toks))) == tree
        for seq in (toks, _mutate(toks, rng)):
            checked += 1
            agree += is_valid_prefix(seq) == _parses(seq)
    secs = time.perf_counter() - t0
    ok = roundtrip == 10_000 and agree == checked and secs < 30
    record(2, ok, f"round-trip {roundtrip}/10000, scan/parser agreement {agree}/{checked}, {secs:.1f}s")
    assert ok


# ------------------------------------------------------------------ 3


def test_criterion_03_fitness_units():
    y = np.array([1.0, 2.0, 4.0, 3.0])
    checks = {
        "perfect": fitness(y, y, 4, FitnessConfig(lam=0.0)) == 1.0,
        "bonus": abs(fitness(y, y, 200, FitnessConfig(lam=0.5, L=200)) - (1 + 0.5 * math.exp(-1))) < 1e-12,
        "degenerate": fitness(np.ones(4), np.ones(4), 1, FitnessConfig()) == -1.0,
        "proportion": round(bench.solved_proportion([1.0] * 80 + [0.0] * 39), 3) == 0.672,
    }
    ok = all(checks.values())
    record(3, ok, ", ".join(f"{k}={'ok' if v else 'BAD'}" for k, v in checks.items()))
    assert ok


# ------------------------------------------------------------------ 4 and 5


@pytest.fixture(scope="module")
def finetuned(surrogate_weights):
    """The default fine-tune run on toy task t01, with frozen-tensor digests
    taken before and after."""
    cfg = RunConfig()
    task = bench.toy_suite()[0]
    X, y = task.load()
    (Xtr, ytr), _ = bench.split(X, y, 0.75, rng_stream(0, "split"))
    model = bench.fresh_model(cfg, surrogate_weights, rng_stream(0, "init"))
    subs = sample_subsets(Xtr, ytr, 100, 200, rng_stream(0, "subsets"))
    quads = build_quadruples(subs, model, cfg.fitness, rng_stream(0, "prepare"))
    last = f"decoder.layers.{cfg.model.n_decoder_layers - 1}."
    names = [n for n in model.parameters()
             if n.startswith("data_encoder.") or (n.startswith("decoder.") and not n.startswith(last))]
    digest = lambda: checkpoint.tensor_digest({n: model.parameters()[n].data for n in names})
    before = digest()
    res = run_finetune(model, quads, FinetuneConfig(), rng_stream(0, "finetune"))
    return model, quads, names, before, digest(), res


def test_criterion_04_ascent_is_monotone(finetuned):
    model, quads, *_ = finetuned
    rng = np.random.default_rng(4)
    E0 = initial_embeddings(model, quads, "gold")
    starts = np.concatenate([E0, E0 + rng.normal(0, 0.1, E0.shape)])[:200]
    good = 0
    for E in starts:
        traj = ascend(E, model.evaluator, 1e-4, 20)
        with ad.no_grad():
            scores = [model.evaluator(Tensor(p)).item() for p in traj]
        good += all(b >= a - 1e-9 for a, b in zip(scores, scores[1:]))
    frac = good / len(starts)
    ok = len(starts) == 200 and frac >= 0.95
    record(4, ok, f"{good}/{len(starts)} trajectories non-decreasing ({frac:.1%}, need >= 95%)")
    assert ok


def test_criterion_05_freeze_contract(finetuned):
    model, _, names, before, after, res = finetuned
    ok = before == after and set(res.frozen) == set(names) and len(res.metrics) == 10
    record(5, ok, f"{len(names)} frozen tensors, digest {'unchanged' if before == after else 'CHANGED'}")
    assert ok


# ------------------------------------------------------------------ 6 and 10


def test_criterion_06_toy_recovery(suites):
    t0 = time.perf_counter()
    reps = suites.get(0, 0.0, 0.0, ("full", "no_search", "random_init"))
    secs = time.perf_counter() - t0
    p = {a: r.aggregates["solved_proportion"] for a, r in reps.items()}
    ok = p["full"] >= 0.6 and p["full"] > p["no_search"] and p["full"] > p["random_init"] and secs < 1800
    record(6, ok, f"solved full {p['full']:.2f}, no_search {p['no_search']:.2f}, "
                  f"random_init {p['random_init']:.2f}; {secs / 60:.1f} min")
    assert ok


def test_criterion_10_budget_compliance(suites):
    reps = suites.get(0, 0.0, 0.0, ("full", "no_search", "random_init"))
    expected = sum(not r.error for rep in reps.values() for r in rep.rows)
    logs = sorted(suites.root.glob("s0_l0.0_n0.0_*/candidates/*.jsonl"))
    problems = []
    for path in logs:
        recs = [json.loads(line) for line in path.read_text().splitlines()]
        hits = [i for i, r in enumerate(recs) if r["valid"] and r["r2_train"] > 0.99]
        if len(recs) > 100:
            problems.append(f"{path.name}: {len(recs)} candidates")
        if len({r["init"] for r in recs}) > 10:
            problems.append(f"{path.name}: too many initial points")
        if max(r["step"] for r in recs) > 20:
            problems.append(f"{path.name}: step beyond 20")
        if hits and hits[0] != len(recs) - 1:
            problems.append(f"{path.name}: no early stop")
    ok = len(logs) == expected > 0 and not problems
    record(10, ok, f"{len(logs)} candidate logs checked ({expected} discover runs), {len(problems)} violations")
    assert ok, problems


# ------------------------------------------------------------------ 7


def test_criterion_07_lambda_tradeoff(suites):
    lams = (0.0, 0.5, 1.0)
    per = {lam: [suites.get(s, lam, 0.0)["full"].aggregates["mean_complexity"] for s in SEEDS] for lam in lams}
    means = {lam: float(np.mean(v)) for lam, v in per.items()}
    ses = {lam: float(np.std(v, ddof=1) / np.sqrt(len(v))) for lam, v in per.items()}
    ok = all(means[b] <= means[a] + math.hypot(ses[a], ses[b]) for a, b in zip(lams, lams[1:]))
    record(7, ok, "mean complexity " + ", ".join(f"lam={lam}: {means[lam]:.2f}+-{ses[lam]:.2f}" for lam in lams))
    assert ok


# ------------------------------------------------------------------ 8


def test_criterion_08_noise_robustness(suites):
    levels = (0.0, 0.05, 0.1)
    prop = {}
    for sigma in levels:
        for a in ("full", "no_search"):
            prop[a, sigma] = float(np.mean([suites.get(s, 0.0, sigma, ("full", "no_search"))[a]
                                            .aggregates["solved_proportion"] for s in SEEDS]))
    drop = {(a, s): prop[a, 0.0] - prop[a, s] for a in ("full", "no_search") for s in levels[1:]}
    ok = all(drop["full", s] <= drop["no_search", s] + 1e-12 for s in levels[1:])
    record(8, ok, "; ".join(f"sigma={s}: full {prop['full', s]:.3f} (drop {drop['full', s]:+.3f}), "
                            f"no_search {prop['no_search', s]:.3f} (drop {drop['no_search', s]:+.3f})"
                            for s in levels[1:]))
    assert ok


# ------------------------------------------------------------------ 9


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_09_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "model": TINY,
        "pretrain": {"corpus_size": 24, "epochs": 2, "batch_size": 8, "rows_per_example": 16},
        "finetune": {"epochs": 2, "num_subsets": 20},
        "search": {"k_init": 4, "max_steps": 4},
    }))
    full_cfg = tmp_path / "full.json"
    full_cfg.write_text(json.dumps({"finetune": {"epochs": 2, "num_subsets": 20}}))
    data = str(bench.TOY_DIR / "t07.jsonl")
    bundled = str(BUNDLED_SURROGATE)
    files = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        codes = [
            main(["pretrain", "--config", str(cfg), "--out", str(d / "sur.eqck")]),
            main(["prepare", "--config", str(full_cfg), "--data", data, "--model", bundled, "--out", str(d / "q.jsonl")]),
            main(["finetune", "--config", str(full_cfg), "--quadruples", str(d / "q.jsonl"), "--model", bundled,
                  "--out", str(d / "ft.eqck")]),
            main(["discover", "--config", str(full_cfg), "--data", data, "--model", str(d / "ft.eqck"),
                  "--quadruples", str(d / "q.jsonl"), "--out", str(d / "cand.jsonl")]),
            main(["bench", "--config", str(cfg), "--model", str(d / "sur.eqck"), "--ablation", "full,no_search",
                  "--out", str(d / "bench")]),
        ]
        assert codes == [0] * 5
        files.append({p.relative_to(d).as_posix(): _sha(p) for p in sorted(d.rglob("*"))
                      if p.is_file() and not p.name.startswith("timing_")})
    same = files[0] == files[1]
    record(9, same, f"{len(files[0])} artifacts (checkpoints, quadruples, candidate logs, reports) "
                    f"{'bit-identical' if same else 'DIFFER'} across two runs")
    assert same
