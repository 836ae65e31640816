"""Benchmark harness: splitting, metrics, noise, the bundled toy suite and
ablation runs that produce JSON and text reports."""
from __future__ import annotations

import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import RunConfig
from .errors import EmptyData, TooFewRows
from .expr import MAX_VARS, evaluate_batch, parse_prefix, render_infix, tokenize
from .finetune import FinetuneConfig, build_quadruples, r2_value, run_finetune, sample_subsets
from .nn import EquationModel
from .search import SearchConfig, discover
from .seeding import rng_stream
from .surrogate import SURROGATE_PREFIXES

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_search", "no_eq_encoder", "random_init", "unfreeze_all")
TOY_DIR = Path(__file__).parent / "data" / "toy_suite"


class Undefined:
    """R^2 of a constant-label vector."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "UNDEFINED"

    def __bool__(self) -> bool:
        return False


UNDEFINED = Undefined()


def split(X: np.ndarray, y: np.ndarray, ratio: float, rng: np.random.Generator):
    """Seeded shuffle into ((X_train, y_train), (X_test, y_test))."""
    n = len(y)
    if n < 4:
        raise TooFewRows(f"need at least 4 rows to split, got {n}")
    perm = rng.permutation(n)
    cut = int(round(ratio * n))
    cut = min(max(cut, 1), n - 1)
    tr, te = perm[:cut], perm[cut:]
    return (X[tr], y[tr]), (X[te], y[te])


def r2_score(y: np.ndarray, y_hat: np.ndarray, mode: str = "standard") -> float | Undefined:
    val = r2_value(y, y_hat, mode)
    return UNDEFINED if val is None else val


def solved_proportion(r2_values: Iterable[float | None | Undefined], threshold: float = 0.99) -> float:
    vals = list(r2_values)
    if not vals:
        raise ValueError("need at least one result")
    hits = sum(1 for v in vals if isinstance(v, (int, float)) and v > threshold)
    return hits / len(vals)


def inject_noise(y: np.ndarray, sigma_rel: float, rng: np.random.Generator) -> np.ndarray:
    """y + Normal(0, sigma_rel * std(y))."""
    if sigma_rel < 0:
        raise ValueError("sigma_rel must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    if sigma_rel == 0:
        return y.copy()
    return y + rng.normal(0.0, sigma_rel * float(np.std(y)), size=y.shape)


# ------------------------------------------------------------------ tasks


@dataclass
class TaskSpec:
    name: str
    expr: str | None = None
    num_vars: int = 2
    rows: int = 400
    seed: int = 0
    input_range: tuple[float, float] = (-4.0, 4.0)
    data_path: str | None = None

    def __post_init__(self):
        if not 1 <= self.num_vars <= MAX_VARS:
            raise ValueError(f"num_vars must be in [1, {MAX_VARS}]")

    def generate(self) -> tuple[np.ndarray, np.ndarray]:
        if self.expr is None:
            raise ValueError(f"task {self.name} has no generating expression")
        tree = parse_prefix(tokenize(self.expr))
        rng = np.random.default_rng(self.seed)
        lo, hi = self.input_range
        X = rng.uniform(lo, hi, size=(self.rows, self.num_vars))
        y, bad = evaluate_batch(tree, X)
        while bad.any():
            X[bad] = rng.uniform(lo, hi, size=(int(bad.sum()), self.num_vars))
            y, bad = evaluate_batch(tree, X)
        return X, y

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        if self.data_path is not None:
            return read_table(self.data_path)
        return self.generate()


def read_table(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """JSON Lines with one ``{"x": [...], "y": value}`` object per row."""
    xs, ys = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "x" not in rec or "y" not in rec:
                raise ValueError(f"{path}:{lineno}: rows need 'x' and 'y'")
            xs.append([float(v) for v in rec["x"]])
            ys.append(float(rec["y"]))
    if not xs:
        raise EmptyData(f"{path} holds no rows")
    X = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError(f"{path} contains non-finite values")
    return X, y


def write_table(path: str | Path, X: np.ndarray, y: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row, val in zip(X, y):
            fh.write(json.dumps({"x": [float(v) for v in row], "y": float(val)}) + "\n")


TOY_TASKS: list[tuple[str, str, int]] = [
    ("t01", "add mul x_0 x_1 x_0", 2),
    ("t02", "add sin x_0 mul 0.5 x_1", 2),
    ("t03", "div x_1 add 1 pow2 x_0", 2),
    ("t04", "sub pow2 x_0 x_1", 2),
    ("t05", "mul mul x_0 x_1 x_2", 3),
    ("t06", "add add x_0 x_1 x_2", 3),
    ("t07", "mul cos x_0 x_1", 2),
    ("t08", "add pow2 x_0 pow2 x_1", 2),
    ("t09", "sub mul 2.5 x_0 x_1", 2),
    ("t10", "sin mul x_0 x_1", 2),
    ("t11", "mul sub x_0 x_1 x_2", 3),
    ("t12", "mul x_0 sin x_1", 2),
    ("t13", "mul pow2 x_0 x_1", 2),
    ("t14", "pow2 add x_0 x_1", 2),
    ("t15", "add mul x_0 x_1 x_2", 3),
    ("t16", "add cos x_0 cos x_1", 2),
    ("t17", "sub x_0 mul x_1 x_2", 3),
    ("t18", "sub x_0 cos x_1", 2),
    ("t19", "mul x_1 exp mul -0.5 pow2 x_0", 2),
    ("t20", "add mul x_0 x_1 sin x_2", 3),
]


def toy_suite(data_dir: str | Path | None = TOY_DIR) -> list[TaskSpec]:
    """The bundled 20-task suite (400 rows, 2 or 3 variables).

    Each task's data file is the output of :meth:`TaskSpec.generate` with the
    listed seed; pass ``data_dir=None`` to regenerate instead of reading.
    """
    tasks = []
    for k, (name, expr, nv) in enumerate(TOY_TASKS):
        path = None if data_dir is None else str(Path(data_dir) / f"{name}.jsonl")
        tasks.append(TaskSpec(name, expr, nv, rows=400, seed=1000 + k, data_path=path))
    return tasks


def write_toy_suite(out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for task in toy_suite(None):
        X, y = task.generate()
        write_table(out / f"{task.name}.jsonl", X, y)


# ------------------------------------------------------------------ reports


@dataclass
class TaskResult:
    task: str
    r2_test: float | None
    r2_train: float | None
    complexity: int | None
    solved: bool
    eq: str = ""
    infix: str = ""
    candidates: int = 0
    error: str = ""


@dataclass
class BenchReport:
    ablation: str
    rows: list[TaskResult]
    config: dict
    threshold: float = 0.99
    wall_clock: dict = field(default_factory=dict)  # kept out of to_json so reports stay reproducible

    @property
    def aggregates(self) -> dict:
        r2s = [r.r2_test for r in self.rows if r.r2_test is not None]
        cx = [r.complexity for r in self.rows if r.complexity is not None]
        return {
            "solved_proportion": solved_proportion([r.r2_test for r in self.rows], self.threshold)
            if self.rows else 0.0,
            "mean_r2": float(np.mean(r2s)) if r2s else None,
            "mean_complexity": float(np.mean(cx)) if cx else None,
            "tasks": len(self.rows),
        }

    def to_json(self) -> dict:
        return {
            "ablation": self.ablation,
            "threshold": self.threshold,
            "rows": [asdict(r) for r in self.rows],
            "aggregates": self.aggregates,
            "config": self.config,
        }

    def to_text(self) -> str:
        head = f"{'task':<8} {'R2>0.99':>8} {'R2':>12} {'Complexity':>10}  equation"
        lines = [f"ablation: {self.ablation}", head, "-" * len(head)]
        for r in self.rows:
            r2 = "n/a" if r.r2_test is None else f"{r.r2_test:.6f}"
            cx = "n/a" if r.complexity is None else str(r.complexity)
            tail = r.infix or (f"error: {r.error}" if r.error else "")
            lines.append(f"{r.task:<8} {('yes' if r.solved else 'no'):>8} {r2:>12} {cx:>10}  {tail}")
        agg = self.aggregates
        mr2 = "n/a" if agg["mean_r2"] is None else f"{agg['mean_r2']:.6f}"
        mcx = "n/a" if agg["mean_complexity"] is None else f"{agg['mean_complexity']:.2f}"
        lines.append("-" * len(head))
        lines.append(f"{'all':<8} {agg['solved_proportion']:>8.3f} {mr2:>12} {mcx:>10}")
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"report_{self.ablation}.json").write_text(
            json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        (out / f"report_{self.ablation}.txt").write_text(self.to_text())
        (out / f"timing_{self.ablation}.json").write_text(json.dumps(self.wall_clock, indent=2) + "\n")


# ------------------------------------------------------------------ suite runner


def fresh_model(cfg: RunConfig, pretrained: dict[str, np.ndarray] | None,
                rng: np.random.Generator) -> EquationModel:
    """New model whose data encoder and decoder come from ``pretrained``
    (random when None); the other components are drawn from ``rng``."""
    model = EquationModel.initialize(cfg.model, rng)
    if pretrained is not None:
        params = model.parameters()
        for name, arr in pretrained.items():
            params[name].data = arr.copy()
    return model


def pretrained_arrays(model: EquationModel) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.parameters().items() if n.startswith(SURROGATE_PREFIXES)}


def _search_cfg(cfg: RunConfig, ablation: str) -> SearchConfig:
    sc = asdict(cfg.search)
    if ablation == "no_search":
        # step-0 decodes only: no ascent and no rescoring of the seed equations
        sc["max_steps"] = 0
        sc["include_seed_equations"] = False
    return SearchConfig(**sc)


def _finetune_cfg(cfg: RunConfig, ablation: str) -> FinetuneConfig:
    fc = asdict(cfg.finetune)
    if ablation in ("unfreeze_all", "random_init"):
        fc["unfreeze_all"] = True
    return FinetuneConfig(**fc)


def _stage_key(ablation: str) -> str:
    # full and no_search differ only at search time and share everything before it
    return "full" if ablation == "no_search" else ablation


def run_task(task: TaskSpec, cfg: RunConfig, ablations: Sequence[str],
             pretrained: dict[str, np.ndarray] | None, log_dir: Path | None = None) -> dict[str, TaskResult]:
    seed = cfg.master_seed
    try:
        X, y = task.load()
        (Xtr, ytr), (Xte, yte) = split(X, y, cfg.bench.split_ratio, rng_stream(seed, f"split:{task.name}"))
        ytr = inject_noise(ytr, cfg.bench.noise, rng_stream(seed, f"noise:{task.name}"))
    except Exception as exc:
        log.warning("task %s: could not load data: %s", task.name, exc)
        return {a: TaskResult(task.name, None, None, None, False, error=f"{type(exc).__name__}: {exc}")
                for a in ablations}
    stages: dict[str, EquationModel] = {}
    quads_by_stage = {}
    out = {}
    for ablation in ablations:
        key = _stage_key(ablation)
        try:
            if key not in stages:
                weights = None if key == "random_init" else pretrained
                model = fresh_model(cfg, weights, rng_stream(seed, f"init:{task.name}:{key}"))
                model.use_eq_encoder = key != "no_eq_encoder"
                subsets = sample_subsets(Xtr, ytr, cfg.finetune.num_subsets, cfg.finetune.subset_rows,
                                         rng_stream(seed, f"subsets:{task.name}"))
                quads = build_quadruples(subsets, model, cfg.fitness, rng_stream(seed, f"prepare:{task.name}:{key}"),
                                         cfg.finetune.random_mix_ratio, cfg.finetune.suggest_mode,
                                         cfg.finetune.suggest_temperature)
                run_finetune(model, quads, _finetune_cfg(cfg, key), rng_stream(seed, f"finetune:{task.name}:{key}"))
                stages[key], quads_by_stage[key] = model, quads
            model, quads = stages[key], quads_by_stage[key]
            res = discover(model, Xtr, ytr, quads, _search_cfg(cfg, ablation),
                           rng_stream(seed, f"search:{task.name}:{ablation}"))
            if log_dir is not None:
                log_dir.mkdir(parents=True, exist_ok=True)
                with open(log_dir / f"{task.name}_{ablation}.jsonl", "w") as fh:
                    for rec in res.log_records():
                        fh.write(json.dumps(rec) + "\n")
            pred, flagged = evaluate_batch(res.best.tree, Xte)
            r2t = None if flagged.any() else r2_value(yte, pred)
            out[ablation] = TaskResult(
                task=task.name,
                r2_test=r2t,
                r2_train=res.best.r2_train,
                complexity=res.best.complexity,
                solved=r2t is not None and r2t > cfg.bench.threshold,
                eq=res.log_records()[res.log.index(res.best)]["eq"],
                infix=render_infix(res.best.tree),
                candidates=len(res.log),
            )
        except Exception as exc:  # one task failing must not sink the suite
            log.warning("task %s (%s) failed: %s", task.name, ablation, exc)
            log.debug("%s", traceback.format_exc())
            out[ablation] = TaskResult(task.name, None, None, None, False, error=f"{type(exc).__name__}: {exc}")
    return out


def run_suite(tasks: Sequence[TaskSpec], cfg: RunConfig, ablations: str | Sequence[str],
              pretrained: dict[str, np.ndarray] | None, out_dir: str | Path | None = None) -> dict[str, BenchReport]:
    """Run every task under each ablation; returns one report per ablation."""
    if isinstance(ablations, str):
        ablations = [ablations]
    for a in ablations:
        if a not in ABLATIONS:
            raise ValueError(f"unknown ablation {a!r}; choose from {ABLATIONS}")
    rows: dict[str, list[TaskResult]] = {a: [] for a in ablations}
    timing: dict[str, float] = {}
    log_dir = None if out_dir is None else Path(out_dir) / "candidates"
    t_start = time.perf_counter()
    for task in tasks:
        t0 = time.perf_counter()
        res = run_task(task, cfg, ablations, pretrained, log_dir)
        timing[task.name] = time.perf_counter() - t0
        for a in ablations:
            rows[a].append(res[a])
        log.info("task %s: %s", task.name,
                 ", ".join(f"{a}={res[a].r2_test if res[a].r2_test is None else round(res[a].r2_test, 4)}"
                           for a in ablations))
    timing["total"] = time.perf_counter() - t_start
    reports = {a: BenchReport(a, rows[a], cfg.to_dict(), cfg.bench.threshold, dict(timing)) for a in ablations}
    if out_dir is not None:
        for rep in reports.values():
            rep.save(out_dir)
    return reports
