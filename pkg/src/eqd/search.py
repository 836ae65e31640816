"""Latent search: start from the best fine-tuning instances, climb the
evaluator's score in the fused embedding space, decode each visited point and
refit the decoded equation's constants on the training split."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NoValidCandidate, NonFiniteGradient
from .expr import (
    Kind,
    Node,
    TokenSeq,
    constant_values,
    evaluate_batch,
    parse_prefix,
    render_infix,
    serialize_prefix,
    to_text,
    variables,
    with_constants,
)
from .finetune import Quadruple, r2_value
from .nn import EquationModel, Evaluator, generate

BAD_OBJECTIVE = 1e12


@dataclass
class SearchConfig:
    k_init: int = 10
    max_steps: int = 20
    eta: float = 0.05
    backoff_retries: int = 3
    max_candidates: int = 100
    stop_r2: float = 0.99
    label_source: str = "gold"
    decode_mode: str = "sample"
    temperature: float = 1.0
    include_seed_equations: bool = True
    refit_perturbations: tuple[float, ...] = (0.1, 1.0)
    max_len: int | None = None

    def __post_init__(self):
        if self.k_init < 1:
            raise ConfigError("search.k_init must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("search.max_steps must be >= 0")
        if self.max_candidates < 1:
            raise ConfigError("search.max_candidates must be >= 1")
        if not 0.0 < self.stop_r2 <= 1.0:
            raise ConfigError("search.stop_r2 must lie in (0, 1]")
        if self.label_source not in ("gold", "pseudo"):
            raise ConfigError(f"search.label_source must be gold or pseudo, got {self.label_source!r}")
        if self.decode_mode not in ("greedy", "sample"):
            raise ConfigError(f"search.decode_mode must be greedy or sample, got {self.decode_mode!r}")
        self.refit_perturbations = tuple(self.refit_perturbations)


@dataclass
class Candidate:
    tokens: TokenSeq
    tree: Node | None
    r2_train: float | None
    complexity: int
    init: int
    step: int
    valid: bool
    reason: str = ""

    def to_json(self) -> dict:
        return {
            "init": self.init,
            "step": self.step,
            "eq": to_text(self.tokens) if self.tree is None else to_text(serialize_prefix(self.tree)),
            "infix": render_infix(self.tree) if self.tree is not None else "",
            "r2_train": self.r2_train,
            "complexity": self.complexity,
            "valid": self.valid,
        }


def select_initial(quads: Sequence[Quadruple], k: int) -> list[int]:
    """Indices of the ``k`` highest-fitness quadruples; ties go to the shorter
    equation, then the lower index."""
    if not quads:
        raise ValueError("need at least one quadruple")
    order = sorted(range(len(quads)), key=lambda i: (-quads[i].r, quads[i].complexity, i))
    return order[:k]


def ascend(E_f: np.ndarray, evaluator: Evaluator, eta: float, steps: int,
           backoff_retries: int = 0) -> list[np.ndarray]:
    """Gradient ascent on the evaluator score starting at ``E_f``.

    Returns the visited points ``[E^0, ..., E^steps]``.  With backoff, a step
    that lowers the score is retried at half the step size (at most
    ``backoff_retries`` times) and the reduced size is kept.  A non-finite
    gradient ends the trajectory early.
    """
    E = np.array(E_f, dtype=np.float64)
    traj = [E.copy()]
    for _ in range(steps):
        try:
            score, grad = _score_and_grad(evaluator, E)
        except NonFiniteGradient:
            break
        nxt = E + eta * grad
        for _ in range(backoff_retries):
            if _score(evaluator, nxt) >= score:
                break
            eta *= 0.5
            nxt = E + eta * grad
        E = nxt
        traj.append(E.copy())
    return traj


def _score(evaluator: Evaluator, E: np.ndarray) -> float:
    with ad.no_grad():
        return evaluator(Tensor(E)).item()


def _score_and_grad(evaluator: Evaluator, E: np.ndarray) -> tuple[float, np.ndarray]:
    x = Tensor(E.copy(), requires_grad=True)
    out = evaluator(x)
    grads = ad.backward(out)
    g = grads.get(x)
    if g is None:
        g = np.zeros_like(E)
    if not np.isfinite(g).all():
        raise NonFiniteGradient("evaluator gradient is not finite")
    return out.item(), g


# ------------------------------------------------------------------ refitting


def _mse(tree: Node, X: np.ndarray, y: np.ndarray, c: np.ndarray) -> float:
    pred, flagged = evaluate_batch(tree, X, c)
    if flagged.any():
        return BAD_OBJECTIVE
    val = float(np.mean((pred - y) ** 2))
    return val if math.isfinite(val) else BAD_OBJECTIVE


def refit_constants(tree: Node, X: np.ndarray, y: np.ndarray,
                    perturbations: Sequence[float] = (0.1, 1.0)) -> tuple[Node, float]:
    """Re-estimate every constant leaf by BFGS on the squared error.

    Starts from the decoded values (placeholders start at 1) and from those
    values shifted by each perturbation; the best end point wins, and the
    original constants are kept if no start improves on them.
    """
    init = np.array([1.0 if v is None else v for v in constant_values(tree)], dtype=np.float64)
    if init.size == 0:
        return tree, _mse(tree, X, y, init)
    best_c, best_f = init, _mse(tree, X, y, init)
    for start in [init] + [init + p for p in perturbations]:
        res = minimize(lambda c: _mse(tree, X, y, c), start, method="BFGS", jac="3-point",
                       options={"maxiter": 200, "gtol": 1e-10})
        if math.isfinite(res.fun) and res.fun < best_f:
            best_c, best_f = np.asarray(res.x, dtype=np.float64), float(res.fun)
    return with_constants(tree, best_c.tolist()), best_f


def make_candidate(tokens: TokenSeq, X: np.ndarray, y: np.ndarray, init: int, step: int,
                   perturbations: Sequence[float] = (0.1, 1.0)) -> Candidate:
    """Parse, check variables, refit constants and score on (X, y)."""
    if X.shape[0] == 0:
        return Candidate(tokens, None, None, len(tokens), init, step, False, "EmptyData")
    try:
        tree = parse_prefix(tokens)
    except Exception as exc:
        return Candidate(tokens, None, None, len(tokens), init, step, False, f"unparseable: {exc}")
    if any(i >= X.shape[1] for i in variables(tree)):
        return Candidate(tokens, None, None, len(tokens), init, step, False, "variable index out of range")
    if any(n.token.kind is Kind.CONSTANT for n in tree.walk()):
        tree, _ = refit_constants(tree, X, y, perturbations)
    pred, flagged = evaluate_batch(tree, X)
    if flagged.any():
        return Candidate(tokens, tree, None, len(tokens), init, step, False, "domain error on training rows")
    r2 = r2_value(y, pred) if y.size >= 2 else None
    if r2 is None:
        return Candidate(tokens, tree, None, len(tokens), init, step, False, "undefined R2")
    return Candidate(tokens, tree, r2, len(tokens), init, step, True)


def decode_and_refit(E: np.ndarray, model: EquationModel, X: np.ndarray, y: np.ndarray,
                     rng: np.random.Generator, cfg: SearchConfig | None = None,
                     init: int = 0, step: int = 0) -> Candidate:
    cfg = cfg or SearchConfig()
    gen = generate(model.decoder, model.vocab, np.asarray(E)[None], cfg.decode_mode, cfg.temperature,
                   rng, cfg.max_len)[0]
    if not gen.valid:
        return Candidate(gen.tokens, None, None, len(gen.tokens), init, step, False, gen.reason)
    return make_candidate(gen.tokens, np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64),
                          init, step, cfg.refit_perturbations)


# ------------------------------------------------------------------ discovery


@dataclass
class SearchResult:
    best: Candidate
    log: list[Candidate] = field(default_factory=list)
    initial: list[int] = field(default_factory=list)
    stopped_early: bool = False

    def log_records(self) -> list[dict]:
        return [c.to_json() for c in self.log]


def _better(a: Candidate, b: Candidate | None) -> bool:
    if b is None:
        return True
    if a.r2_train != b.r2_train:
        return a.r2_train > b.r2_train
    return a.complexity < b.complexity


def initial_embeddings(model: EquationModel, quads: Sequence[Quadruple], label_source: str) -> np.ndarray:
    """Fused embeddings [k, d] of the given quadruples."""
    X = np.stack([q.X for q in quads])
    labels = np.stack([q.y if label_source == "gold" else q.encoder_labels() for q in quads])
    with ad.no_grad():
        E_n = model.data_encoder(X, labels)
        E_f, _ = model.fused(E_n, [q.eq for q in quads])
    return E_f.data


def discover(model: EquationModel, X: np.ndarray, y: np.ndarray, quads: Sequence[Quadruple],
             cfg: SearchConfig, rng: np.random.Generator) -> SearchResult:
    """Search for the equation with the best training R^2.

    Trajectories for all initial points are computed first; embeddings are then
    decoded step by step across initial points until the candidate budget is
    spent or a candidate's training R^2 exceeds ``cfg.stop_r2``.  When enabled,
    each initial point's own equation is scored first (logged as step -1).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    picks = select_initial(quads, cfg.k_init)
    chosen = [quads[i] for i in picks]
    E0 = initial_embeddings(model, chosen, cfg.label_source)
    trajs = [ascend(E0[i], model.evaluator, cfg.eta, cfg.max_steps, cfg.backoff_retries)
             for i in range(len(chosen))]
    log: list[Candidate] = []
    best: Candidate | None = None
    cache: dict[str, Candidate] = {}

    def consider(tokens: TokenSeq, init: int, step: int, reason: str = "") -> bool:
        nonlocal best
        if reason:
            cand = Candidate(tokens, None, None, len(tokens), init, step, False, reason)
        else:
            key = to_text(tokens)
            if key not in cache:
                cache[key] = make_candidate(tokens, X, y, init, step, cfg.refit_perturbations)
            hit = cache[key]
            cand = Candidate(tokens, hit.tree, hit.r2_train, hit.complexity, init, step, hit.valid, hit.reason)
        log.append(cand)
        if cand.valid and _better(cand, best):
            best = cand
        return cand.valid and cand.r2_train > cfg.stop_r2

    def result(stopped: bool) -> SearchResult:
        if best is None:
            reasons: dict[str, int] = {}
            for c in log:
                reasons[c.reason] = reasons.get(c.reason, 0) + 1
            raise NoValidCandidate("no decoded candidate was valid",
                                   {"candidates": len(log), "reasons": reasons})
        return SearchResult(best, log, picks, stopped)

    if cfg.include_seed_equations:
        for i, q in enumerate(chosen):
            if len(log) >= cfg.max_candidates:
                return result(False)
            if consider(q.eq, i, -1):
                return result(True)
    for step in range(cfg.max_steps + 1):
        active = [i for i, t in enumerate(trajs) if step < len(t)]
        room = cfg.max_candidates - len(log)
        if not active or room <= 0:
            break
        active = active[:room]
        gens = generate(model.decoder, model.vocab, np.stack([trajs[i][step] for i in active]),
                        cfg.decode_mode, cfg.temperature, rng, cfg.max_len)
        for i, g in zip(active, gens):
            if consider(g.tokens, i, step, "" if g.valid else g.reason):
                return result(True)
    return result(False)


def save_candidate_log(path: str | Path, result: SearchResult) -> None:
    with open(path, "w") as fh:
        for rec in result.log_records():
            fh.write(json.dumps(rec) + "\n")
