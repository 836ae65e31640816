"""Dataset-specific fine-tuning.

A single data table is turned into many training instances: bootstrap
subsets, an equation suggested for each by the pretrained surrogate (plus a
share of random ones), the labels that equation produces and a fitness score.
The equation encoder, fusion, evaluator and last decoder layer are then
trained on the joint loss while the pretrained tensors stay frozen.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import tensor_digest
from .errors import ConfigError, EmptyData, LengthMismatch, NonFiniteLoss, NonFiniteValue
from .expr import (
    Node,
    TokenSeq,
    complexity,
    evaluate_batch,
    parse_prefix,
    random_expr,
    serialize_prefix,
    to_text,
    tokenize,
)
from .nn import EquationModel, default_freeze_policy, freeze, unfreeze_all
from .surrogate import reconstruction_loss, suggest_equations

log = logging.getLogger(__name__)

FITNESS_MODES = ("standard", "paper_literal")
DEGENERATE_VARIANCE = 1e-12


@dataclass
class FitnessConfig:
    lam: float = 0.0
    L: int = 200
    mode: str = "standard"
    floor: float = -1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("fitness.lam must be >= 0")
        if self.L < 1:
            raise ConfigError("fitness.L must be >= 1")
        if self.mode not in FITNESS_MODES:
            raise ConfigError(f"fitness.mode must be one of {FITNESS_MODES}, got {self.mode!r}")


@dataclass
class FinetuneConfig:
    alpha: float = 0.05
    beta: float = 100.0
    epochs: int = 10
    lr: float = 1e-4
    weight_decay: float = 0.01
    num_subsets: int = 100
    subset_rows: int = 200
    batch_size: int = 16
    clip: float = 1.0
    random_mix_ratio: float = 0.1
    suggest_mode: str = "sample"
    suggest_temperature: float = 1.0
    freeze_policy: list[str] | None = None  # None -> data encoder + all but the last decoder layer
    unfreeze_all: bool = False

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("finetune.alpha and finetune.beta must be > 0")
        if self.epochs < 0 or self.num_subsets < 1 or self.subset_rows < 1 or self.batch_size < 1:
            raise ConfigError("finetune epochs/num_subsets/subset_rows/batch_size out of range")
        if not 0.0 <= self.random_mix_ratio <= 1.0:
            raise ConfigError("finetune.random_mix_ratio must lie in [0, 1]")
        if self.suggest_mode not in ("greedy", "sample"):
            raise ConfigError(f"finetune.suggest_mode must be greedy or sample, got {self.suggest_mode!r}")


# ------------------------------------------------------------------ fitness


def r2_value(y: np.ndarray, y_hat: np.ndarray, mode: str = "standard") -> float | None:
    """Coefficient of determination, or None when the denominator degenerates.

    ``standard`` centres the denominator on the gold labels; ``paper_literal``
    uses sum((y_hat - mean(y))^2).
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise LengthMismatch(f"labels {y.shape} vs predictions {y_hat.shape}")
    if y.size < 2:
        raise LengthMismatch("need at least two labels")
    if mode not in ("standard", "paper_literal"):
        raise ValueError(f"unknown r2 mode {mode!r}")
    y_bar = y.mean()
    # huge predictions overflow to inf, which yields -inf (then the floor), not an error
    with np.errstate(over="ignore", invalid="ignore"):
        denom = float(np.sum(((y if mode == "standard" else y_hat) - y_bar) ** 2))
        if not math.isfinite(denom) or denom < DEGENERATE_VARIANCE:
            return None
        return 1.0 - float(np.sum((y_hat - y) ** 2)) / denom


def fitness(y: np.ndarray, y_hat: np.ndarray, eq: Node | TokenSeq | int, cfg: FitnessConfig) -> float:
    """R^2-style accuracy plus lam * exp(-l / L), floored at ``cfg.floor``.

    NaN entries in ``y_hat`` mark rows where the equation was undefined; any
    such row gives the floor.  ``eq`` may be a tree, a token list or a length.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise LengthMismatch(f"labels {y.shape} vs predictions {y_hat.shape}")
    if isinstance(eq, Node):
        length = complexity(eq)
    elif isinstance(eq, (int, np.integer)):
        length = int(eq)
    else:
        length = len(eq)
    if not np.isfinite(y_hat).all():
        return cfg.floor
    r2 = r2_value(y, y_hat, cfg.mode)
    if r2 is None:
        return cfg.floor
    return max(r2 + cfg.lam * math.exp(-length / cfg.L), cfg.floor)


# ------------------------------------------------------------------ quadruples


@dataclass
class Quadruple:
    X: np.ndarray
    y: np.ndarray
    eq: TokenSeq
    y_hat: np.ndarray  # NaN on rows where the equation is undefined
    r: float
    domain_errors: int

    @property
    def tree(self) -> Node:
        return parse_prefix(self.eq)

    @property
    def complexity(self) -> int:
        return len(self.eq)

    def encoder_labels(self) -> np.ndarray:
        """Equation-estimated labels with undefined rows zero-filled for the data encoder."""
        return np.where(np.isfinite(self.y_hat), self.y_hat, 0.0)

    def to_json(self) -> dict:
        return {
            "x": self.X.tolist(),
            "y": self.y.tolist(),
            "eq": to_text(self.eq),
            "y_hat": [float(v) if math.isfinite(v) else None for v in self.y_hat],
            "r": self.r,
            "domain_errors": self.domain_errors,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Quadruple":
        missing = {"x", "y", "eq", "y_hat", "r", "domain_errors"} - set(obj)
        if missing:
            raise ValueError(f"quadruple record lacks {sorted(missing)}")
        y_hat = np.array([np.nan if v is None else v for v in obj["y_hat"]], dtype=np.float64)
        return cls(
            X=np.asarray(obj["x"], dtype=np.float64),
            y=np.asarray(obj["y"], dtype=np.float64),
            eq=tokenize(obj["eq"]),
            y_hat=y_hat,
            r=float(obj["r"]),
            domain_errors=int(obj["domain_errors"]),
        )


def save_quadruples(path: str | Path, quads: Sequence[Quadruple]) -> None:
    with open(path, "w") as fh:
        for q in quads:
            fh.write(json.dumps(q.to_json()) + "\n")


def load_quadruples(path: str | Path) -> list[Quadruple]:
    with open(path) as fh:
        return [Quadruple.from_json(json.loads(line)) for line in fh if line.strip()]


def sample_subsets(X: np.ndarray, y: np.ndarray, n: int, rows: int,
                   rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` bootstrap subsets of ``rows`` rows each (sampled with replacement)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0 or y.size == 0:
        raise EmptyData("cannot sample subsets from an empty table")
    if X.shape[0] != y.shape[0]:
        raise LengthMismatch(f"{X.shape[0]} feature rows vs {y.shape[0]} labels")
    out = []
    for _ in range(n):
        idx = rng.integers(0, X.shape[0], size=rows)
        out.append((X[idx], y[idx]))
    return out


def make_quadruple(X: np.ndarray, y: np.ndarray, eq: TokenSeq, cfg: FitnessConfig) -> Quadruple:
    y_hat, flagged = evaluate_batch(parse_prefix(eq), X)
    return Quadruple(X, y, list(eq), y_hat, fitness(y, y_hat, eq, cfg), int(flagged.sum()))


def build_quadruples(
    subsets: Sequence[tuple[np.ndarray, np.ndarray]],
    model: EquationModel,
    fitness_cfg: FitnessConfig,
    rng: np.random.Generator,
    random_mix_ratio: float = 0.1,
    suggest_mode: str = "sample",
    temperature: float = 1.0,
) -> list[Quadruple]:
    """One quadruple per subset.  A ``random_mix_ratio`` share of the equations
    are random expressions, the rest come from the surrogate."""
    if not subsets:
        return []
    n = len(subsets)
    num_vars = subsets[0][0].shape[1]
    n_random = int(round(random_mix_ratio * n))
    random_idx = set(rng.choice(n, size=n_random, replace=False).tolist()) if n_random else set()
    model_idx = [i for i in range(n) if i not in random_idx]
    eqs: dict[int, TokenSeq] = {}
    if model_idx:
        suggested = suggest_equations(model, [subsets[i][0] for i in model_idx],
                                      [subsets[i][1] for i in model_idx], suggest_mode, rng,
                                      temperature=temperature)
        eqs.update(zip(model_idx, suggested))
    for i in sorted(random_idx):
        eqs[i] = serialize_prefix(random_expr(rng, int(rng.integers(2, 5)), num_vars))
    return [make_quadruple(X, y, eqs[i], fitness_cfg) for i, (X, y) in enumerate(subsets)]


# ------------------------------------------------------------------ training


def apply_freeze_policy(model: EquationModel, cfg: FinetuneConfig) -> list[str]:
    params = model.parameters()
    unfreeze_all(params)
    if cfg.unfreeze_all:
        return []
    policy = cfg.freeze_policy if cfg.freeze_policy is not None else default_freeze_policy(model.config)
    return freeze(params, policy)


def _data_embeddings(model: EquationModel, quads: Sequence[Quadruple], chunk: int = 25) -> np.ndarray:
    with ad.no_grad():
        parts = [
            model.data_encoder(np.stack([q.X for q in quads[s : s + chunk]]),
                               np.stack([q.encoder_labels() for q in quads[s : s + chunk]])).data
            for s in range(0, len(quads), chunk)
        ]
    return np.concatenate(parts)


def joint_loss(model: EquationModel, batch: Sequence[Quadruple], cfg: FinetuneConfig,
               E_n: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Forward pass; returns (L, L_est, L_rec) as graph tensors.

    ``E_n`` may carry precomputed data embeddings when the data encoder is frozen.
    """
    if E_n is None:
        E = model.data_encoder(np.stack([q.X for q in batch]), np.stack([q.encoder_labels() for q in batch]))
    else:
        E = Tensor(E_n)
    E_f, _ = model.fused(E, [q.eq for q in batch])
    r_hat = model.evaluator(E_f)
    l_est = ad.mse(r_hat, np.array([q.r for q in batch]))
    l_rec = reconstruction_loss(model, E_f, [q.eq for q in batch])
    total = ad.scale(l_est, cfg.alpha) + ad.scale(l_rec, cfg.beta)
    return total, l_est, l_rec


def finetune_step(batch: Sequence[Quadruple], model: EquationModel, cfg: FinetuneConfig,
                  opt: ad.AdamW, E_n: np.ndarray | None = None) -> tuple[float, float, float]:
    """One optimizer step on the trainable tensors; returns (L, L_est, L_rec)."""
    try:
        total, l_est, l_rec = joint_loss(model, batch, cfg, E_n)
    except NonFiniteValue as exc:
        raise NonFiniteLoss(str(exc)) from exc
    if not math.isfinite(total.item()):
        raise NonFiniteLoss(f"joint loss is {total.item()}")
    grads = ad.backward(total)
    grads = {p: g for p, g in grads.items() if p.trainable}
    if cfg.clip:
        grads, _ = ad.clip_grad_norm(grads, cfg.clip)
    opt.step(grads)
    return total.item(), l_est.item(), l_rec.item()


@dataclass
class FinetuneResult:
    model: EquationModel
    metrics: list[dict] = field(default_factory=list)
    frozen: list[str] = field(default_factory=list)
    frozen_digest: str = ""


def run_finetune(model: EquationModel, quads: Sequence[Quadruple], cfg: FinetuneConfig,
                 rng: np.random.Generator) -> FinetuneResult:
    """Train under the freeze policy for ``cfg.epochs`` epochs.

    Metrics hold one row per epoch with mean L, L_est and L_rec.  The digest of
    the frozen tensors is checked to be unchanged at the end.
    """
    if not quads:
        raise EmptyData("no quadruples to fine-tune on")
    frozen = apply_freeze_policy(model, cfg)
    params = model.parameters()
    frozen_digest = model_digest_of(params, frozen)
    trainable = [p for p in params.values() if p.trainable]
    opt = ad.AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    encoder_frozen = not any(p.trainable for n, p in params.items() if n.startswith("data_encoder."))
    E_cache = _data_embeddings(model, quads) if encoder_frozen else None
    metrics = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(quads))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = [quads[i] for i in idx]
            sums += np.array(finetune_step(batch, model, cfg, opt,
                                           None if E_cache is None else E_cache[idx])) * len(batch)
        mean = sums / len(quads)
        row = {"epoch": epoch, "loss": float(mean[0]), "loss_est": float(mean[1]), "loss_rec": float(mean[2])}
        metrics.append(row)
        log.info("finetune epoch %d L %.5f L_est %.5f L_rec %.5f", epoch, *mean)
    if model_digest_of(model.parameters(), frozen) != frozen_digest:
        raise RuntimeError("frozen tensors changed during fine-tuning")
    model.metadata["finetune"] = {"config": asdict(cfg), "metrics": metrics, "frozen_sha256": frozen_digest}
    return FinetuneResult(model, metrics, frozen, frozen_digest)


def model_digest_of(params: dict[str, Tensor], names: Sequence[str]) -> str:
    return tensor_digest({n: params[n].data for n in names})

