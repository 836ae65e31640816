"""Desk-scale stand-in for a pretrained equation-discovery foundation model.

A synthetic corpus of (dataset, equation) pairs is generated from random
expressions, and the data encoder plus decoder are trained end to end with
teacher-forced cross-entropy.  The resulting weights are what fine-tuning
transfers and partially freezes.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .errors import CorruptSegment, NonFiniteLoss, NonFiniteValue
from .expr import (
    Node,
    TokenSeq,
    evaluate_batch,
    parse_prefix,
    random_expr,
    serialize_prefix,
    to_text,
    tokenize,
    variables,
)
from .nn import EquationModel, ModelConfig, generate, pad_batch
from .seeding import child_rngs

log = logging.getLogger(__name__)

# Weights used for the pretraining corpus; leans toward the arithmetic and
# trigonometric forms that dominate low-dimensional physics benchmarks.
CORPUS_OPERATOR_WEIGHTS: dict[str, float] = {
    "add": 1.0,
    "sub": 0.6,
    "mul": 1.2,
    "div": 0.5,
    "pow2": 0.5,
    "sqrt": 0.15,
    "sin": 0.45,
    "cos": 0.35,
    "exp": 0.15,
    "log": 0.1,
    "abs": 0.05,
}


@dataclass
class PretrainExample:
    X: np.ndarray
    y: np.ndarray
    target: TokenSeq

    def to_json(self) -> dict:
        return {"x": self.X.tolist(), "y": self.y.tolist(), "target": to_text(self.target)}

    @classmethod
    def from_json(cls, obj: dict) -> "PretrainExample":
        return cls(np.asarray(obj["x"], dtype=np.float64), np.asarray(obj["y"], dtype=np.float64),
                   tokenize(obj["target"]))


def _has_constant_subtree(tree: Node) -> bool:
    """True if some operator node has no variable below it (a foldable constant)."""
    return any(n.children and not variables(n) for n in tree.walk())


def _sample_example(rng, num_vars_range, depth_range, rows, input_range, operator_weights,
                    max_tries: int = 200) -> PretrainExample:
    lo, hi = input_range
    for _ in range(max_tries):
        k = int(rng.integers(num_vars_range[0], num_vars_range[1] + 1))
        depth = int(rng.integers(depth_range[0], depth_range[1] + 1))
        tree = random_expr(rng, depth, k, operator_weights)
        if variables(tree) != set(range(k)) or _has_constant_subtree(tree):
            continue
        X = rng.uniform(lo, hi, size=(rows, k))
        y, bad = evaluate_batch(tree, X)
        for _ in range(10):
            if not bad.any():
                break
            X[bad] = rng.uniform(lo, hi, size=(int(bad.sum()), k))
            y, bad = evaluate_batch(tree, X)
        if bad.any():
            continue
        if np.std(y) < 1e-6 or np.abs(y).max() > 1e6:
            continue
        return PretrainExample(X, y, serialize_prefix(tree))
    raise RuntimeError("could not sample a well-defined example")


def build_corpus(
    rng: np.random.Generator,
    size: int,
    num_vars_range: tuple[int, int] = (1, 3),
    depth_range: tuple[int, int] = (2, 4),
    rows_per_example: int = 64,
    input_range: tuple[float, float] = (-4.0, 4.0),
    operator_weights: dict[str, float] | None = None,
) -> list[PretrainExample]:
    """Synthesize ``size`` (X, y, target) examples, each on its own RNG stream."""
    if size < 1:
        raise ValueError("corpus size must be >= 1")
    weights = operator_weights or CORPUS_OPERATOR_WEIGHTS
    return [
        _sample_example(r, num_vars_range, depth_range, rows_per_example, input_range, weights)
        for r in child_rngs(rng, size)
    ]


def corpus_digest(corpus: Sequence[PretrainExample]) -> str:
    h = hashlib.sha256()
    for ex in corpus:
        h.update(ex.X.tobytes())
        h.update(ex.y.tobytes())
        h.update(to_text(ex.target).encode())
    return h.hexdigest()


def save_corpus(path: str | Path, corpus: Sequence[PretrainExample]) -> None:
    with open(path, "w") as fh:
        for ex in corpus:
            fh.write(json.dumps(ex.to_json()) + "\n")


def load_corpus(path: str | Path) -> list[PretrainExample]:
    with open(path) as fh:
        return [PretrainExample.from_json(json.loads(line)) for line in fh if line.strip()]


# ------------------------------------------------------------------ training


def _batch_arrays(examples: Sequence[PretrainExample]):
    k = max(ex.X.shape[1] for ex in examples)
    n = examples[0].X.shape[0]
    X = np.zeros((len(examples), n, k))
    for i, ex in enumerate(examples):
        if ex.X.shape[0] != n:
            raise ValueError("examples in one batch must share a row count")
        X[i, :, : ex.X.shape[1]] = ex.X
    y = np.stack([ex.y for ex in examples])
    counts = np.array([ex.X.shape[1] for ex in examples])
    return X, y, counts


def teacher_forced_batch(model: EquationModel, targets: Sequence[TokenSeq]):
    """(decoder input ids, target ids, target mask) for BOS-prefixed teacher forcing."""
    v = model.vocab
    seqs = [[v.bos] + v.encode(t) + [v.eos] for t in targets]
    ids, mask = pad_batch(seqs, v.pad)
    return ids[:, :-1], ids[:, 1:], mask[:, 1:]


def reconstruction_loss(model: EquationModel, E: Tensor, targets: Sequence[TokenSeq]) -> Tensor:
    """Sum over tokens of -log P(t_j | E, t_<j), averaged over the batch."""
    inp, tgt, mask = teacher_forced_batch(model, targets)
    logits = model.decoder(E, inp)
    return ad.scale(ad.cross_entropy_from_logits(logits, tgt, mask), 1.0 / len(targets))


def pretrain(
    model: EquationModel,
    corpus: Sequence[PretrainExample],
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    clip: float = 1.0,
    weight_decay: float = 0.01,
) -> tuple[EquationModel, list[float]]:
    """Train data encoder + decoder on the corpus; returns per-epoch mean loss."""
    if not corpus:
        raise ValueError("empty corpus")
    params = {n: p for n, p in model.parameters().items()
              if n.startswith(("data_encoder.", "decoder."))}
    for p in params.values():
        p.requires_grad = p.trainable = True
    opt = ad.AdamW(list(params.values()), lr=lr, weight_decay=weight_decay)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = [corpus[i] for i in order[start : start + batch_size]]
            X, y, counts = _batch_arrays(batch)
            try:
                E_n = model.data_encoder(X, y, counts)
                loss = reconstruction_loss(model, E_n, [ex.target for ex in batch])
            except NonFiniteValue as exc:
                raise NonFiniteLoss(f"epoch {epoch}, batch at {start}: {exc}") from exc
            if not np.isfinite(loss.item()):
                raise NonFiniteLoss(f"epoch {epoch}, batch at {start}: loss {loss.item()}")
            grads = ad.backward(loss)
            grads, _ = ad.clip_grad_norm({p: g for p, g in grads.items() if p.trainable}, clip)
            opt.step(grads)
            total += loss.item() * len(batch)
            count += len(batch)
        curve.append(total / count)
        log.info("pretrain epoch %d loss %.4f", epoch, curve[-1])
    model.metadata.update({"epochs": epochs, "corpus_sha256": corpus_digest(corpus), "loss_curve": curve})
    return model, curve


# ------------------------------------------------------------------ suggestions


def _usable(tokens: TokenSeq, num_vars: int) -> bool:
    try:
        tree = parse_prefix(tokens)
    except Exception:
        return False
    return all(i < num_vars for i in variables(tree))


def suggest_equations(
    model: EquationModel,
    Xs: Sequence[np.ndarray],
    ys: Sequence[np.ndarray],
    mode: str,
    rng: np.random.Generator,
    retries: int = 8,
    temperature: float = 1.0,
    max_len: int | None = None,
    chunk: int = 25,
    fallback_depth: int = 3,
) -> list[TokenSeq]:
    """Batched :func:`suggest_equation`; subsets must share shape."""
    out: list[TokenSeq | None] = [None] * len(Xs)
    E_all = []
    with ad.no_grad():
        for s in range(0, len(Xs), chunk):
            E_all.append(model.data_encoder(np.stack(Xs[s : s + chunk]), np.stack(ys[s : s + chunk])).data)
    E_all = np.concatenate(E_all)
    num_vars = Xs[0].shape[1]
    pending = list(range(len(Xs)))
    for attempt in range(retries + 1):
        if not pending:
            break
        # greedy decoding is deterministic, so retries after a greedy miss sample instead
        m = mode if attempt == 0 else "sample"
        gens = generate(model.decoder, model.vocab, E_all[pending], m, temperature, rng, max_len)
        still = []
        for idx, g in zip(pending, gens):
            if g.valid and _usable(g.tokens, num_vars):
                out[idx] = g.tokens
            else:
                still.append(idx)
        pending = still
    for idx in pending:
        out[idx] = serialize_prefix(random_expr(rng, fallback_depth, num_vars))
    return out  # type: ignore[return-value]


def suggest_equation(model: EquationModel, X: np.ndarray, y: np.ndarray, mode: str,
                     rng: np.random.Generator, **kw) -> TokenSeq:
    """Encode (X, y), decode an equation; invalid outputs are retried, then replaced
    by a random expression."""
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("X and y must be finite")
    return suggest_equations(model, [np.asarray(X, dtype=np.float64)], [np.asarray(y, dtype=np.float64)],
                             mode, rng, **kw)[0]


# ------------------------------------------------------------------ checkpoints

SURROGATE_PREFIXES = ("data_encoder.", "decoder.")


def save_checkpoint(path: str | Path, model: EquationModel, seed: int | None = None,
                    kind: str = "surrogate") -> str:
    """Write ``model`` in EQCK format; returns the file's sha256.

    A surrogate checkpoint stores only the data encoder and decoder; a
    fine-tuned checkpoint stores every component with its freeze flag.
    """
    params = model.parameters()
    if kind == "surrogate":
        params = {n: p for n, p in params.items() if n.startswith(SURROGATE_PREFIXES)}
    header = {
        "kind": kind,
        "config": model.config.to_dict(),
        "seed": seed,
        "frozen": {n: (not p.trainable) for n, p in params.items()},
        "metadata": model.metadata,
        "use_eq_encoder": model.use_eq_encoder,
    }
    return checkpoint.save(path, {n: p.data for n, p in params.items()}, header)


def load_checkpoint(path: str | Path, rng: np.random.Generator | None = None) -> EquationModel:
    """Rebuild a model from an EQCK file.

    Components missing from a surrogate checkpoint (equation encoder, fusion,
    evaluator) are freshly initialized from ``rng``.
    """
    header, tensors = checkpoint.load(path)
    cfg = ModelConfig.from_dict(header["config"])
    init_rng = rng if rng is not None else np.random.default_rng(header.get("seed") or 0)
    model = EquationModel.initialize(cfg, init_rng)
    params = model.parameters()
    expected = set(params) if header.get("kind") != "surrogate" else {
        n for n in params if n.startswith(SURROGATE_PREFIXES)}
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))[:3]
        extra = sorted(set(tensors) - expected)[:3]
        raise CorruptSegment(f"tensor set mismatch (missing {missing}, unexpected {extra})")
    frozen = header.get("frozen", {})
    for name, arr in tensors.items():
        p = params[name]
        if arr.shape != p.shape:
            raise CorruptSegment(f"{name}: shape {arr.shape} vs model {p.shape}")
        p.data = arr.astype(p.data.dtype)
        p.trainable = p.requires_grad = not frozen.get(name, False)
    model.metadata = dict(header.get("metadata") or {})
    model.use_eq_encoder = bool(header.get("use_eq_encoder", True))
    return model


def model_digest(model: EquationModel, prefixes: Sequence[str] | None = None) -> str:
    params = model.parameters()
    if prefixes is not None:
        params = {n: p for n, p in params.items() if n.startswith(tuple(prefixes))}
    return checkpoint.tensor_digest({n: p.data for n, p in params.items()})
