"""Neural blocks: data encoder, LSTM equation encoder, attentive fusion,
evaluator head and autoregressive decoder, all on top of :mod:`eqd.autodiff`."""
from __future__ import annotations

import fnmatch
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NonFiniteInput, PatternMatchesNothing, SequenceTooLong
from .expr import (
    BOS,
    DEFAULT_OPERATOR_SET,
    EOS,
    LITERAL_VALUES,
    MAX_VARS,
    PAD,
    PLACEHOLDER,
    Kind,
    Token,
    TokenSeq,
    is_valid_prefix,
)

NEG_INF = -1e9
N_SLOTS = MAX_VARS + 1  # ten feature slots plus the label slot
EXP_MIN, EXP_MAX = -8, 8
N_MANTISSA_FEATURES = 7


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 128
    L: int = 200
    evaluator_hidden: int = 128
    value_dim: int = 16
    n_memory: int = 4
    multi_slot: bool = True
    dtype: str = "float64"
    operator_set: tuple[str, ...] = DEFAULT_OPERATOR_SET

    def __post_init__(self):
        self.operator_set = tuple(self.operator_set)
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.L < 2:
            raise ConfigError("L must be >= 2")
        if self.n_decoder_layers < 1 or self.n_encoder_layers < 0:
            raise ConfigError("need at least one decoder layer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["operator_set"] = list(self.operator_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ------------------------------------------------------------------ vocabulary


class Vocab:
    """Token ids: specials, operators, variables, literal constants, placeholder."""

    def __init__(self, operator_set: Sequence[str] = DEFAULT_OPERATOR_SET):
        symbols = [PAD, BOS, EOS, *operator_set]
        symbols += [f"x_{i}" for i in range(MAX_VARS)]
        symbols += [Token.constant(v).symbol for v in sorted(LITERAL_VALUES)]
        symbols.append(PLACEHOLDER)
        self.tokens: list[Token] = [Token.parse(s) for s in symbols]
        self.index = {t.symbol: i for i, t in enumerate(self.tokens)}
        self.pad, self.bos, self.eos = 0, 1, 2
        self.placeholder = self.index[PLACEHOLDER]

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, tok: Token) -> int:
        i = self.index.get(tok.symbol)
        if i is not None:
            return i
        if tok.kind is Kind.CONSTANT:
            return self.placeholder
        raise KeyError(f"token {tok.symbol} not in vocabulary")

    def encode(self, tokens: Sequence[Token]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> TokenSeq:
        return [self.tokens[int(i)] for i in ids]

    def in_vocab(self, tok: Token) -> bool:
        return tok.symbol in self.index


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    T = max(1, max(len(s) for s in seqs))
    ids = np.full((len(seqs), T), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


# ------------------------------------------------------------------ numeric tokens


def numeric_triplets(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encode reals as (sign, 4-digit mantissa, exponent) with value = m * 10**e.

    Sign 0 is '+', 1 is '-'.  Exponents are clamped to [-8, 8]; zero maps to
    mantissa 0 with the smallest exponent.  3.14 -> (0, 3140, -3).
    """
    v = np.asarray(values, dtype=np.float64)
    sign = (v < 0).astype(np.int64)
    a = np.abs(v)
    with np.errstate(divide="ignore"):
        e = np.where(a > 0, np.floor(np.log10(np.where(a > 0, a, 1.0))) - 3, EXP_MIN)
    e = np.clip(e, EXP_MIN, EXP_MAX)
    m = np.rint(a / 10.0 ** e)
    carry = (m >= 10000) & (e < EXP_MAX)
    e = np.where(carry, e + 1, e)
    m = np.where(carry, np.rint(a / 10.0 ** e), m)
    m = np.minimum(m, 9999)
    m = np.where(a > 0, m, 0)
    return sign, m.astype(np.int64), e.astype(np.int64)


def mantissa_features(m: np.ndarray) -> np.ndarray:
    """Fixed smooth features of the mantissa bin (fed to a learned projection)."""
    u = (np.asarray(m, dtype=np.float64) - 1000.0) / 9000.0
    feats = [u]
    for k in (1, 2, 3):
        feats += [np.sin(math.pi * k * u), np.cos(math.pi * k * u)]
    return np.stack(feats, axis=-1)


# ------------------------------------------------------------------ module plumbing


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


def _param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.W = _param(rng, (d_in, d_out), 1.0 / math.sqrt(d_in))
        self.b = _zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            out = ad.reshape(ad.matmul(ad.reshape(x, (1, -1)), self.W), (-1,))
        else:
            out = ad.matmul(x, self.W)
        return out if self.b is None else out + self.b


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = _ones((d,))
        self.beta = _zeros((d,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    def __init__(self, rng, d: int, n_heads: int):
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d)
        self._h = n_heads
        self._d = d

    def _split(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return ad.transpose(ad.reshape(x, (B, T, self._h, self._d // self._h)), (0, 2, 1, 3))

    def __call__(self, xq: Tensor, xkv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        B, Tq, _ = xq.shape
        q, k, v = self._split(self.q(xq)), self._split(self.k(xkv)), self._split(self.v(xkv))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self._d // self._h))
        if mask is not None:
            scores = scores + Tensor(mask)
        w = ad.softmax(scores, axis=-1)
        ctx = ad.transpose(ad.matmul(w, v), (0, 2, 1, 3))
        return self.o(ad.reshape(ctx, (B, Tq, self._d)))


class FeedForward(Module):
    def __init__(self, rng, d: int, d_ff: int):
        self.fc1 = Linear(rng, d, d_ff)
        self.fc2 = Linear(rng, d_ff, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(rng, cfg.d_model, cfg.d_ff)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h)
        return x + self.ff(self.ln2(x))


class DecoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.ln1 = LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads)
        self.ln2 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads)
        self.ln3 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(rng, cfg.d_model, cfg.d_ff)

    def __call__(self, x: Tensor, memory: Tensor, causal: np.ndarray) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h, causal)
        x = x + self.cross_attn(self.ln2(x), memory)
        return x + self.ff(self.ln3(x))


# ------------------------------------------------------------------ data encoder


class DataEncoder(Module):
    """Rows of (features, label) -> one pooled vector of width d_model.

    Each value becomes a sign/mantissa/exponent triplet; the three embeddings
    plus a slot (feature-index) embedding are summed, the slots of a row are
    concatenated and projected, rows go through a transformer encoder without
    positional information, and the result is mean-pooled over rows.
    """

    def __init__(self, rng, cfg: ModelConfig):
        dv = cfg.value_dim
        self.sign_emb = _param(rng, (3, dv), 1.0)  # +, -, absent slot
        self.exp_emb = _param(rng, (EXP_MAX - EXP_MIN + 1, dv), 1.0)
        self.mant_proj = Linear(rng, N_MANTISSA_FEATURES, dv, bias=False)
        self.slot_emb = _param(rng, (N_SLOTS, dv), 1.0)
        self.row_proj = Linear(rng, N_SLOTS * dv, cfg.d_model)
        self.layers = [EncoderLayer(rng, cfg) for _ in range(cfg.n_encoder_layers)]
        self.ln_final = LayerNorm(cfg.d_model)

    def __call__(self, X: np.ndarray, y: np.ndarray, n_features=None) -> Tensor:
        """X [B,N,k] and y [B,N] (or unbatched [N,k], [N]) -> E_n [B,d].

        ``n_features`` gives per-example feature counts when a batch mixes
        dimensionalities (columns beyond the count are padding).
        """
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim == 2:
            return ad.reshape(self(X[None], y[None]), (-1,))
        B, N, k = X.shape
        if k > MAX_VARS:
            raise ValueError(f"at most {MAX_VARS} features are supported, got {k}")
        if y.shape != (B, N):
            raise ValueError(f"labels shape {y.shape} does not match rows {(B, N)}")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise NonFiniteInput("data encoder inputs must be finite")
        values = np.zeros((B, N, N_SLOTS))
        values[..., :k] = X
        values[..., -1] = y
        counts = np.full(B, k) if n_features is None else np.asarray(n_features)
        present = np.arange(N_SLOTS)[None, :] < counts[:, None]
        present[:, -1] = True
        present = present[:, None, :]  # [B,1,S]
        sign, mant, expo = numeric_triplets(values)
        sign = np.where(present, sign, 2)
        feats = mantissa_features(mant) * present[..., None]
        expo_ids = np.where(present, expo - EXP_MIN, 0 - EXP_MIN)
        emb = (
            ad.embedding(self.sign_emb, sign)
            + ad.embedding(self.exp_emb, expo_ids)
            + self.mant_proj(Tensor(feats))
            + self.slot_emb
        )
        h = self.row_proj(ad.reshape(emb, (B, N, -1)))
        for layer in self.layers:
            h = layer(h)
        h = self.ln_final(h)
        return ad.mean(h, axis=1)


def encode_data(encoder: DataEncoder, X: np.ndarray, labels: np.ndarray) -> Tensor:
    return encoder(X, labels)


# ------------------------------------------------------------------ equation encoder


class EquationEncoder(Module):
    """Single-layer LSTM over token embeddings, projected to d_model."""

    def __init__(self, rng, cfg: ModelConfig, vocab_size: int):
        d = cfg.d_model
        self.emb = _param(rng, (vocab_size, d), 1.0 / math.sqrt(d))
        self.W = _param(rng, (2 * d, 4 * d), 1.0 / math.sqrt(2 * d))
        b = np.zeros(4 * d)
        b[d : 2 * d] = 1.0  # forget-gate bias
        self.b = Tensor(b, requires_grad=True)
        self.out = Linear(rng, d, d)
        self._d = d
        self._L = cfg.L
        self._multi_slot = cfg.multi_slot

    def __call__(self, ids: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor, np.ndarray]:
        """Return (E_s [B,d], key/value slots [B,M,d], slot mask [B,M])."""
        ids = np.asarray(ids, dtype=np.int64)
        B, T = ids.shape
        lengths = mask.sum(axis=1)
        if lengths.max() > self._L:
            raise SequenceTooLong(f"equation of length {lengths.max()} exceeds L={self._L}")
        d = self._d
        x = ad.embedding(self.emb, ids)
        h = Tensor(np.zeros((B, d)))
        c = Tensor(np.zeros((B, d)))
        states = []
        for t in range(T):
            z = ad.matmul(ad.concat([x[:, t, :], h], axis=-1), self.W) + self.b
            i = ad.sigmoid(z[:, :d])
            f = ad.sigmoid(z[:, d : 2 * d])
            g = ad.tanh(z[:, 2 * d : 3 * d])
            o = ad.sigmoid(z[:, 3 * d :])
            c_new = f * c + i * g
            h_new = o * ad.tanh(c_new)
            m = mask[:, t : t + 1].astype(np.float64)
            if m.all():
                c, h = c_new, h_new
            else:
                c = c_new * m + c * (1.0 - m)
                h = h_new * m + h * (1.0 - m)
            states.append(h)
        E_s = self.out(h)
        if self._multi_slot:
            slots = self.out(ad.stack(states, axis=1))
            return E_s, slots, mask.copy()
        return E_s, ad.reshape(E_s, (B, 1, d)), np.ones((B, 1), dtype=bool)


def encode_equation(encoder: EquationEncoder, vocab: Vocab, T: TokenSeq) -> Tensor:
    ids, mask = pad_batch([vocab.encode(T)])
    E_s, _, _ = encoder(ids, mask)
    return ad.reshape(E_s, (-1,))


# ------------------------------------------------------------------ fusion + evaluator


class AttentiveFusion(Module):
    """E_f = E_n + softmax(Q(E_n) K(S)^T / sqrt(d)) V(S) over key/value slots S."""

    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.d_model
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self._d = d

    def __call__(self, E_n: Tensor, slots: Tensor, slot_mask: np.ndarray | None = None):
        single = E_n.ndim == 1
        if single:
            E_n = ad.reshape(E_n, (1, -1))
            slots = ad.reshape(slots, (1, -1, self._d)) if slots.ndim < 3 else slots
        B = E_n.shape[0]
        q = ad.reshape(self.q(E_n), (B, 1, self._d))
        scores = ad.scale(ad.matmul(q, ad.transpose(self.k(slots), (0, 2, 1))), 1.0 / math.sqrt(self._d))
        if slot_mask is not None:
            scores = scores + Tensor(np.where(np.asarray(slot_mask)[:, None, :], 0.0, NEG_INF))
        weights = ad.softmax(scores, axis=-1)
        context = ad.reshape(ad.matmul(weights, self.v(slots)), (B, self._d))
        E_f = E_n + context
        if single:
            return ad.reshape(E_f, (-1,)), weights.data.reshape(-1)
        return E_f, weights.data.reshape(B, -1)


def attentive_fuse(fusion: AttentiveFusion, E_n: Tensor, E_s: Tensor, slot_mask=None):
    """Fuse a data embedding with equation key/value slots; returns (E_f, weights)."""
    return fusion(E_n, E_s, slot_mask)


class Evaluator(Module):
    """Two-layer perceptron d_model -> hidden -> 1 predicting fitness."""

    def __init__(self, rng, cfg: ModelConfig, activation: str | None = "tanh"):
        self.fc1 = Linear(rng, cfg.d_model, cfg.evaluator_hidden)
        self.fc2 = Linear(rng, cfg.evaluator_hidden, 1)
        self._act = activation

    def __call__(self, E_f: Tensor) -> Tensor:
        h = self.fc1(E_f)
        if self._act == "tanh":
            h = ad.tanh(h)
        elif self._act == "relu":
            h = ad.relu(h)
        out = self.fc2(h)
        return ad.reshape(out, out.shape[:-1]) if out.ndim > 1 else ad.reshape(out, ())


def evaluate_fitness_head(e: Evaluator, E_f: Tensor) -> Tensor:
    return e(E_f)


# ------------------------------------------------------------------ decoder


def _positional(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class Decoder(Module):
    """Causal transformer decoder cross-attending to memory slots built from E."""

    def __init__(self, rng, cfg: ModelConfig, vocab_size: int):
        d = cfg.d_model
        self.tok_emb = _param(rng, (vocab_size, d), 1.0 / math.sqrt(d))
        self.mem_proj = Linear(rng, d, cfg.n_memory * d)
        self.layers = [DecoderLayer(rng, cfg) for _ in range(cfg.n_decoder_layers)]
        self.ln_final = LayerNorm(d)
        self.out = Linear(rng, d, vocab_size)
        self._pos = _positional(cfg.L + 2, d)
        self._d = d
        self._n_mem = cfg.n_memory
        self._L = cfg.L

    def memory(self, E: Tensor) -> Tensor:
        if E.ndim == 1:
            E = ad.reshape(E, (1, -1))
        B = E.shape[0]
        return ad.reshape(self.mem_proj(E), (B, self._n_mem, self._d))

    def __call__(self, E: Tensor, ids: np.ndarray) -> Tensor:
        """Logits [B, T, V] for input ids [B, T] (which start with BOS)."""
        ids = np.asarray(ids, dtype=np.int64)
        B, T = ids.shape
        if T > self._L + 1:
            raise SequenceTooLong(f"decoder input of length {T} exceeds L+1={self._L + 1}")
        mem = self.memory(E)
        x = ad.embedding(self.tok_emb, ids) + Tensor(self._pos[:T])
        causal = np.triu(np.full((T, T), NEG_INF), k=1)
        for layer in self.layers:
            x = layer(x, mem, causal)
        return self.out(self.ln_final(x))


def decode_step(d: Decoder, vocab: Vocab, E_f: Tensor, prefix: TokenSeq) -> np.ndarray:
    """Next-token distribution given E_f and the already-decoded prefix."""
    if len(prefix) >= d._L:
        raise SequenceTooLong(f"prefix of length {len(prefix)} leaves no room under L={d._L}")
    ids = np.array([[vocab.bos] + vocab.encode(prefix)])
    with ad.no_grad():
        logits = d(E_f if isinstance(E_f, Tensor) else Tensor(E_f), ids).data[0, -1]
    p = np.exp(logits - logits.max())
    return p / p.sum()


@dataclass
class Generated:
    tokens: TokenSeq
    valid: bool
    reason: str = ""


def generate(
    d: Decoder,
    vocab: Vocab,
    E: Tensor | np.ndarray,
    mode: str = "greedy",
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
    max_len: int | None = None,
) -> list[Generated]:
    """Autoregressively decode one sequence per row of ``E`` until EOS or max_len.

    Outputs failing the prefix-validity scan are returned flagged, not raised.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    max_len = d._L if max_len is None else min(max_len, d._L)
    E = E if isinstance(E, Tensor) else Tensor(E)
    if E.ndim == 1:
        E = ad.reshape(E, (1, -1))
    B = E.shape[0]
    ids = np.full((B, 1), vocab.bos, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    # rows that can no longer become a valid prefix are stopped early
    dead = np.zeros(B, dtype=bool)
    delta = np.array([t.arity - 1 if t.kind is not Kind.SPECIAL else 0 for t in vocab.tokens])
    special = np.array([t.kind is Kind.SPECIAL for t in vocab.tokens])
    need = np.ones(B, dtype=np.int64)
    with ad.no_grad():
        E = Tensor(E.data)
        for step in range(max_len + 1):
            logits = d(E, ids).data[:, -1, :]
            if mode == "greedy":
                nxt = logits.argmax(axis=-1)
            else:
                z = logits / max(temperature, 1e-12)
                z = z - z.max(axis=-1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=-1, keepdims=True)
                u = rng.random(B)[:, None]
                nxt = np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), len(vocab) - 1)
            nxt = np.where(done, vocab.pad, nxt)
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
            live = ~done
            is_eos = nxt == vocab.eos
            bad = live & ~is_eos & ((need == 0) | special[nxt])
            need = np.where(live & ~is_eos, need + delta[nxt], need)
            bad |= live & ~is_eos & (need > max_len - step - 1)
            dead |= bad
            done |= (live & is_eos) | bad
            if done.all():
                break
    out = []
    for row, stopped in zip(ids[:, 1:], dead):
        row = list(row)
        if stopped:
            body = row[: row.index(vocab.pad)] if vocab.pad in row else row
            out.append(Generated(vocab.decode(body[:max_len]), False, "invalid prefix"))
            continue
        if vocab.eos in row:
            body = row[: row.index(vocab.eos)]
            ended = True
        else:
            body = row[:max_len]
            ended = False
        toks = vocab.decode(body)
        if not ended:
            out.append(Generated(toks, False, "no EOS within max_len"))
        elif not is_valid_prefix(toks):
            out.append(Generated(toks, False, "invalid prefix"))
        else:
            out.append(Generated(toks, True))
    return out


# ------------------------------------------------------------------ freezing


def freeze(params: dict[str, Tensor], policy: Sequence[str]) -> list[str]:
    """Mark every tensor whose name matches a pattern as non-trainable.

    Returns the frozen names.  Each pattern must match at least one tensor.
    """
    frozen = []
    for pattern in policy:
        hits = [n for n in params if fnmatch.fnmatchcase(n, pattern)]
        if not hits:
            raise PatternMatchesNothing(f"freeze pattern {pattern!r} matches no parameter")
        frozen.extend(hits)
    for name in frozen:
        params[name].trainable = False
        params[name].requires_grad = False
    return sorted(set(frozen))


def unfreeze_all(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.trainable = True
        p.requires_grad = True


def default_freeze_policy(cfg: ModelConfig) -> list[str]:
    """Data encoder plus every decoder tensor outside its last layer."""
    policy = ["data_encoder.*", "decoder.tok_emb", "decoder.mem_proj.*", "decoder.ln_final.*", "decoder.out.*"]
    policy += [f"decoder.layers.{i}.*" for i in range(cfg.n_decoder_layers - 1)]
    return policy


# ------------------------------------------------------------------ full model bundle


@dataclass
class EquationModel:
    """All components: the pretrained pair (data encoder, decoder) plus the
    equation encoder, fusion and evaluator added for fine-tuning."""

    config: ModelConfig
    vocab: Vocab
    data_encoder: DataEncoder
    decoder: Decoder
    eq_encoder: EquationEncoder
    fusion: AttentiveFusion
    evaluator: Evaluator
    metadata: dict = field(default_factory=dict)
    use_eq_encoder: bool = True

    @classmethod
    def initialize(cls, cfg: ModelConfig, rng: np.random.Generator) -> "EquationModel":
        vocab = Vocab(cfg.operator_set)
        V = len(vocab)
        return cls(
            config=cfg,
            vocab=vocab,
            data_encoder=DataEncoder(rng, cfg),
            decoder=Decoder(rng, cfg, V),
            eq_encoder=EquationEncoder(rng, cfg, V),
            fusion=AttentiveFusion(rng, cfg),
            evaluator=Evaluator(rng, cfg),
        )

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in ("data_encoder", "decoder", "eq_encoder", "fusion", "evaluator"):
            out.update(getattr(self, part).named_parameters(part + "."))
        return out

    def fused(self, E_n: Tensor, token_seqs: Sequence[TokenSeq]) -> tuple[Tensor, np.ndarray]:
        """Batch E_f for data embeddings [B,d] and their equations."""
        if not self.use_eq_encoder:
            return E_n, np.zeros((E_n.shape[0], 0))
        ids, mask = pad_batch([self.vocab.encode(t) for t in token_seqs])
        _, slots, slot_mask = self.eq_encoder(ids, mask)
        return self.fusion(E_n, slots, slot_mask)
