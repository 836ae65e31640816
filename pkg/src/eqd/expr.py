"""Prefix-notation symbolic expressions.

Tokens are small immutable records; an expression tree is a :class:`Node`
whose children match the arity of its token.  The text format is a
whitespace-separated prefix sequence such as ``add x_0 mul 2.0 x_1``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, MalformedPrefix

MAX_VARS = 10
BOS, EOS, PAD = "<BOS>", "<EOS>", "<PAD>"
PLACEHOLDER = "C"
LITERAL_VALUES: tuple[float, ...] = tuple(float(v) for v in range(-5, 6)) + (-2.5, -0.5, 0.5, 2.5)


class Kind(enum.Enum):
    BINARY = "binary"
    UNARY = "unary"
    VARIABLE = "variable"
    CONSTANT = "constant"
    SPECIAL = "special"


@dataclass(frozen=True)
class Operator:
    name: str
    arity: int
    fn: Callable[..., np.ndarray]
    infix: str
    # returns a boolean mask of inputs outside the domain
    domain: Callable[..., np.ndarray] | None = None


def _never(*args):
    return np.zeros(np.shape(args[0]), dtype=bool)


OPERATORS: dict[str, Operator] = {}


def register_operator(op: Operator) -> None:
    """Add an operator to the active operator set (used by parsing and generation)."""
    if op.arity not in (1, 2):
        raise ValueError("operators must be unary or binary")
    OPERATORS[op.name] = op
    _token_from_text.cache_clear()


for _op in (
    Operator("add", 2, np.add, "({0} + {1})"),
    Operator("sub", 2, np.subtract, "({0} - {1})"),
    Operator("mul", 2, np.multiply, "({0} * {1})"),
    Operator("div", 2, np.divide, "({0} / {1})", lambda a, b: b == 0),
    Operator("pow2", 1, np.square, "({0}^2)"),
    Operator("sqrt", 1, np.sqrt, "sqrt({0})", lambda a: a < 0),
    Operator("sin", 1, np.sin, "sin({0})"),
    Operator("cos", 1, np.cos, "cos({0})"),
    Operator("exp", 1, np.exp, "exp({0})"),
    Operator("log", 1, np.log, "log({0})", lambda a: a <= 0),
    Operator("abs", 1, np.abs, "abs({0})"),
):
    OPERATORS[_op.name] = _op

DEFAULT_OPERATOR_SET: tuple[str, ...] = tuple(OPERATORS)


@dataclass(frozen=True)
class Token:
    kind: Kind
    symbol: str
    value: float | None = None

    @property
    def arity(self) -> int:
        if self.kind is Kind.BINARY:
            return 2
        if self.kind is Kind.UNARY:
            return 1
        return 0

    @property
    def var_index(self) -> int:
        if self.kind is not Kind.VARIABLE:
            raise ValueError(f"{self.symbol} is not a variable")
        return int(self.symbol[2:])

    @property
    def is_placeholder(self) -> bool:
        return self.kind is Kind.CONSTANT and self.value is None

    def __str__(self) -> str:
        return self.symbol

    @staticmethod
    def parse(text: str) -> "Token":
        return _token_from_text(text)

    @staticmethod
    def constant(value: float) -> "Token":
        value = float(value)
        if value == 0.0:
            value = 0.0  # drop negative zero so the literal prints as 0.0
        return Token(Kind.CONSTANT, repr(value), value)

    @staticmethod
    def variable(index: int) -> "Token":
        if not 0 <= index < MAX_VARS:
            raise ValueError(f"variable index {index} outside [0, {MAX_VARS - 1}]")
        return Token(Kind.VARIABLE, f"x_{index}")


@lru_cache(maxsize=4096)
def _token_from_text(text: str) -> Token:
    if text in (BOS, EOS, PAD):
        return Token(Kind.SPECIAL, text)
    if text == PLACEHOLDER:
        return Token(Kind.CONSTANT, PLACEHOLDER)
    op = OPERATORS.get(text)
    if op is not None:
        return Token(Kind.BINARY if op.arity == 2 else Kind.UNARY, text)
    if text.startswith("x_") and text[2:].isdigit():
        return Token.variable(int(text[2:]))
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"unknown token {text!r}") from None
    if not math.isfinite(value):
        raise ValueError(f"non-finite literal {text!r}")
    return Token.constant(value)


TokenSeq = list[Token]


def tokenize(text: str | Iterable[str | Token]) -> TokenSeq:
    """Turn prefix text (or a sequence of symbols) into tokens."""
    items = text.split() if isinstance(text, str) else text
    return [t if isinstance(t, Token) else Token.parse(t) for t in items]


def to_text(tokens: Iterable[Token]) -> str:
    return " ".join(t.symbol for t in tokens)


@dataclass(frozen=True)
class Node:
    token: Token
    children: tuple["Node", ...] = ()

    def __post_init__(self):
        if len(self.children) != self.token.arity:
            raise ValueError(
                f"{self.token.symbol} expects {self.token.arity} children, got {len(self.children)}"
            )

    def __str__(self) -> str:
        return render_infix(self)

    def walk(self):
        """Pre-order traversal."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


ExprTree = Node


def leaf(symbol: str | float | int) -> Node:
    if isinstance(symbol, (int, float)) and not isinstance(symbol, bool):
        return Node(Token.constant(symbol))
    return Node(Token.parse(symbol))


def op(name: str, *children: Node | str | float) -> Node:
    kids = tuple(c if isinstance(c, Node) else leaf(c) for c in children)
    return Node(Token.parse(name), kids)


# ---------------------------------------------------------------- validity / parsing


def is_valid_prefix(tokens: Sequence[Token]) -> bool:
    """Arity-counter scan: counter starts at 1, must hit 0 exactly at the last token."""
    if not tokens:
        return False
    need = 1
    for i, tok in enumerate(tokens):
        if tok.kind is Kind.SPECIAL:
            return False
        need += tok.arity - 1
        if need == 0:
            return i == len(tokens) - 1
    return False


def parse_prefix(tokens: Sequence[Token] | str) -> Node:
    if isinstance(tokens, str):
        tokens = tokenize(tokens)
    else:
        tokens = tokenize(tokens)
    if not tokens:
        raise MalformedPrefix("empty token sequence", 0)
    for i, tok in enumerate(tokens):
        if tok.kind is Kind.SPECIAL:
            raise MalformedPrefix(f"special token {tok.symbol} inside expression", i)

    # iterative build: a stack of (token, collected children)
    stack: list[tuple[Token, list[Node]]] = []
    root: Node | None = None
    for i, tok in enumerate(tokens):
        if root is not None:
            raise MalformedPrefix("leftover tokens after a complete expression", i)
        if tok.arity:
            stack.append((tok, []))
            continue
        node = Node(tok)
        while True:
            if not stack:
                root = node
                break
            parent, kids = stack[-1]
            kids.append(node)
            if len(kids) < parent.arity:
                break
            stack.pop()
            node = Node(parent, tuple(kids))
    if root is None:
        raise MalformedPrefix("unexpected end of input", len(tokens))
    return root


def serialize_prefix(tree: Node) -> TokenSeq:
    return [n.token for n in tree.walk()]


def complexity(tree: Node) -> int:
    return sum(1 for _ in tree.walk())


def depth(tree: Node) -> int:
    if not tree.children:
        return 1
    return 1 + max(depth(c) for c in tree.children)


def variables(tree: Node) -> set[int]:
    return {n.token.var_index for n in tree.walk() if n.token.kind is Kind.VARIABLE}


def constant_values(tree: Node) -> list[float | None]:
    """Constant leaves in pre-order; ``None`` marks a placeholder."""
    return [n.token.value for n in tree.walk() if n.token.kind is Kind.CONSTANT]


def with_constants(tree: Node, values: Sequence[float]) -> Node:
    """Return a copy of ``tree`` with its constant leaves (pre-order) replaced."""
    it = iter(values)

    def rebuild(node: Node) -> Node:
        if node.token.kind is Kind.CONSTANT:
            return Node(Token.constant(next(it)))
        if not node.children:
            return node
        return Node(node.token, tuple(rebuild(c) for c in node.children))

    out = rebuild(tree)
    if next(it, None) is not None:
        raise ValueError("more constant values than constant leaves")
    return out


# ---------------------------------------------------------------- evaluation


def evaluate_batch(
    tree: Node, X: np.ndarray, constants: Sequence[float] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate ``tree`` on every row of ``X``.

    Returns ``(values, flagged)`` where ``flagged[k]`` is True when row k hit a
    domain violation or a non-finite intermediate anywhere in the tree.
    Flagged rows hold NaN.  ``constants`` overrides constant leaves in pre-order
    (placeholders must be overridden, otherwise they evaluate as NaN).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    n = X.shape[0]
    const_iter = iter(constants) if constants is not None else None
    flagged = np.zeros(n, dtype=bool)

    def rec(node: Node) -> np.ndarray:
        nonlocal flagged
        tok = node.token
        if tok.kind is Kind.VARIABLE:
            idx = tok.var_index
            if idx >= X.shape[1]:
                raise IndexError(f"{tok.symbol} needs at least {idx + 1} features")
            return X[:, idx]
        if tok.kind is Kind.CONSTANT:
            v = next(const_iter) if const_iter is not None else tok.value
            return np.full(n, np.nan if v is None else float(v))
        operator = OPERATORS[tok.symbol]
        args = [rec(c) for c in node.children]
        with np.errstate(all="ignore"):
            out = operator.fn(*args)
            if operator.domain is not None:
                flagged = flagged | operator.domain(*args)
        flagged = flagged | ~np.isfinite(out)
        return out

    values = np.array(rec(tree), dtype=np.float64, copy=True)
    if const_iter is not None and next(const_iter, None) is not None:
        raise ValueError("more constant values than constant leaves")
    values[flagged] = np.nan
    return values, flagged


def evaluate(tree: Node, row: Sequence[float]) -> float:
    """Evaluate at a single feature vector; raises DomainError where undefined."""
    values, flagged = evaluate_batch(tree, np.asarray(row, dtype=np.float64)[None, :])
    if flagged[0]:
        raise DomainError(f"{render_infix(tree)} undefined at {list(row)}")
    return float(values[0])


# ---------------------------------------------------------------- rendering


def _fmt_constant(tok: Token) -> str:
    if tok.value is None:
        return PLACEHOLDER
    return f"{tok.value:.6g}"


def render_infix(tree: Node) -> str:
    tok = tree.token
    if tok.kind is Kind.VARIABLE:
        return tok.symbol
    if tok.kind is Kind.CONSTANT:
        return _fmt_constant(tok)
    return OPERATORS[tok.symbol].infix.format(*(render_infix(c) for c in tree.children))


# ---------------------------------------------------------------- random generation

DEFAULT_OPERATOR_WEIGHTS: dict[str, float] = {
    "add": 1.0,
    "sub": 0.5,
    "mul": 1.0,
    "div": 0.4,
    "pow2": 0.4,
    "sqrt": 0.2,
    "sin": 0.4,
    "cos": 0.3,
    "exp": 0.2,
    "log": 0.2,
    "abs": 0.1,
}


def random_expr(
    rng: np.random.Generator,
    max_depth: int,
    num_vars: int,
    operator_weights: dict[str, float] | None = None,
    leaf_prob: float = 0.25,
    const_prob: float = 0.2,
    literals: Sequence[float] = LITERAL_VALUES,
) -> Node:
    """Grow a random tree of depth <= max_depth over x_0..x_{num_vars-1}.

    Every internal position becomes a leaf with probability ``leaf_prob`` (and
    always at the depth limit).  Leaves are constants with probability
    ``const_prob``, otherwise a uniformly chosen variable.
    """
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    if not 1 <= num_vars <= MAX_VARS:
        raise ValueError(f"num_vars must be in [1, {MAX_VARS}]")
    weights = operator_weights or DEFAULT_OPERATOR_WEIGHTS
    names = [k for k, w in weights.items() if w > 0]
    p = np.array([weights[k] for k in names], dtype=np.float64)
    p /= p.sum()
    nonzero_literals = [v for v in literals if v != 0.0] or list(literals)

    def grow(d: int) -> Node:
        if d >= max_depth or rng.random() < leaf_prob:
            if rng.random() < const_prob:
                return Node(Token.constant(nonzero_literals[rng.integers(len(nonzero_literals))]))
            return Node(Token.variable(int(rng.integers(num_vars))))
        name = names[rng.choice(len(names), p=p)]
        tok = Token.parse(name)
        return Node(tok, tuple(grow(d + 1) for _ in range(tok.arity)))

    return grow(1)
