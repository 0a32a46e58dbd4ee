"""Expression trees over a configurable operation vocabulary.

A model is a tree whose internal nodes are vocabulary operations and whose
leaves are input variables ``x1..xd``, named parameter slots ``_c0.._c{k-1}``,
or frozen float literals.  Trees are immutable; nodes are plain tuples:

    ("op", token, child, ...)     operation, children match the arity
    ("var", j)                    1-based input variable
    ("par", s)                    0-based parameter slot (slots may be shared)
    ("num", v)                    frozen float constant (occupies no slot)

Domain violations during evaluation (log of a negative, division by zero,
overflow, ...) yield a non-finite float, never an exception.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

BINARY_TOKENS = ("+", "-", "*", "/", "**")
COMMUTATIVE = frozenset({"+", "*"})

_UNARY_FN = {
    "exp": math.exp,
    "log": math.log,
    "sin": math.sin,
    "cos": math.cos,
    "sqrt": math.sqrt,
    "abs": abs,
}

_UNARY_NP = {
    "exp": "np.exp",
    "log": "np.log",
    "sin": "np.sin",
    "cos": "np.cos",
    "sqrt": "np.sqrt",
    "abs": "np.abs",
}


class VocabularyError(ValueError):
    """Invalid operation vocabulary or prior/vocabulary mismatch."""


@dataclass(frozen=True)
class OpVocabulary:
    """Fixed set of (token, arity) operations available to models and samplers."""

    entries: tuple[tuple[str, int], ...]

    def __post_init__(self):
        seen = set()
        for name, arity in self.entries:
            if name in seen:
                raise VocabularyError(f"duplicate operation {name!r}")
            if arity not in (1, 2):
                raise VocabularyError(f"operation {name!r} has arity {arity}; must be 1 or 2")
            if arity == 1 and name not in _UNARY_FN:
                raise VocabularyError(f"unknown unary operation {name!r}")
            if arity == 2 and name not in BINARY_TOKENS:
                raise VocabularyError(f"unknown binary operation {name!r}")
            seen.add(name)

    @property
    def arity(self) -> dict[str, int]:
        return dict(self.entries)

    @property
    def binary(self) -> tuple[str, ...]:
        return tuple(name for name, a in self.entries if a == 2)

    @property
    def unary(self) -> tuple[str, ...]:
        return tuple(name for name, a in self.entries if a == 1)

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.entries)

    def signature(self) -> tuple:
        return self.entries


def default_vocabulary() -> OpVocabulary:
    """Binary {+, -, *, /, **} and unary {exp, log, sin, cos, sqrt, abs}."""
    entries = tuple((t, 2) for t in BINARY_TOKENS) + tuple(
        (t, 1) for t in ("exp", "log", "sin", "cos", "sqrt", "abs")
    )
    return OpVocabulary(entries)


# ----------------------------------------------------------------------------
# Node helpers
# ----------------------------------------------------------------------------


def node_count(node) -> int:
    if node[0] == "op":
        return 1 + sum(node_count(c) for c in node[2:])
    return 1


def depth(node) -> int:
    """Leaf depth 0; an operation is one deeper than its deepest child."""
    if node[0] == "op":
        return 1 + max(depth(c) for c in node[2:])
    return 0


def _collect_slots(node, out: list):
    tag = node[0]
    if tag == "par":
        out.append(node[1])
    elif tag == "op":
        for c in node[2:]:
            _collect_slots(c, out)


def _max_var(node) -> int:
    if node[0] == "var":
        return node[1]
    if node[0] == "op":
        return max(_max_var(c) for c in node[2:])
    return 0


def _count_ops(node, counts: dict):
    if node[0] == "op":
        counts[node[1]] = counts.get(node[1], 0) + 1
        for c in node[2:]:
            _count_ops(c, counts)


def _to_text(node) -> str:
    tag = node[0]
    if tag == "var":
        return f"x{node[1]}"
    if tag == "par":
        return f"_c{node[1]}"
    if tag == "num":
        return repr(node[1])
    token = node[1]
    if len(node) == 3:
        return f"{token}({_to_text(node[2])})"
    return f"({_to_text(node[2])} {token} {_to_text(node[3])})"


class TreeError(ValueError):
    """Structurally invalid tree (arity, slot numbering, variable index)."""


class ExprTree:
    """Immutable expression tree with lazily cached text, key and evaluator."""

    __slots__ = ("root", "_text", "_key", "_k", "_n_nodes", "_fn", "_nvars")

    def __init__(self, root):
        self.root = root
        self._text = None
        self._key = None
        self._k = None
        self._n_nodes = None
        self._fn = None
        self._nvars = None

    # -- derived properties ---------------------------------------------------

    @property
    def text(self) -> str:
        if self._text is None:
            self._text = _to_text(self.root)
        return self._text

    @property
    def key(self) -> str:
        if self._key is None:
            self._key = _to_text(_canonical_root(self.root))
        return self._key

    @property
    def k(self) -> int:
        """Number of distinct parameter slots."""
        if self._k is None:
            slots: list[int] = []
            _collect_slots(self.root, slots)
            self._k = len(set(slots))
        return self._k

    @property
    def n_nodes(self) -> int:
        if self._n_nodes is None:
            self._n_nodes = node_count(self.root)
        return self._n_nodes

    @property
    def max_var(self) -> int:
        if self._nvars is None:
            self._nvars = _max_var(self.root)
        return self._nvars

    @property
    def depth(self) -> int:
        return depth(self.root)

    def __repr__(self):
        return f"ExprTree({self.text!r})"

    def __eq__(self, other):
        return isinstance(other, ExprTree) and self.root == other.root

    def __hash__(self):
        return hash(self.root)

    def validate(self, dim: int | None = None, max_nodes: int | None = None):
        """Check slot numbering is gap-free and indices are in range."""
        slots: list[int] = []
        _collect_slots(self.root, slots)
        distinct = sorted(set(slots))
        if distinct != list(range(len(distinct))):
            raise TreeError(f"parameter slots {distinct} are not 0..k-1")
        if dim is not None and self.max_var > dim:
            raise TreeError(f"variable x{self.max_var} exceeds dimension {dim}")
        if max_nodes is not None and self.n_nodes > max_nodes:
            raise TreeError(f"{self.n_nodes} nodes exceeds maximum {max_nodes}")
        return self

    # -- evaluation -------------------------------------------------------------

    def compiled(self):
        """Vectorized evaluator f(columns, theta) -> ndarray, built once."""
        if self._fn is None:
            self._fn = _compile(self.root)
        return self._fn


def tree_from_text(text: str, vocab: OpVocabulary | None = None,
                   dim: int | None = None) -> ExprTree:
    """Parse expression text; see module grammar.  Raises ParseError."""
    return parse_text(text, vocab or default_vocabulary(), dim)


# ----------------------------------------------------------------------------
# Operations: count_ops / param_count / evaluate
# ----------------------------------------------------------------------------


def count_ops(tree: ExprTree, vocab: OpVocabulary) -> dict[str, int]:
    """Occurrences of every vocabulary operation; absent ops map to 0."""
    counts: dict[str, int] = {}
    _count_ops(tree.root, counts)
    out = {name: counts.pop(name, 0) for name in vocab.tokens}
    if counts:
        raise VocabularyError(f"tree uses operations outside the vocabulary: {sorted(counts)}")
    return out


def param_count(tree: ExprTree) -> int:
    return tree.k


def _eval_node(node, params, x) -> float:
    tag = node[0]
    if tag == "var":
        return float(x[node[1] - 1])
    if tag == "par":
        return float(params[node[1]])
    if tag == "num":
        return node[1]
    token = node[1]
    try:
        if len(node) == 3:
            return _UNARY_FN[token](_eval_node(node[2], params, x))
        a = _eval_node(node[2], params, x)
        b = _eval_node(node[3], params, x)
        if token == "+":
            return a + b
        if token == "-":
            return a - b
        if token == "*":
            return a * b
        if token == "/":
            return a / b
        r = a ** b
        return math.nan if isinstance(r, complex) else r
    except (ValueError, ZeroDivisionError):
        return math.nan
    except OverflowError:
        return math.inf


def evaluate(tree: ExprTree, params, x) -> float:
    """Evaluate at one point; any domain violation returns a non-finite float."""
    if len(params) != tree.k:
        raise TreeError(f"expected {tree.k} parameters, got {len(params)}")
    return _eval_node(tree.root, params, x)


def _expr_source(node) -> str:
    tag = node[0]
    if tag == "var":
        return f"X{node[1] - 1}"
    if tag == "par":
        return f"T{node[1]}"
    if tag == "num":
        return f"np.float64({node[1]!r})"
    token = node[1]
    if len(node) == 3:
        return f"{_UNARY_NP[token]}({_expr_source(node[2])})"
    return f"({_expr_source(node[2])} {token} {_expr_source(node[3])})"


def _compile(root):
    """Generate a numpy evaluator: f(columns, theta) -> array of len(columns[0])."""
    used_vars = sorted(set(_vars_in(root)))
    slots: list[int] = []
    _collect_slots(root, slots)
    used_slots = sorted(set(slots))
    lines = ["def _f(cols, theta):"]
    for j in used_vars:
        lines.append(f"    X{j - 1} = cols[{j - 1}]")
    for s in used_slots:
        lines.append(f"    T{s} = theta[{s}]")
    lines.append(f"    return {_expr_source(root)}")
    namespace = {"np": np}
    exec(compile("\n".join(lines), "<mdlsr-tree>", "exec"), namespace)
    return namespace["_f"]


def _vars_in(node):
    if node[0] == "var":
        yield node[1]
    elif node[0] == "op":
        for c in node[2:]:
            yield from _vars_in(c)


def evaluate_batch(tree: ExprTree, params, X: np.ndarray) -> np.ndarray:
    """Evaluate at the rows of X (N x d); non-finite entries mark violations."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise TreeError("X must be 2-dimensional (N x d)")
    if tree.max_var > X.shape[1]:
        raise TreeError(f"tree uses x{tree.max_var} but X has {X.shape[1]} columns")
    cols = tuple(np.ascontiguousarray(X[:, j]) for j in range(X.shape[1]))
    return evaluate_columns(tree, params, cols, X.shape[0])


def evaluate_columns(tree: ExprTree, params, cols, n: int) -> np.ndarray:
    theta = np.asarray(params, dtype=float)
    if theta.shape != (tree.k,):
        raise TreeError(f"expected {tree.k} parameters, got {theta.shape}")
    fn = tree.compiled()
    with np.errstate(all="ignore"):
        out = fn(cols, theta)
    if np.ndim(out) == 0:
        return np.full(n, float(out))
    return np.asarray(out, dtype=float)


# ----------------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------------


class ParseError(ValueError):
    """Malformed expression text; carries the offending position."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


_TOKEN_RE = re.compile(
    r"""\s*(?:
        (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
      | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
      | (?P<op>\*\*|[()+\-*/])
    )""",
    re.VERBOSE,
)

_VAR_RE = re.compile(r"x([1-9]\d*)\Z")
_PAR_RE = re.compile(r"_c(\d+)\Z")


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            raise ParseError(f"unexpected character {stripped[0]!r}", pos)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, tokens, vocab: OpVocabulary, dim: int | None):
        self.tokens = tokens
        self.i = 0
        self.unary = set(vocab.unary)
        self.binary = set(vocab.binary)
        self.dim = dim

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, symbol: str):
        kind, value, pos = self.advance()
        if kind != "op" or value != symbol:
            raise ParseError(f"expected {symbol!r}, found {value!r}", pos)

    def parse_expr(self):
        kind, value, pos = self.peek()
        if kind == "op" and value == "(":
            self.advance()
            left = self.parse_expr()
            okind, op, opos = self.advance()
            if okind != "op" or op not in BINARY_TOKENS:
                raise ParseError(f"expected a binary operator, found {op!r}", opos)
            if op not in self.binary:
                raise ParseError(f"unknown operation {op!r}", opos)
            right = self.parse_expr()
            self.expect_op(")")
            return ("op", op, left, right)
        if kind == "name":
            self.advance()
            if value in self.unary:
                self.expect_op("(")
                arg = self.parse_expr()
                self.expect_op(")")
                return ("op", value, arg)
            m = _VAR_RE.match(value)
            if m:
                j = int(m.group(1))
                if self.dim is not None and j > self.dim:
                    raise ParseError(f"variable x{j} exceeds dimension {self.dim}", pos)
                return ("var", j)
            m = _PAR_RE.match(value)
            if m:
                return ("par", int(m.group(1)))
            raise ParseError(f"unknown operation {value!r}", pos)
        if kind == "num":
            self.advance()
            return ("num", float(value))
        raise ParseError(f"expected an expression, found {value!r}" if value else "unexpected end of input", pos)


def parse_text(text: str, vocab: OpVocabulary, dim: int | None = None) -> ExprTree:
    """Parse fully parenthesized infix text into a validated ExprTree.

    Grammar:  expr := "(" expr binop expr ")" | unop "(" expr ")" | leaf
              leaf := "x" INT | "_c" INT | FLOAT
    Whitespace is insignificant; float literals are unsigned.
    """
    parser = _Parser(_tokenize(text), vocab, dim)
    root = parser.parse_expr()
    kind, value, pos = parser.peek()
    if kind != "end":
        raise ParseError(f"trailing input {value!r}", pos)
    tree = ExprTree(root)
    slots: list[int] = []
    _collect_slots(root, slots)
    distinct = sorted(set(slots))
    if distinct != list(range(len(distinct))):
        raise ParseError(f"parameter slots {distinct} are not contiguous from _c0", 0)
    return tree


def to_text(tree: ExprTree) -> str:
    return tree.text


# ----------------------------------------------------------------------------
# Canonicalization
# ----------------------------------------------------------------------------
#
# The canonical form reorders the arguments of commutative operations (+, *)
# and renumbers parameter slots in first-visit order, nothing else.  Commutative
# arguments are ordered by each subtree's own canonical text (computed bottom-up
# with subtree-local slot renumbering, so the order never depends on the
# incoming slot ids); pairs that are still tied (equal up to slot renaming but
# not identical) are resolved by trying both orders and keeping the
# lexicographically smallest full rendering.

_AMBIG_CAP = 14  # at most 2**14 candidate renderings


def _order(node, global_counts: dict):
    """Fix commutative argument order bottom-up.

    Returns (ordered_node, local_key, ambiguous_nodes).  local_key is the
    canonical text of the subtree under subtree-local slot renumbering, so
    ordering decisions never depend on incoming slot ids.  A commutative node
    whose children tie on local_key but are not identical stays in its given
    order and is reported as ambiguous when the choice can leak into the
    global rendering (slot sharing with the rest of the tree, or
    order-dependent local text); such choices are settled by enumeration.
    """
    tag = node[0]
    if tag == "par":
        return node, "_c0", []
    if tag != "op":
        return node, _to_text(node), []
    token = node[1]
    if len(node) == 3:
        child, key_c, amb = _order(node[2], global_counts)
        out = ("op", token, child)
        return out, f"{token}({key_c})", amb
    a, key_a, amb_a = _order(node[2], global_counts)
    b, key_b, amb_b = _order(node[3], global_counts)
    if token in COMMUTATIVE:
        if key_b < key_a:
            a, b = b, a
            key_a, key_b = key_b, key_a
            amb_a, amb_b = amb_b, amb_a
        elif key_a == key_b and a != b:
            out = ("op", token, a, b)
            local: list[int] = []
            _collect_slots(out, local)
            counts: dict[int, int] = {}
            for s in local:
                counts[s] = counts.get(s, 0) + 1
            entangled = any(global_counts[s] > c for s, c in counts.items())
            text_ab = _to_text(_renumber(out, {}))
            if entangled or text_ab != _to_text(_renumber(("op", token, b, a), {})):
                amb = amb_a + amb_b + [out]
                return out, _min_render(out, amb)[0], amb
            amb = amb_a + amb_b
            key = _min_render(out, amb)[0] if amb else text_ab
            return out, key, amb
    out = ("op", token, a, b)
    amb = amb_a + amb_b
    key = _min_render(out, amb)[0] if amb else _to_text(_renumber(out, {}))
    return out, key, amb


def _min_render(node, ambiguous: list):
    """Smallest rendering over the 2^m orderings of the ambiguous nodes."""
    ambiguous = ambiguous[:_AMBIG_CAP]
    best_text = None
    best_flips: dict = {}
    for mask in range(1 << len(ambiguous)):
        flips = {id(n): bool(mask >> i & 1) for i, n in enumerate(ambiguous)}
        text = _render_choice(node, flips)
        if best_text is None or text < best_text:
            best_text, best_flips = text, flips
    return best_text, best_flips


def _renumber(node, mapping: dict):
    tag = node[0]
    if tag == "par":
        slot = mapping.setdefault(node[1], len(mapping))
        return ("par", slot)
    if tag == "op":
        return node[:2] + tuple(_renumber(c, mapping) for c in node[2:])
    return node


def _render_choice(node, flips: dict) -> str:
    """Render with selected swaps applied, renumbering slots first-visit."""

    def build(n):
        if n[0] != "op":
            return n
        if len(n) == 3:
            return ("op", n[1], build(n[2]))
        a, b = n[2], n[3]
        if flips.get(id(n)):
            a, b = b, a
        return ("op", n[1], build(a), build(b))

    return _to_text(_renumber(build(node), {}))


def _canonical_root(root):
    slots: list[int] = []
    _collect_slots(root, slots)
    global_counts: dict[int, int] = {}
    for s in slots:
        global_counts[s] = global_counts.get(s, 0) + 1
    ordered, _, ambiguous = _order(root, global_counts)
    if not ambiguous:
        return _renumber(ordered, {})
    _, best_flips = _min_render(ordered, ambiguous)

    def build(n):
        if n[0] != "op":
            return n
        if len(n) == 3:
            return ("op", n[1], build(n[2]))
        a, b = n[2], n[3]
        if best_flips.get(id(n)):
            a, b = b, a
        return ("op", n[1], build(a), build(b))

    return _renumber(build(ordered), {})


def canonicalize(tree: ExprTree) -> ExprTree:
    """Canonical representative: commutative arguments ordered, slots renumbered."""
    out = ExprTree(_canonical_root(tree.root))
    out._key = out.text
    return out


def canonical_key(tree: ExprTree) -> str:
    """Deterministic key, invariant under slot renumbering and +/* argument order."""
    return tree.key


# ----------------------------------------------------------------------------
# Random trees (test corpora and exploratory tooling)
# ----------------------------------------------------------------------------


def random_tree(rng: np.random.Generator, vocab: OpVocabulary, dim: int,
                max_nodes: int = 12, p_constant: float = 0.05,
                allow_shared_slots: bool = True) -> ExprTree:
    """Grow a random valid tree within the node budget; slots may be shared."""
    state = {"next_slot": 0}

    def grow(budget: int):
        ops = [(name, a) for name, a in vocab.entries if a + 1 <= budget]
        if ops and rng.random() < 0.6:
            name, arity = ops[rng.integers(len(ops))]
            if arity == 1:
                return ("op", name, grow(budget - 1))
            left_budget = int(rng.integers(1, budget - 1))
            return ("op", name, grow(left_budget), grow(budget - 1 - left_budget))
        r = rng.random()
        if r < p_constant:
            return ("num", float(np.round(rng.uniform(0.5, 4.0), 3)))
        if r < 0.5 + p_constant:
            if allow_shared_slots:
                slot = int(rng.integers(state["next_slot"] + 1))
            else:
                slot = state["next_slot"]
            state["next_slot"] = max(state["next_slot"], slot + 1)
            return ("par", slot)
        return ("var", int(rng.integers(1, dim + 1)))

    root = _renumber(grow(max_nodes), {})
    return ExprTree(root)
