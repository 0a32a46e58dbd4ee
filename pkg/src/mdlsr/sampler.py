"""Metropolis-Hastings sampling of expression trees targeting exp(-H(m)).

Three move families, each chosen with probability 1/3:

* node change: relabel one node among same-arity operations (internal) or
  among {variables, a fresh parameter slot} (leaf); label sets have equal
  size in both directions, so the Hastings ratio is 1.
* term addition/removal: with probability 1/2 wrap the root as
  (root op leaf) for a uniform binary op and leaf, with probability 1/2 undo
  such a wrap.
* block replacement: replace the subtree at a node by a uniform element of
  the block dictionary (every canonical tree of depth <= 2 over the
  vocabulary, counting nodes along a path: a leaf, or one operation over
  leaves).  The node is drawn uniformly among nodes whose subtree is itself
  a dictionary block, which keeps the reverse probability positive.

Chain states are canonical trees with pairwise-distinct parameter slots;
proposals never create shared slots or float constants, so forward and
backward probabilities are exact.  Oversize proposals become null proposals
and count as rejected steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .inference import (Dataset, DescriptionLength, FitCache, FitOptions,
                        description_length)
from .priors import PriorConfig
from .trees import COMMUTATIVE, ExprTree, OpVocabulary, canonicalize
from .util import split_seed


@dataclass(frozen=True)
class SamplerOptions:
    steps: int = 50_000
    thin: int = 100
    burn_in_fraction: float = 0.1
    max_nodes: int = 50
    temperatures: tuple[float, ...] = (1.0,)


@dataclass(frozen=True)
class MoveProposal:
    kind: str
    tree: ExprTree | None  # None marks a null proposal (always rejected)
    q_forward: float = 0.0
    q_backward: float = 0.0


@dataclass
class ChainState:
    tree: ExprTree
    dl: DescriptionLength
    best_tree: ExprTree
    best_dl: DescriptionLength
    step: int = 0
    accepted: int = 0
    temperature: float = 1.0


@dataclass(frozen=True)
class TraceEntry:
    step: int
    model: str
    total: float
    complexity: float
    k: int
    accepted: bool


@dataclass
class SampleTrace:
    entries: list[TraceEntry]
    mdl_tree: ExprTree
    mdl_dl: DescriptionLength
    acceptance_rate: float
    steps: int
    visits: dict[str, int] | None = None


class EnumerationError(ValueError):
    """Model space exceeds the configured bound."""


# ----------------------------------------------------------------------------
# Proposal context: vocabulary-derived tables built once per run
# ----------------------------------------------------------------------------

_BLOCK_MEMO: dict = {}


def _numbered_params(node, counter):
    """Give each generic param marker its own fresh slot, left to right."""
    if node[0] == "par":
        slot = counter[0]
        counter[0] += 1
        return ("par", slot)
    if node[0] == "op":
        return node[:2] + tuple(_numbered_params(c, counter) for c in node[2:])
    return node


_BLOCK_DEPTH = 1  # leaves plus one operation level (depth counts nodes on a path)


def block_dictionary(vocab: OpVocabulary, dim: int) -> tuple[ExprTree, ...]:
    """Elementary trees: every canonical leaf or single operation over leaves."""
    memo_key = (vocab.signature(), dim)
    cached = _BLOCK_MEMO.get(memo_key)
    if cached is not None:
        return cached
    leaves = [("par", -1)] + [("var", j) for j in range(1, dim + 1)]
    raw = list(leaves)
    for name, arity in vocab.entries:
        if arity == 1:
            raw.extend(("op", name, a) for a in leaves)
        else:
            raw.extend(("op", name, a, b) for a in leaves for b in leaves)
    seen: dict[str, ExprTree] = {}
    for node in raw:
        tree = canonicalize(ExprTree(_numbered_params(node, [0])))
        seen.setdefault(tree.key, tree)
    blocks = tuple(seen[k] for k in sorted(seen))
    _BLOCK_MEMO[memo_key] = blocks
    return blocks


class ProposalContext:
    """Pre-computed tables driving the three move families."""

    _MEMO_CAP = 300_000

    def __init__(self, vocab: OpVocabulary, dim: int, max_nodes: int = 50):
        self.vocab = vocab
        self.dim = dim
        self.max_nodes = max_nodes
        self.binary = vocab.binary
        self.unary = vocab.unary
        self.arity = vocab.arity
        self.blocks = block_dictionary(vocab, dim)
        self.block_index = {b.key: i for i, b in enumerate(self.blocks)}
        self._canon_memo: dict = {}

    def canonical(self, root) -> ExprTree:
        """Canonicalize a raw proposal, memoized (proposals repeat heavily)."""
        tree = self._canon_memo.get(root)
        if tree is None:
            tree = canonicalize(ExprTree(root))
            if len(self._canon_memo) < self._MEMO_CAP:
                self._canon_memo[root] = tree
        return tree


def _walk(node, path, out):
    out.append((path, node))
    if node[0] == "op":
        for i, child in enumerate(node[2:]):
            _walk(child, path + (i,), out)


def _annotate(root):
    """One pass collecting (path, node, size, depth) for every node."""
    entries = []

    def rec(node, path):
        if node[0] == "op":
            size, dep = 1, 0
            for i, child in enumerate(node[2:]):
                s, d = rec(child, path + (i,))
                size += s
                dep = max(dep, d)
            dep += 1
        else:
            size, dep = 1, 0
        entries.append((path, node, size, dep))
        return size, dep

    rec(root, ())
    return entries


def _replace(node, path, sub):
    if not path:
        return sub
    i = path[0]
    children = list(node[2:])
    children[i] = _replace(children[i], path[1:], sub)
    return node[:2] + tuple(children)


def _max_slot(node) -> int:
    if node[0] == "par":
        return node[1]
    if node[0] == "op":
        return max(_max_slot(c) for c in node[2:])
    return -1


def _removal_candidates(root) -> list[int]:
    """Child indices of the root whose removal undoes a term addition."""
    if root[0] != "op" or len(root) != 4:
        return []
    token = root[1]
    children = root[2:]
    if token in COMMUTATIVE:
        return [i for i, c in enumerate(children) if c[0] in ("var", "par")]
    return [1] if children[1][0] in ("var", "par") else []


def n_replaceable(root) -> int:
    """Nodes whose subtree is shallow enough to be a dictionary block."""
    return sum(1 for _, _, _, dep in _annotate(root) if dep <= _BLOCK_DEPTH)


def propose(tree: ExprTree, ctx: ProposalContext, rng: np.random.Generator) -> MoveProposal:
    """Draw one proposal; q values are exact per-path probabilities."""
    root = tree.root
    family = int(rng.integers(3))
    if family == 0:
        return _propose_node_change(tree, root, ctx, rng)
    if family == 1:
        return _propose_term(tree, root, ctx, rng)
    return _propose_block(tree, root, ctx, rng)


def _propose_node_change(tree, root, ctx, rng) -> MoveProposal:
    nodes: list = []
    _walk(root, (), nodes)
    pick = int(rng.integers(len(nodes)))
    path, node = nodes[pick]
    if node[0] == "op":
        arity = len(node) - 2
        pool = ctx.binary if arity == 2 else ctx.unary
        alts = [t for t in pool if t != node[1]]
        if not alts:
            return MoveProposal("node_change", None)
        new_node = ("op", alts[int(rng.integers(len(alts)))]) + node[2:]
    elif node[0] == "num":
        return MoveProposal("node_change", None)
    else:
        if node[0] == "var":
            labels = [("var", j) for j in range(1, ctx.dim + 1) if j != node[1]]
            labels.append(("par", _max_slot(root) + 1))
        else:
            labels = [("var", j) for j in range(1, ctx.dim + 1)]
        if not labels:
            return MoveProposal("node_change", None)
        new_node = labels[int(rng.integers(len(labels)))]
    proposed = ctx.canonical(_replace(root, path, new_node))
    n = len(nodes)
    q = (1.0 / 3.0) * (1.0 / n) * (1.0 / max(len(alts) if node[0] == "op" else len(labels), 1))
    return MoveProposal("node_change", proposed, q, q)


def _propose_term(tree, root, ctx, rng) -> MoveProposal:
    n_b = len(ctx.binary)
    if n_b == 0:
        return MoveProposal("term", None)
    n_leaf = ctx.dim + 1
    if int(rng.integers(2)) == 0:  # addition
        if tree.n_nodes + 2 > ctx.max_nodes:
            return MoveProposal("term_addition", None)
        op = ctx.binary[int(rng.integers(n_b))]
        pick = int(rng.integers(n_leaf))
        leaf = ("var", pick + 1) if pick < ctx.dim else ("par", _max_slot(root) + 1)
        proposed = ctx.canonical(("op", op, root, leaf))
        q_f = (1.0 / 6.0) / (n_b * n_leaf)
        q_b = (1.0 / 6.0) / max(len(_removal_candidates(proposed.root)), 1)
        return MoveProposal("term_addition", proposed, q_f, q_b)
    candidates = _removal_candidates(root)
    if not candidates:
        return MoveProposal("term_removal", None)
    idx = candidates[int(rng.integers(len(candidates)))]
    remaining = root[2 + (1 - idx)]
    proposed = ctx.canonical(remaining)
    q_f = (1.0 / 6.0) / len(candidates)
    q_b = (1.0 / 6.0) / (n_b * n_leaf)
    return MoveProposal("term_removal", proposed, q_f, q_b)


def _propose_block(tree, root, ctx, rng) -> MoveProposal:
    shallow = [(path, node, size) for path, node, size, dep in _annotate(root)
               if dep <= _BLOCK_DEPTH]
    path, node, size = shallow[int(rng.integers(len(shallow)))]
    block = ctx.blocks[int(rng.integers(len(ctx.blocks)))]
    new_size = tree.n_nodes - size + block.n_nodes
    if new_size > ctx.max_nodes:
        return MoveProposal("block_replacement", None)
    shift = _max_slot(root) + 1
    shifted = _shift_slots(block.root, shift)
    proposed = ctx.canonical(_replace(root, path, shifted))
    q_f = (1.0 / 3.0) / (len(shallow) * len(ctx.blocks))
    q_b = (1.0 / 3.0) / (n_replaceable(proposed.root) * len(ctx.blocks))
    return MoveProposal("block_replacement", proposed, q_f, q_b)


def _shift_slots(node, shift: int):
    if node[0] == "par":
        return ("par", node[1] + shift)
    if node[0] == "op":
        return node[:2] + tuple(_shift_slots(c, shift) for c in node[2:])
    return node


# ----------------------------------------------------------------------------
# Metropolis dynamics
# ----------------------------------------------------------------------------


def acceptance_probability(delta_h: float, q_forward: float, q_backward: float,
                           temperature: float = 1.0) -> float:
    """min{1, exp(-dH/T) * q(m'->m)/q(m->m')}; zero for an infinite dH."""
    if math.isinf(delta_h) and delta_h > 0:
        return 0.0
    log_alpha = -delta_h / temperature + math.log(q_backward) - math.log(q_forward)
    return math.exp(min(0.0, log_alpha))


def metropolis_step(state: ChainState, data: Dataset, prior: PriorConfig,
                    vocab: OpVocabulary, fit_opts: FitOptions,
                    ctx: ProposalContext, rng: np.random.Generator,
                    cache: FitCache) -> bool:
    """Advance one step in place; returns whether the proposal was accepted."""
    state.step += 1
    prop = propose(state.tree, ctx, rng)
    if prop.tree is None:
        return False
    dl = description_length(data, prop.tree, prior, vocab, fit_opts, cache)
    if not math.isfinite(dl.total):
        return False
    alpha = acceptance_probability(dl.total - state.dl.total, prop.q_forward,
                                   prop.q_backward, state.temperature)
    if rng.random() >= alpha:
        return False
    state.tree = prop.tree
    state.dl = dl
    state.accepted += 1
    if dl.total < state.best_dl.total:
        state.best_tree, state.best_dl = prop.tree, dl
    return True


def initial_state(data: Dataset, prior: PriorConfig, vocab: OpVocabulary,
                  fit_opts: FitOptions, cache: FitCache,
                  temperature: float = 1.0) -> ChainState:
    tree = canonicalize(ExprTree(("par", 0)))
    dl = description_length(data, tree, prior, vocab, fit_opts, cache)
    return ChainState(tree, dl, tree, dl, temperature=temperature)


def sample(data: Dataset, prior: PriorConfig, vocab: OpVocabulary,
           fit_opts: FitOptions, opts: SamplerOptions, seed: int,
           cache: FitCache | None = None, count_visits: bool = False) -> SampleTrace:
    """Run a chain of `opts.steps` Metropolis steps from the trivial model.

    Deterministic given (data, configuration, seed).  The thinned trace keeps
    every `thin`-th state from the burn-in onward; the returned MDL model is
    the lowest-H structure seen anywhere in the run.
    """
    if opts.steps < 1:
        raise ValueError("need at least one step")
    cache = cache if cache is not None else FitCache()
    ctx = ProposalContext(vocab, data.dim, opts.max_nodes)
    rng = np.random.default_rng(seed)
    state = initial_state(data, prior, vocab, fit_opts, cache)
    burn_in = int(opts.steps * opts.burn_in_fraction)
    entries: list[TraceEntry] = []
    visits: dict[str, int] | None = {} if count_visits else None

    def record(accepted: bool):
        entries.append(TraceEntry(state.step, state.tree.text, state.dl.total,
                                  state.dl.model_complexity, state.tree.k, accepted))

    if burn_in == 0:
        record(False)
    for step in range(1, opts.steps + 1):
        accepted = metropolis_step(state, data, prior, vocab, fit_opts, ctx, rng, cache)
        if step >= burn_in and step % opts.thin == 0:
            record(accepted)
        if visits is not None and step > burn_in:
            visits[state.tree.key] = visits.get(state.tree.key, 0) + 1
    return SampleTrace(entries, state.best_tree, state.best_dl,
                       state.accepted / opts.steps, opts.steps, visits)


def tempered_sample(data: Dataset, prior: PriorConfig, vocab: OpVocabulary,
                    fit_opts: FitOptions, opts: SamplerOptions, seed: int,
                    cache: FitCache | None = None) -> SampleTrace:
    """Parallel tempering; the unit-temperature chain is the output.

    One adjacent-pair swap is attempted per step with acceptance
    min{1, exp((1/T_i - 1/T_j)(H_i - H_j))}.  A single-temperature ladder is
    exactly the plain sampler.
    """
    temps = tuple(opts.temperatures)
    if not temps or temps[0] != 1.0 or list(temps) != sorted(temps):
        raise ValueError("temperatures must be sorted ascending and start at 1")
    if len(temps) == 1:
        return sample(data, prior, vocab, fit_opts, opts, seed, cache)
    cache = cache if cache is not None else FitCache()
    ctx = ProposalContext(vocab, data.dim, opts.max_nodes)
    rngs = [np.random.default_rng(split_seed(seed, "replica", i))
            for i in range(len(temps))]
    swap_rng = np.random.default_rng(split_seed(seed, "swap"))
    states = [initial_state(data, prior, vocab, fit_opts, cache, temperature=t)
              for t in temps]
    burn_in = int(opts.steps * opts.burn_in_fraction)
    entries: list[TraceEntry] = []
    cold = states[0]

    def record(accepted: bool):
        entries.append(TraceEntry(cold.step, cold.tree.text, cold.dl.total,
                                  cold.dl.model_complexity, cold.tree.k, accepted))

    if burn_in == 0:
        record(False)
    for step in range(1, opts.steps + 1):
        accepted_cold = False
        for state, rng in zip(states, rngs):
            accepted = metropolis_step(state, data, prior, vocab, fit_opts, ctx, rng, cache)
            if state is cold:
                accepted_cold = accepted
        i = int(swap_rng.integers(len(temps) - 1))
        log_p = (1.0 / temps[i] - 1.0 / temps[i + 1]) * (states[i].dl.total - states[i + 1].dl.total)
        if swap_rng.random() < math.exp(min(0.0, log_p)):
            a, b = states[i], states[i + 1]
            a.tree, b.tree = b.tree, a.tree
            a.dl, b.dl = b.dl, a.dl
            for s in (a, b):
                if s.dl.total < s.best_dl.total:
                    s.best_tree, s.best_dl = s.tree, s.dl
        if step >= burn_in and step % opts.thin == 0:
            record(accepted_cold)
    return SampleTrace(entries, cold.best_tree, cold.best_dl,
                       cold.accepted / opts.steps, opts.steps, None)


# ----------------------------------------------------------------------------
# Exhaustive enumeration (exactness oracle for bounded grammars)
# ----------------------------------------------------------------------------


def enumerate_canonical(vocab: OpVocabulary, dim: int, max_nodes: int,
                        cap: int = 100_000) -> list[ExprTree]:
    """All canonical trees with at most `max_nodes` nodes, distinct slots."""
    leaves = [("par", -1)] + [("var", j) for j in range(1, dim + 1)]
    by_size: dict[int, list] = {1: leaves}
    raw_budget = 50 * cap
    raw_count = len(leaves)
    for size in range(2, max_nodes + 1):
        bucket: list = []
        for name, arity in vocab.entries:
            if arity == 1:
                bucket.extend(("op", name, c) for c in by_size.get(size - 1, ()))
            else:
                for left_size in range(1, size - 1):
                    right_size = size - 1 - left_size
                    for a in by_size.get(left_size, ()):
                        for b in by_size.get(right_size, ()):
                            bucket.append(("op", name, a, b))
        raw_count += len(bucket)
        if raw_count > raw_budget:
            raise EnumerationError(
                f"raw model space exceeds {raw_budget}; tighten max_nodes or the vocabulary")
        by_size[size] = bucket
    seen: dict[str, ExprTree] = {}
    for bucket in by_size.values():
        for node in bucket:
            tree = canonicalize(ExprTree(_numbered_params(node, [0])))
            seen.setdefault(tree.key, tree)
            if len(seen) > cap:
                raise EnumerationError(
                    f"more than {cap} canonical models; tighten max_nodes or the vocabulary")
    return [seen[k] for k in sorted(seen)]


def enumerate_models(data: Dataset, prior: PriorConfig, vocab: OpVocabulary,
                     max_nodes: int, fit_opts: FitOptions = FitOptions(),
                     cache: FitCache | None = None, cap: int = 100_000,
                     dim: int | None = None) -> list[tuple[ExprTree, DescriptionLength]]:
    """Every canonical model in the bounded space with its H, sorted ascending."""
    cache = cache if cache is not None else FitCache()
    models = enumerate_canonical(vocab, dim if dim is not None else data.dim,
                                 max_nodes, cap)
    scored = [(m, description_length(data, m, prior, vocab, fit_opts, cache))
              for m in models]
    scored.sort(key=lambda pair: (pair[1].total, pair[0].key))
    return scored


def posterior_table(scored: list[tuple[ExprTree, DescriptionLength]]) -> list[float]:
    """Exact posterior exp(-H)/Z over an enumerated space (stable shift)."""
    finite = [dl.total for _, dl in scored if math.isfinite(dl.total)]
    if not finite:
        return [0.0] * len(scored)
    h_min = min(finite)
    weights = [math.exp(-(dl.total - h_min)) if math.isfinite(dl.total) else 0.0
               for _, dl in scored]
    z = sum(weights)
    return [w / z for w in weights]
