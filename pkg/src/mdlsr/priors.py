"""Maximum-entropy prior over model structures.

The structural plausibility of a model depends only on its operation counts:

    complexity(m) = sum_o alpha_o * n_o(m) + beta_o * n_o(m)^2

which is the negative log prior up to an additive constant that cancels in
every comparison.  Operation-free trees (a constant, a bare variable) have
complexity 0 and are the a-priori most plausible "trivial" models.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .trees import ExprTree, OpVocabulary, VocabularyError, count_ops

DEFAULT_ALPHA = 3.0
DEFAULT_BETA = 0.1


class PriorError(ValueError):
    """Invalid prior hyperparameters or prior/vocabulary mismatch."""


@dataclass(frozen=True)
class PriorConfig:
    """Per-operation hyperparameters (alpha_o, beta_o), all >= 0, alpha+beta > 0."""

    ops: tuple[tuple[str, float, float], ...]

    def __post_init__(self):
        seen = set()
        for name, alpha, beta in self.ops:
            if name in seen:
                raise PriorError(f"duplicate prior entry for {name!r}")
            seen.add(name)
            if alpha < 0 or beta < 0:
                raise PriorError(f"negative hyperparameter for {name!r}: alpha={alpha}, beta={beta}")
            if alpha + beta <= 0:
                raise PriorError(
                    f"alpha + beta must be positive for {name!r} so trivial models "
                    "are strict prior maximizers"
                )
        object.__setattr__(self, "_table", {name: (a, b) for name, a, b in self.ops})

    def coefficients(self, op: str) -> tuple[float, float]:
        try:
            return self._table[op]
        except KeyError:
            raise PriorError(f"no prior entry for operation {op!r}") from None

    def covers(self, vocab: OpVocabulary):
        missing = [t for t in vocab.tokens if t not in self._table]
        if missing:
            raise PriorError(f"prior is missing operations {missing}")
        return self


def default_prior(vocab: OpVocabulary, alpha: float = DEFAULT_ALPHA,
                  beta: float = DEFAULT_BETA) -> PriorConfig:
    """Uniform hyperparameters for every vocabulary operation.

    These are shipped defaults, not fitted values: the corpus-fitted
    hyperparameters used elsewhere are not published, and the qualitative
    behavior does not depend on the particular choice.
    """
    return PriorConfig(tuple((name, alpha, beta) for name in vocab.tokens))


def load_prior(source, vocab: OpVocabulary) -> PriorConfig:
    """Load {"ops": {"+": {"alpha": ..., "beta": ...}, ...}} from a path or dict."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    elif isinstance(source, dict):
        raw = source
    else:
        raise PriorError(f"cannot load a prior from {type(source)!r}")
    if not isinstance(raw, dict) or not isinstance(raw.get("ops"), dict):
        raise PriorError('prior file must contain an "ops" table')
    entries = []
    for name, spec in raw["ops"].items():
        if not isinstance(spec, dict) or "alpha" not in spec or "beta" not in spec:
            raise PriorError(f"prior entry for {name!r} needs alpha and beta")
        entries.append((name, float(spec["alpha"]), float(spec["beta"])))
    cfg = PriorConfig(tuple(entries))
    cfg.covers(vocab)
    return cfg


def model_complexity(tree: ExprTree, cfg: PriorConfig, vocab: OpVocabulary) -> float:
    """Structural description length sum_o (alpha_o n_o + beta_o n_o^2), in nats.

    Zero exactly for operation-free trees; grows with every added operation.
    """
    try:
        counts = count_ops(tree, vocab)
    except VocabularyError as exc:
        raise PriorError(str(exc)) from exc
    total = 0.0
    for op, n in counts.items():
        if n:
            alpha, beta = cfg.coefficients(op)
            total += alpha * n + beta * n * n
    return total


def trivial_models(dim: int) -> list[ExprTree]:
    """The operation-free models: the constant and each bare variable."""
    if dim < 1:
        raise ValueError("dimension must be at least 1")
    out = [ExprTree(("par", 0))]
    out.extend(ExprTree(("var", j)) for j in range(1, dim + 1))
    return out
