"""Parameter fitting, Gaussian likelihood, BIC, and description lengths.

The description length of a model m on data D decomposes as

    H(m) = (N/2) (ln 2 pi s_y^2 + 1)  +  ((k+1)/2) ln N  +  complexity(m)
           `--------- fit ---------'     `-- penalty --'     `- prior -'

with s_y^2 the maximum-likelihood noise variance RSS/N.  H equals
BIC/2 - ln p(m) up to the prior normalization constant, which cancels in all
comparisons.  Fits are cached by canonical key so a structure revisited by
the sampler is never refit and H is a pure function of (structure, data,
options).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .trees import ExprTree, OpVocabulary, evaluate_columns
from .priors import PriorConfig, model_complexity
from .util import rng_from

LN_2PI = math.log(2.0 * math.pi)


class DataError(ValueError):
    """Malformed observation data."""


@dataclass(frozen=True)
class Provenance:
    """How a synthetic dataset was generated (absent for user data)."""

    model_text: str | None = None
    theta: tuple[float, ...] | None = None
    s_eps: float | None = None
    seed: int | None = None


class Dataset:
    """N observations (x_i, y_i) with x_i in R^d."""

    __slots__ = ("X", "y", "provenance", "_cols")

    def __init__(self, X, y, provenance: Provenance | None = None):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DataError(f"inconsistent shapes X{X.shape}, y{y.shape}")
        if X.shape[0] < 1:
            raise DataError("need at least one observation")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise DataError("observations must be finite")
        self.X = X
        self.y = y
        self.provenance = provenance
        self._cols = tuple(np.ascontiguousarray(X[:, j]) for j in range(X.shape[1]))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def columns(self) -> tuple[np.ndarray, ...]:
        return self._cols


@dataclass(frozen=True)
class FitOptions:
    restarts: int = 4
    max_iters: int = 2000
    param_range: tuple[float, float] = (-10.0, 10.0)
    variance_floor: float = 1e-12
    seed: int = 0
    ftol_rel: float = 1e-9
    xtol_rel: float = 1e-8


@dataclass(frozen=True)
class FitResult:
    theta: tuple[float, ...]
    s_y2: float  # RSS / N exactly; +inf when nothing evaluated finitely
    rss: float
    converged: bool

    @property
    def k(self) -> int:
        return len(self.theta)


@dataclass(frozen=True)
class DescriptionLength:
    total: float
    fit_term: float
    param_penalty: float
    model_complexity: float
    fit: FitResult


# ----------------------------------------------------------------------------
# Nelder-Mead over the residual sum of squares
# ----------------------------------------------------------------------------


def nelder_mead(f, x0: np.ndarray, max_iters: int, ftol_rel: float,
                xtol_rel: float, abandon_above: float | None = None,
                abandon_after: int = 60) -> tuple[np.ndarray, float]:
    """Minimize f from x0; relative-tolerance termination, inf-tolerant.

    `abandon_above` cuts a restart short once it is clearly stuck far above
    an already-known optimum from an earlier start.
    """
    k = x0.size
    simplex = [np.array(x0, dtype=float)]
    values = [float(f(x0))]
    for i in range(k):
        step = 0.25 * abs(x0[i]) if x0[i] != 0.0 else 0.25
        for _ in range(20):  # back off offsets that evaluate non-finitely
            point = np.array(x0, dtype=float)
            point[i] += step
            value = float(f(point))
            if math.isfinite(value):
                break
            step *= 0.5
        simplex.append(point)
        values.append(value)
    vsum = np.sum(simplex, axis=0)

    for iteration in range(max_iters):
        ib = iw = 0
        fb = fw = values[0]
        second = -math.inf
        for j in range(1, k + 1):
            v = values[j]
            if v < fb:
                ib, fb = j, v
            if v >= fw:
                second = fw
                iw, fw = j, v
            elif v > second:
                second = v
        if math.isfinite(fb):
            if fw - fb <= ftol_rel * (abs(fb) + 1e-300):
                break
            if (abandon_above is not None and iteration >= abandon_after
                    and fb > abandon_above):
                break
            if iteration % 10 == 9:
                best = simplex[ib]
                spread = max(float(np.max(np.abs(p - best))) for p in simplex)
                if spread <= xtol_rel * (float(np.max(np.abs(best))) + 1e-12):
                    break
        worst = simplex[iw]
        centroid = (vsum - worst) / k
        reflected = 2.0 * centroid - worst
        f_r = f(reflected)
        if f_r < fb:
            expanded = 3.0 * centroid - 2.0 * worst
            f_e = f(expanded)
            new, f_new = (expanded, f_e) if f_e < f_r else (reflected, f_r)
        elif f_r < second:
            new, f_new = reflected, f_r
        else:
            if f_r < fw:
                contracted = 1.5 * centroid - 0.5 * worst
            else:
                contracted = 0.5 * (centroid + worst)
            f_c = f(contracted)
            if f_c < min(f_r, fw):
                new, f_new = contracted, f_c
            else:  # shrink toward the best vertex
                best = simplex[ib]
                for j in range(k + 1):
                    if j == ib:
                        continue
                    simplex[j] = 0.5 * (best + simplex[j])
                    values[j] = float(f(simplex[j]))
                vsum = np.sum(simplex, axis=0)
                continue
        vsum += new - worst
        simplex[iw] = new
        values[iw] = float(f_new)

    ib = min(range(k + 1), key=values.__getitem__)
    return simplex[ib].copy(), values[ib]


def _rss_function(tree: ExprTree, data: Dataset):
    """Residual sum of squares as a plain function of theta.

    Calls the compiled evaluator directly; callers run it inside one
    np.errstate(all="ignore") region instead of paying a context per call.
    """
    cols = data.columns
    y = data.y
    n = data.n
    fn = tree.compiled()

    def rss(theta) -> float:
        pred = fn(cols, theta)
        if np.ndim(pred) == 0:
            r = y - float(pred)
        else:
            r = y - pred
        value = float(r @ r)
        return value if math.isfinite(value) else math.inf

    return rss


def _linear_design(tree: ExprTree, data: Dataset, opts: FitOptions):
    """Detect models linear in theta; return (design matrix, offset) or None.

    pred(theta) = offset + design @ theta is verified at two random probe
    points (relative tolerance 1e-8); anything non-finite or nonlinear falls
    back to the Nelder-Mead path.
    """
    k = tree.k
    cols = data.columns
    n = data.n
    offset = evaluate_columns(tree, np.zeros(k), cols, n)
    if not np.isfinite(offset).all():
        return None
    design = np.empty((n, k))
    unit = np.zeros(k)
    for i in range(k):
        unit[i] = 1.0
        col = evaluate_columns(tree, unit, cols, n) - offset
        unit[i] = 0.0
        if not np.isfinite(col).all():
            return None
        design[:, i] = col
    rng = rng_from(opts.seed, "linear-probe", tree.key)
    for _ in range(2):
        theta = rng.uniform(-3.0, 3.0, size=k)
        direct = evaluate_columns(tree, theta, cols, n)
        if not np.isfinite(direct).all():
            return None
        model = offset + design @ theta
        scale = 1e-8 * (1.0 + float(np.max(np.abs(direct))))
        if not np.allclose(direct, model, rtol=1e-8, atol=scale):
            return None
    return design, offset


def _exact_paths(tree: ExprTree, data: Dataset, opts: FitOptions):
    """Closed-form fits: parameter-free trees and linear-in-theta models."""
    k = tree.k
    n = data.n
    rss = _rss_function(tree, data)
    if k == 0:
        value = rss(np.empty(0))
        ok = math.isfinite(value)
        return FitResult((), value / n if ok else math.inf,
                         value if ok else math.inf, ok)
    linear = _linear_design(tree, data, opts)
    if linear is not None:
        design, offset = linear
        theta, *_ = np.linalg.lstsq(design, data.y - offset, rcond=None)
        value = rss(theta)
        if math.isfinite(value):
            return FitResult(tuple(float(t) for t in theta), value / n, value, True)
    return None


def _starts(tree: ExprTree, k: int, opts: FitOptions, warm_start=None):
    anchor = np.ones(k)
    if warm_start is not None:
        warm = np.asarray(warm_start, dtype=float)
        if warm.shape == (k,) and np.isfinite(warm).all():
            anchor = warm
    rng = rng_from(opts.seed, "fit-starts", tree.key)
    lo, hi = opts.param_range
    return [anchor] + [rng.uniform(lo, hi, size=k) for _ in range(opts.restarts)]


def _multistart(rss, starts, max_iters: int, ftol_rel: float, xtol_rel: float,
                seed_best=None):
    best_theta, best_value = None, math.inf
    if seed_best is not None:
        best_theta, best_value = seed_best
    for start in starts:
        if not math.isfinite(rss(start)):
            continue
        abandon = 100.0 * best_value + 1e-12 if best_theta is not None else None
        theta, value = nelder_mead(rss, start, max_iters, ftol_rel, xtol_rel,
                                   abandon_above=abandon)
        if value < best_value:
            best_theta, best_value = theta, value
    return best_theta, best_value


def fit_params(tree: ExprTree, data: Dataset, opts: FitOptions = FitOptions(),
               warm_start=None) -> FitResult:
    """Least squares: exact solve for linear-in-theta models, otherwise
    multi-start Nelder-Mead.

    Starts: a deterministic anchor (ones, or the supplied warm start where
    slot counts align) plus `restarts` random starts drawn uniformly in
    `param_range` from a stream seeded by the tree's canonical key; the best
    residual sum of squares wins.  A model with no finitely evaluating start
    is reported unfittable (converged=False, s_y^2=+inf) rather than raising,
    so a sampler can simply reject it.
    """
    n = data.n
    with np.errstate(all="ignore"):
        exact = _exact_paths(tree, data, opts)
        if exact is not None:
            return exact
        rss = _rss_function(tree, data)
        starts = _starts(tree, tree.k, opts, warm_start)
        best_theta, best_value = _multistart(rss, starts, opts.max_iters,
                                             opts.ftol_rel, opts.xtol_rel)
    if best_theta is None:
        return FitResult(tuple([math.nan] * tree.k), math.inf, math.inf, False)
    return FitResult(tuple(float(t) for t in best_theta), best_value / n, best_value, True)


_REFINE_MARGIN_NATS = 3.0
_CHEAP_FTOL = 1e-5
_CHEAP_MAX_ITERS = 120


def _staged_fit(tree: ExprTree, data: Dataset, opts: FitOptions,
                rss_refine_bound: float) -> FitResult:
    """Budgeted fit for sampler proposals, deterministic per canonical key.

    A first pass with two starts and loose tolerance screens the model; only
    fits whose residual places the model within a few nats of beating the
    best constant model get the full multi-start budget.  Everything the
    chain can dwell on or record as its best beats the constant model, so
    the active set is always fully fit; barrier structures above it only
    ever see their (over-)estimated H through near-certain rejections.
    """
    n = data.n
    with np.errstate(all="ignore"):
        exact = _exact_paths(tree, data, opts)
        if exact is not None:
            return exact
        rss = _rss_function(tree, data)
        starts = _starts(tree, tree.k, opts)
        cheap_theta, cheap_value = _multistart(
            rss, starts[:2], min(_CHEAP_MAX_ITERS, opts.max_iters),
            max(_CHEAP_FTOL, opts.ftol_rel), max(1e-6, opts.xtol_rel))
        best_theta, best_value = cheap_theta, cheap_value
        if cheap_theta is not None and cheap_value <= rss_refine_bound:
            polish = [np.asarray(cheap_theta)] + starts[2:]
            best_theta, best_value = _multistart(
                rss, polish, opts.max_iters, opts.ftol_rel, opts.xtol_rel,
                seed_best=(cheap_theta, cheap_value))
    if best_theta is None:
        return FitResult(tuple([math.nan] * tree.k), math.inf, math.inf, False)
    return FitResult(tuple(float(t) for t in best_theta), best_value / n, best_value, True)


# ----------------------------------------------------------------------------
# Likelihood, BIC, description length
# ----------------------------------------------------------------------------


def log_likelihood(data: Dataset, tree: ExprTree, fit: FitResult,
                   opts: FitOptions = FitOptions()) -> float:
    """Gaussian log likelihood at the MLE plug-in: -(N/2)(ln 2 pi s_y^2 + 1)."""
    if not fit.converged or not math.isfinite(fit.s_y2):
        return -math.inf
    s2 = max(fit.s_y2, opts.variance_floor)
    return -0.5 * data.n * (LN_2PI + math.log(s2) + 1.0)


def bic(data: Dataset, tree: ExprTree, fit: FitResult,
        opts: FitOptions = FitOptions()) -> float:
    """-2 ln L at the MLE plus (k+1) ln N (the +1 counts the noise variance)."""
    return -2.0 * log_likelihood(data, tree, fit, opts) + (fit.k + 1) * math.log(data.n)


class FitCache:
    """Canonical-key-indexed memo of description lengths for one dataset."""

    __slots__ = ("entries", "_baseline")

    def __init__(self):
        self.entries: dict[str, DescriptionLength] = {}
        self._baseline: float | None = None

    def __len__(self):
        return len(self.entries)

    def get(self, key: str) -> DescriptionLength | None:
        return self.entries.get(key)

    def put(self, key: str, dl: "DescriptionLength"):
        self.entries[key] = dl

    def constant_model_h(self, data: Dataset, opts: FitOptions) -> float:
        """H of the best constant model, in closed form (mean and variance)."""
        if self._baseline is None:
            self._baseline = _constant_model_h(data, opts)
        return self._baseline


def _constant_model_h(data: Dataset, opts: FitOptions) -> float:
    s2 = max(float(np.var(data.y)), opts.variance_floor)
    return 0.5 * data.n * (LN_2PI + math.log(s2) + 1.0) + math.log(data.n)


def description_length(data: Dataset, tree: ExprTree, prior: PriorConfig,
                       vocab: OpVocabulary, opts: FitOptions = FitOptions(),
                       cache: FitCache | None = None) -> DescriptionLength:
    """Full description length of `tree` on `data`; +inf for unfittable models.

    Deterministic given (canonical key, data, prior, options): the fit's
    random starts are seeded from the key, so any tree differing only by slot
    renumbering or commutative argument order produces the identical result.
    """
    key = tree.key
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    complexity = model_complexity(tree, prior, vocab)
    n = data.n
    baseline = (cache.constant_model_h(data, opts) if cache is not None
                else _constant_model_h(data, opts))
    target = baseline + _REFINE_MARGIN_NATS \
        - 0.5 * (tree.k + 1) * math.log(n) - complexity
    exponent = 2.0 * target / n - LN_2PI - 1.0
    bound = math.inf if exponent > 700.0 else n * math.exp(exponent)
    fit = _staged_fit(tree, data, opts, bound)
    penalty = 0.5 * (fit.k + 1) * math.log(n)
    if fit.converged:
        s2 = max(fit.s_y2, opts.variance_floor)
        fit_term = 0.5 * n * (LN_2PI + math.log(s2) + 1.0)
        total = fit_term + penalty + complexity
    else:
        fit_term = math.inf
        total = math.inf
    dl = DescriptionLength(total, fit_term, penalty, complexity, fit)
    if cache is not None:
        cache.put(key, dl)
    return dl


# ----------------------------------------------------------------------------
# Analytic description lengths of the true and trivial models
# ----------------------------------------------------------------------------


def predicted_dl_true(n: int, k_true: int, complexity_true: float,
                      eps2: float) -> float:
    """Expected H of the true structure when the mean squared noise is eps2."""
    if eps2 <= 0:
        raise ValueError("mean squared noise must be positive")
    return 0.5 * n * (LN_2PI + math.log(eps2) + 1.0) \
        + 0.5 * (k_true + 1) * math.log(n) + complexity_true


def predicted_dl_trivial(n: int, eps2: float, delta2: float,
                         complexity_trivial: float = 0.0) -> float:
    """Expected H of the best constant model; delta2 is its reducible error."""
    total_var = eps2 + delta2
    if total_var <= 0:
        raise ValueError("eps2 + delta2 must be positive")
    return 0.5 * n * (LN_2PI + math.log(total_var) + 1.0) \
        + math.log(n) + complexity_trivial
