"""Learnability-transition experiments: planted models, trials, curves.

A trial plants a known model, generates train/test data at noise level
s_eps, samples the posterior, and asks whether any sampled model describes
the data better than the true structure.  The analytic transition noise is
the level where the best constant model's description length overtakes the
true model's, exactly and in its large-N approximation.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .inference import (Dataset, DataError, FitCache, FitOptions, Provenance,
                        description_length)
from .priors import PriorConfig, model_complexity
from .sampler import SamplerOptions, sample
from .trees import ExprTree, OpVocabulary, evaluate_batch
from .util import rng_from, split_seed

DEFAULT_TOL_GAP = 1e-6
NONFINITE_RESIDUAL = 1e6


@dataclass(frozen=True)
class PlantedModel:
    """A generating model: structure, true parameters, input domain box."""

    model_id: str
    tree: ExprTree
    theta: tuple[float, ...]
    domain: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.theta) != self.tree.k:
            raise ValueError(
                f"{self.model_id}: theta has {len(self.theta)} entries, tree has "
                f"{self.tree.k} slots")
        for lo, hi in self.domain:
            if not (hi > lo):
                raise ValueError(f"{self.model_id}: empty domain interval [{lo}, {hi}]")
        if self.tree.max_var > len(self.domain):
            raise ValueError(
                f"{self.model_id}: tree uses x{self.tree.max_var} but domain has "
                f"{len(self.domain)} dimensions")

    @property
    def dim(self) -> int:
        return len(self.domain)


@dataclass(frozen=True)
class Delta2Estimate:
    value: float
    stderr: float
    n_samples: int


@dataclass(frozen=True)
class TrialRecord:
    model_id: str
    n: int
    s_eps: float
    replica: int
    seed: int
    learnable: bool
    gap: float
    h_mdl: float
    h_true: float
    rmse: float
    rmse_over_s: float
    mdl_expr: str


@dataclass(frozen=True)
class TransitionInfo:
    model_id: str
    n: int
    delta2: float
    complexity_gap: float
    k_true: int
    s_cross_exact: float
    s_cross_approx: float


# ----------------------------------------------------------------------------
# Synthetic data
# ----------------------------------------------------------------------------


def _sample_inputs(rng, domain, n) -> np.ndarray:
    lows = np.array([lo for lo, _ in domain])
    highs = np.array([hi for _, hi in domain])
    return rng.uniform(lows, highs, size=(n, len(domain)))


def generate_dataset(planted: PlantedModel, n: int, s_eps: float, seed: int,
                     max_resample_rounds: int = 100) -> Dataset:
    """Inputs uniform on the domain box, y = m*(x, theta*) + Normal(0, s_eps^2).

    Points where the planted model evaluates non-finitely are redrawn a
    bounded number of times; a model that stays non-finite on the domain is
    an error.
    """
    if n < 1:
        raise DataError("need at least one observation")
    if s_eps < 0:
        raise DataError("noise level must be nonnegative")
    rng = rng_from(seed, "dataset")
    X = _sample_inputs(rng, planted.domain, n)
    values = evaluate_batch(planted.tree, planted.theta, X)
    for _ in range(max_resample_rounds):
        bad = ~np.isfinite(values)
        if not bad.any():
            break
        X[bad] = _sample_inputs(rng, planted.domain, int(bad.sum()))
        values = evaluate_batch(planted.tree, planted.theta, X)
    else:
        raise DataError(
            f"{planted.model_id}: model stays non-finite on the domain after "
            f"{max_resample_rounds} resampling rounds")
    noise = rng.normal(0.0, s_eps, size=n) if s_eps > 0 else np.zeros(n)
    prov = Provenance(planted.tree.text, planted.theta, s_eps, seed)
    return Dataset(X, values + noise, prov)


def estimate_delta2(planted: PlantedModel, n_mc: int = 200_000,
                    seed: int = 0) -> Delta2Estimate:
    """Monte Carlo variance of the planted model over the domain box.

    The optimal constant predictor is the mean, so this variance is the
    trivial model's reducible error.
    """
    if n_mc < 1000:
        raise ValueError("need at least 1000 Monte Carlo samples")
    rng = rng_from(seed, "delta2")
    X = _sample_inputs(rng, planted.domain, n_mc)
    values = evaluate_batch(planted.tree, planted.theta, X)
    if not np.isfinite(values).all():
        raise DataError(f"{planted.model_id}: non-finite values on the domain")
    centered = values - values.mean()
    m2 = float(np.mean(centered ** 2))
    m4 = float(np.mean(centered ** 4))
    stderr = math.sqrt(max(m4 - m2 * m2, 0.0) / n_mc)
    return Delta2Estimate(m2, stderr, n_mc)


# ----------------------------------------------------------------------------
# Analytic transition noise
# ----------------------------------------------------------------------------


def transition_noise_exact(delta2: float, complexity_gap: float, k_true: int,
                           n: int) -> float:
    """Closed-form transition noise; +inf when the true model is never beaten.

    s^2 = delta2 / (exp(complexity_gap)^(2/N) * N^((k*-1)/N) - 1)
    """
    if delta2 < 0:
        raise ValueError("delta2 must be nonnegative")
    if n < 2:
        raise ValueError("need N >= 2")
    exponent = 2.0 * complexity_gap / n + (k_true - 1) * math.log(n) / n
    denom = math.expm1(exponent)
    if denom <= 0:
        return math.inf
    return math.sqrt(delta2 / denom)


def transition_noise_approx(delta2: float, complexity_gap: float, k_true: int,
                            n: int) -> float:
    """Large-N approximation sqrt(delta2 * N / (2 gap + (k*-1) ln N))."""
    if delta2 < 0:
        raise ValueError("delta2 must be nonnegative")
    denom = 2.0 * complexity_gap + (k_true - 1) * math.log(n)
    if denom <= 0:
        raise ValueError("2*gap + (k-1) ln N must be positive")
    return math.sqrt(delta2 * n / denom)


def transition_info(planted: PlantedModel, n: int, prior: PriorConfig,
                    vocab: OpVocabulary, delta2: float) -> TransitionInfo:
    gap = model_complexity(planted.tree, prior, vocab)
    k = planted.tree.k
    exact = transition_noise_exact(delta2, gap, k, n)
    try:
        approx = transition_noise_approx(delta2, gap, k, n)
    except ValueError:
        approx = math.inf
    return TransitionInfo(planted.model_id, n, delta2, gap, k, exact, approx)


# ----------------------------------------------------------------------------
# Trials
# ----------------------------------------------------------------------------


def rmse(tree: ExprTree, theta, test: Dataset,
         nonfinite_residual: float = NONFINITE_RESIDUAL) -> float:
    """Out-of-sample root mean squared error; non-finite predictions are
    charged a large fixed residual instead of poisoning the mean."""
    pred = evaluate_batch(tree, theta, test.X)
    residuals = test.y - pred
    residuals = np.where(np.isfinite(residuals), residuals, nonfinite_residual)
    return float(np.sqrt(np.mean(residuals ** 2)))


def learnability_trial(planted: PlantedModel, n: int, s_eps: float, seed: int,
                       prior: PriorConfig, vocab: OpVocabulary,
                       fit_opts: FitOptions, sampler_opts: SamplerOptions,
                       replica: int = 0,
                       tol_gap: float = DEFAULT_TOL_GAP) -> TrialRecord:
    """One planted-recovery trial.

    The true structure's H is computed through the same cache the chain
    uses, so a chain that finds the true structure produces an exact tie.
    Learnable means no sampled model undercuts the true structure by more
    than tol_gap.
    """
    train = generate_dataset(planted, n, s_eps, split_seed(seed, "train"))
    test = generate_dataset(planted, n, s_eps, split_seed(seed, "test"))
    cache = FitCache()
    h_true = description_length(train, planted.tree, prior, vocab, fit_opts, cache)
    trace = sample(train, prior, vocab, fit_opts, sampler_opts,
                   split_seed(seed, "chain"), cache=cache)
    gap = trace.mdl_dl.total - h_true.total
    learnable = gap >= -tol_gap
    test_rmse = rmse(trace.mdl_tree, trace.mdl_dl.fit.theta, test)
    ratio = test_rmse / s_eps if s_eps > 0 else math.nan
    return TrialRecord(planted.model_id, n, s_eps, replica, seed, learnable,
                       gap, trace.mdl_dl.total, h_true.total, test_rmse, ratio,
                       trace.mdl_tree.text)


def _run_trial(args) -> TrialRecord:
    return learnability_trial(*args)


# ----------------------------------------------------------------------------
# Sweeps
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class CellStats:
    model_id: str
    n: int
    s_eps: float
    rho: float
    mean_rmse_over_s: float
    mean_h_mdl: float
    replicas: int


@dataclass
class SweepResult:
    trials: list[TrialRecord]
    anchors: dict[tuple[str, int], TransitionInfo]
    grids: dict[tuple[str, int], tuple[float, ...]]
    replicas: int

    def cells(self) -> list[CellStats]:
        grouped: dict[tuple[str, int, float], list[TrialRecord]] = {}
        for t in self.trials:
            grouped.setdefault((t.model_id, t.n, t.s_eps), []).append(t)
        out = []
        for (model_id, n, s_eps) in sorted(grouped):
            ts = grouped[(model_id, n, s_eps)]
            rho = sum(t.learnable for t in ts) / len(ts)
            mean_ratio = float(np.mean([t.rmse_over_s for t in ts]))
            mean_h = float(np.mean([t.h_mdl for t in ts]))
            out.append(CellStats(model_id, n, s_eps, rho, mean_ratio, mean_h, len(ts)))
        return out


def default_noise_grid(s_cross: float, points: int = 12,
                       span: tuple[float, float] = (1.0 / 30.0, 10.0)) -> tuple[float, ...]:
    """Log-spaced noise grid bracketing the analytic transition."""
    if not math.isfinite(s_cross) or s_cross <= 0:
        raise ValueError("need a finite positive transition noise for an automatic grid")
    return tuple(np.geomspace(span[0] * s_cross, span[1] * s_cross, points))


def learnability_curve(planted_models, n_list, replicas: int, master_seed: int,
                       prior: PriorConfig, vocab: OpVocabulary,
                       fit_opts: FitOptions, sampler_opts: SamplerOptions,
                       s_grid=None, grid_points: int = 12,
                       grid_span: tuple[float, float] = (1.0 / 30.0, 10.0),
                       n_mc: int = 200_000, jobs: int = 1,
                       tol_gap: float = DEFAULT_TOL_GAP) -> SweepResult:
    """Learnability rho(s_eps, N) over a noise grid, with split per-trial seeds.

    The grid is either explicit (one list shared by every model and N) or
    derived per (model, N) from the exact analytic transition.  Trials are
    independent work items; results merge deterministically by sort key.
    """
    if replicas < 1:
        raise ValueError("need at least one replica")
    if isinstance(planted_models, PlantedModel):
        planted_models = [planted_models]
    anchors: dict[tuple[str, int], TransitionInfo] = {}
    grids: dict[tuple[str, int], tuple[float, ...]] = {}
    work = []
    for planted in planted_models:
        delta2 = estimate_delta2(planted, n_mc,
                                 split_seed(master_seed, planted.model_id, "delta2")).value
        for n in n_list:
            info = transition_info(planted, n, prior, vocab, delta2)
            anchors[(planted.model_id, n)] = info
            if s_grid is not None:
                grid = tuple(float(s) for s in s_grid)
            else:
                grid = default_noise_grid(info.s_cross_exact, grid_points, grid_span)
            grids[(planted.model_id, n)] = grid
            for s_idx, s_eps in enumerate(grid):
                for replica in range(replicas):
                    seed = split_seed(master_seed, planted.model_id, n, s_idx, replica)
                    work.append((planted, n, s_eps, seed, prior, vocab, fit_opts,
                                 sampler_opts, replica, tol_gap))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trials = list(pool.map(_run_trial, work, chunksize=1))
    else:
        trials = [_run_trial(item) for item in work]
    trials.sort(key=lambda t: (t.model_id, t.n, t.s_eps, t.replica))
    return SweepResult(trials, anchors, grids, replicas)


def scaled_collapse(sweep: SweepResult) -> list[tuple[str, int, float, float]]:
    """(model_id, N, s_eps/s_cross, rho) rows for overlaying curves."""
    out = []
    for cell in sweep.cells():
        info = sweep.anchors[(cell.model_id, cell.n)]
        out.append((cell.model_id, cell.n, cell.s_eps / info.s_cross_exact, cell.rho))
    return out


def rho_crossing(sweep: SweepResult, model_id: str, n: int,
                 level: float = 0.5) -> float:
    """Noise where rho first crosses `level`, log-linear interpolation; nan if none."""
    cells = [c for c in sweep.cells() if c.model_id == model_id and c.n == n]
    cells.sort(key=lambda c: c.s_eps)
    for prev, cur in zip(cells, cells[1:]):
        if prev.rho >= level > cur.rho:
            if prev.rho == cur.rho:
                return prev.s_eps
            f = (prev.rho - level) / (prev.rho - cur.rho)
            return float(math.exp(math.log(prev.s_eps)
                                  + f * (math.log(cur.s_eps) - math.log(prev.s_eps))))
    return math.nan
