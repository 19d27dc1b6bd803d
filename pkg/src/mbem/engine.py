"""EM iteration machinery: batch, online/mini-batch, and truncated variants.

The mini-batch update follows the stochastic-approximation form

    s_r = s_{r-1} + gamma_r * (mean_i sbar(y_i; theta_{r-1}) - s_{r-1}),
    theta_r = theta_bar(s_r),

with batch size 1 recovering the online update and gamma = 1 with the full
data recovering one batch EM sweep.  The truncated variant tests the
candidate parameter against a growing family of compact regions; leaving the
current region triggers a reset to a projected statistic inside the base
region and grows the region index by one.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateComponentError,
    EmptyComponentError,
    EngineRunError,
    EstimationError,
    InvalidInputError,
    TruncationError,
)
from .families import (
    Gaussian,
    MixtureParams,
    SuffStats,
    family_of,
    mean_sbar,
    stats_from_params,
    theta_bar,
)


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LearningRate:
    """Robbins-Monro step-size schedule gamma_r = gamma0 * r**(-alpha).

    With gamma0 in (0, 1) and alpha in (1/2, 1] every step lies in (0, 1),
    sum gamma_r diverges, and sum gamma_r**2 converges.
    """

    gamma0: float
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.gamma0 < 1.0:
            raise InvalidInputError(f"gamma0 must lie in (0, 1), got {self.gamma0}")
        if not 0.5 < self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must lie in (1/2, 1], got {self.alpha}")

    def at(self, r: int) -> float:
        """Step size for iteration ``r`` (1-based)."""
        if r < 1:
            raise InvalidInputError(f"iteration index must be >= 1, got {r}")
        return self.gamma0 * float(r) ** (-self.alpha)


def schedule(lr: LearningRate, r: int) -> float:
    """Alias for :meth:`LearningRate.at`."""
    return lr.at(r)


#: Schedule used throughout the experiment protocols.
DEFAULT_LEARNING_RATE = LearningRate(gamma0=1.0 - 1e-10, alpha=0.6)


# ---------------------------------------------------------------------------
# truncation regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TruncationRegion:
    """Growing compact parameter region indexed by ``m``.

    For the normal family the region at index m keeps weights at or above
    1/(c1+m), mean coordinates inside [-(c2+m), c2+m], and covariance
    eigenvalues inside [1/(c3+m), c3+m].  Rate families use the weight floor
    and confine rates to [1/(c3+m), c3+m].
    """

    c1: float = 1000.0
    c2: float = 1000.0
    c3: float = 1000.0
    m: int = 0
    events: int = 0

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3) < 1.0:
            raise InvalidInputError("truncation constants must be >= 1")
        if self.m < 0:
            raise InvalidInputError("region index must be nonnegative")

    def grown(self) -> "TruncationRegion":
        """Region after one reset: index and event counter advance by one."""
        return replace(self, m=self.m + 1, events=self.events + 1)


def region_contains(theta: MixtureParams, region: TruncationRegion) -> bool:
    """Membership test of a parameter vector in the region at its current index."""
    m = float(region.m)
    if np.any(theta.weights < 1.0 / (region.c1 + m)):
        return False
    if theta.family_tag == "gaussian":
        bound = region.c2 + m
        lo, hi = 1.0 / (region.c3 + m), region.c3 + m
        for comp in theta.components:
            if np.any(np.abs(comp.mean) > bound):
                return False
            eigs = np.linalg.eigvalsh(comp.cov)
            if eigs[0] < lo or eigs[-1] > hi:
                return False
        return True
    rates = theta.rates()
    lo, hi = 1.0 / (region.c3 + m), region.c3 + m
    return bool(np.all(rates >= lo) and np.all(rates <= hi))


def _project_into_base_region(
    theta: MixtureParams, region: TruncationRegion, margin: float = 0.0
) -> MixtureParams:
    """Project a parameter vector into the base (m = 0) region.

    Weights are floored and rebalanced on the simplex, mean coordinates are
    clipped, and covariance eigenvalues (or rates) are clipped.  Parameters
    already inside the region are returned unchanged, bit for bit.  A small
    ``margin`` shrinks the target region slightly so that rebuilding the
    statistic cannot round the image back outside.
    """
    floor = (1.0 + margin) / region.c1
    w = theta.weights
    if np.any(w < floor):
        if theta.g * floor > 1.0:
            raise TruncationError("weight floor is infeasible for this component count")
        lifted = np.maximum(w, floor)
        surplus = lifted.sum() - 1.0
        slack = lifted - floor
        w = lifted - surplus * slack / slack.sum()
    hi_mean = region.c2 * (1.0 - margin)
    lo_eig, hi_eig = (1.0 + margin) / region.c3, region.c3 * (1.0 - margin)
    if theta.family_tag == "gaussian":
        comps = []
        for comp in theta.components:
            mean = comp.mean
            if np.any(np.abs(mean) > hi_mean):
                mean = np.clip(mean, -hi_mean, hi_mean)
            cov = comp.cov
            eigs = np.linalg.eigvalsh(cov)
            if eigs[0] < lo_eig or eigs[-1] > hi_eig:
                vals, vecs = np.linalg.eigh(cov)
                vals = np.clip(vals, lo_eig, hi_eig)
                rebuilt = (vecs * vals) @ vecs.T
                cov = (rebuilt + rebuilt.T) / 2.0
            comps.append(Gaussian(mean, cov))
        return MixtureParams(w, tuple(comps))
    rates = theta.rates()
    clipped = np.clip(rates, lo_eig, hi_eig)
    comps = tuple(
        type(theta.components[0])(r) if r != c.rate else c
        for r, c in zip(clipped, theta.components)
    )
    return MixtureParams(w, comps)


# ---------------------------------------------------------------------------
# engine state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmState:
    """Engine state after iteration ``r``.

    ``theta`` equals the M-step image of ``stats`` after every completed step;
    at r = 0 it is the supplied initializer.
    """

    stats: SuffStats
    theta: MixtureParams
    r: int = 0
    polyak: MixtureParams | None = None
    region: TruncationRegion | None = None


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def batch_em_step(data: np.ndarray, theta: MixtureParams) -> MixtureParams:
    """One full E+M sweep over ``data``."""
    return theta_bar(mean_sbar(data, theta), family_of(theta))


def init_suffstats(batch: np.ndarray, theta0: MixtureParams) -> SuffStats:
    """Initial statistic: the first mini-batch average of the E-step map at theta0."""
    return mean_sbar(batch, theta0)


def minibatch_step(state: EmState, batch: np.ndarray, gamma: float) -> EmState:
    """One untruncated stochastic-approximation step."""
    if not 0.0 < gamma <= 1.0:
        raise InvalidInputError(f"step size must lie in (0, 1], got {gamma}")
    stats = state.stats.blend(mean_sbar(batch, state.theta), gamma)
    theta = theta_bar(stats, family_of(state.theta))
    return replace(state, stats=stats, theta=theta, r=state.r + 1)


def truncated_minibatch_step(
    state: EmState,
    batch: np.ndarray,
    gamma: float,
    region: TruncationRegion,
    rng: np.random.Generator | None = None,
) -> EmState:
    """One truncated step: accept the candidate inside the current region, else reset.

    A candidate whose M-step image is undefined (empty component, degenerate
    covariance, nonpositive rate) counts as outside the region.  On reset the
    returned state carries the grown region with its event counter advanced.
    """
    if not 0.0 < gamma <= 1.0:
        raise InvalidInputError(f"step size must lie in (0, 1], got {gamma}")
    candidate = state.stats.blend(mean_sbar(batch, state.theta), gamma)
    try:
        theta = theta_bar(candidate, family_of(state.theta))
        inside = region_contains(theta, region)
    except (EmptyComponentError, DegenerateComponentError):
        inside = False
    if inside:
        return replace(state, stats=candidate, theta=theta, r=state.r + 1, region=region)
    stats = reset_stat(state, batch, region, rng)
    theta = theta_bar(stats, family_of(state.theta))
    return replace(state, stats=stats, theta=theta, r=state.r + 1, region=region.grown())


def reset_stat(
    state: EmState,
    batch: np.ndarray,
    region: TruncationRegion,
    rng: np.random.Generator | None = None,
) -> SuffStats:
    """Replacement statistic inside the base region after a truncation event.

    Builds the fresh-batch statistic at the last accepted parameters, maps it
    to parameter space (falling back to the last accepted parameters when the
    map is undefined), projects into the base region, and rebuilds the
    statistic from the projected parameters.  Deterministic given its inputs;
    ``rng`` is accepted for callers that thread the engine generator through.
    """
    try:
        anchor = theta_bar(mean_sbar(batch, state.theta), family_of(state.theta))
    except (EmptyComponentError, DegenerateComponentError):
        anchor = state.theta
    base = replace(region, m=0)
    # Rounding in the rebuild can land an eigenvalue a hair outside the
    # region; retry with a slightly shrunken target before giving up.
    for margin in (0.0, 1e-12, 1e-9, 1e-6):
        projected = _project_into_base_region(anchor, region, margin)
        stats = stats_from_params(projected)
        if region_contains(theta_bar(stats, family_of(projected)), base):
            return stats
    raise TruncationError("projection failed to land inside the base region")


# ---------------------------------------------------------------------------
# Polyak averaging
# ---------------------------------------------------------------------------

def polyak_update(theta_acc: MixtureParams | None, theta_new: MixtureParams, i: int) -> MixtureParams:
    """Running average of parameter iterates, element-wise per block.

    Uses the iterative form avg_i = ((i - 1) * avg_{i-1} + theta_i) / i, so no
    iterate history is stored.  At i = 1 the accumulator is the new iterate.
    """
    if i < 1:
        raise InvalidInputError(f"averaging index must be >= 1, got {i}")
    if i == 1:
        return theta_new
    prev = float(i - 1)
    inv = 1.0 / float(i)
    weights = (prev * theta_acc.weights + theta_new.weights) * inv
    if theta_new.family_tag == "gaussian":
        comps = tuple(
            Gaussian(
                (prev * a.mean + b.mean) * inv,
                (prev * a.cov + b.cov) * inv,
            )
            for a, b in zip(theta_acc.components, theta_new.components)
        )
    else:
        cls = type(theta_new.components[0])
        comps = tuple(
            cls((prev * a.rate + b.rate) * inv)
            for a, b in zip(theta_acc.components, theta_new.components)
        )
    return MixtureParams(weights, comps)


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """One algorithm run: variant, budget, schedule, truncation, seed."""

    algorithm: str = "minibatch"  # "batch" | "minibatch" | "truncated-minibatch"
    epochs: int = 10
    batch_size: int | None = None
    learning_rate: LearningRate = DEFAULT_LEARNING_RATE
    truncation: TruncationRegion = field(default_factory=TruncationRegion)
    polyak: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("batch", "minibatch", "truncated-minibatch"):
            raise InvalidInputError(f"unknown algorithm {self.algorithm!r}")
        if self.epochs < 1:
            raise InvalidInputError("epoch budget must be at least 1")
        if self.algorithm != "batch" and (self.batch_size is None or self.batch_size < 1):
            raise InvalidInputError("mini-batch algorithms need a positive batch size")


@dataclass
class RunRecord:
    """Everything one run produced; metric fields are filled by the harness."""

    final_theta: MixtureParams
    polyak_theta: MixtureParams | None
    trace: list
    polyak_trace: list
    iterations: int
    truncation_events: int
    wall_time: float
    cpu_time: float
    iterates: list | None = None
    loglik: float | None = None
    se: float | None = None
    ari: float | None = None


def run(
    data: np.ndarray,
    config: RunConfig,
    init: MixtureParams,
    rng: np.random.Generator | None = None,
    keep_iterates: bool = False,
) -> RunRecord:
    """Execute one configured run and record its trace.

    Mini-batch variants perform epochs * ceil(n / N) iterations drawn
    uniformly with replacement; the batch variant performs one sweep per
    epoch.  The trace is recorded at epoch boundaries.  Identical seed and
    config give a bit-identical record apart from the timing fields.
    """
    data = np.asarray(data, dtype=float)
    n = data.shape[0]
    if rng is None:
        rng = np.random.default_rng(config.seed)
    wall0, cpu0 = time.perf_counter(), time.process_time()

    if config.algorithm == "batch":
        theta, acc = init, None
        trace, polyak_trace, iterates = [], [], []
        for r in range(1, config.epochs + 1):
            try:
                theta = batch_em_step(data, theta)
            except EstimationError as exc:
                raise EngineRunError(r, str(exc)) from exc
            if config.polyak:
                acc = polyak_update(acc, theta, r)
            trace.append(theta)
            if config.polyak:
                polyak_trace.append(acc)
            if keep_iterates:
                iterates.append(theta)
        return RunRecord(
            final_theta=theta,
            polyak_theta=acc,
            trace=trace,
            polyak_trace=polyak_trace,
            iterations=config.epochs,
            truncation_events=0,
            wall_time=time.perf_counter() - wall0,
            cpu_time=time.process_time() - cpu0,
            iterates=iterates if keep_iterates else None,
        )

    batch_size = config.batch_size
    if batch_size > n:
        raise InvalidInputError(f"batch size {batch_size} exceeds data size {n}")
    per_epoch = math.ceil(n / batch_size)
    total = config.epochs * per_epoch
    truncated = config.algorithm == "truncated-minibatch"
    region = config.truncation if truncated else None

    first = data[rng.integers(0, n, size=batch_size)]
    try:
        stats0 = init_suffstats(first, init)
    except EstimationError as exc:
        raise EngineRunError(0, str(exc)) from exc
    state = EmState(stats=stats0, theta=init, r=0, region=region)
    acc = None
    trace, polyak_trace, iterates = [], [], []
    for r in range(1, total + 1):
        batch = data[rng.integers(0, n, size=batch_size)]
        gamma = config.learning_rate.at(r)
        try:
            if truncated:
                state = truncated_minibatch_step(state, batch, gamma, state.region, rng)
            else:
                state = minibatch_step(state, batch, gamma)
        except EstimationError as exc:
            raise EngineRunError(r, str(exc)) from exc
        if config.polyak:
            acc = polyak_update(acc, state.theta, r)
            state = replace(state, polyak=acc)
        if keep_iterates:
            iterates.append(state.theta)
        if r % per_epoch == 0:
            trace.append(state.theta)
            if config.polyak:
                polyak_trace.append(acc)
    return RunRecord(
        final_theta=state.theta,
        polyak_theta=acc,
        trace=trace,
        polyak_trace=polyak_trace,
        iterations=total,
        truncation_events=state.region.events if truncated else 0,
        wall_time=time.perf_counter() - wall0,
        cpu_time=time.process_time() - cpu0,
        iterates=iterates if keep_iterates else None,
    )
