"""Sequential balanced-allocation processes and their instrumentation.

Implements the family of rank-biased insertion processes (pure two-choice,
(1+beta)-choice, fully biased "wrong bin" insertion, and mixtures of these
for corrupted-update experiments), over unit or exponential ball weights,
together with the exponential potential instrumentation used to monitor
balance: phi = sum exp(a*y_j), psi = sum exp(-a*y_j), gamma = phi + psi,
where y_j are the mean-centered bin weights.

Everything here is single threaded and deterministic for a fixed seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.random import Generator

from .rng import IndexStream, PairStream, make_rng

# exp() overflows double precision just past 709; stay clear of it.
MAX_SAFE_EXPONENT = 700.0

PROB_SUM_TOL = 1e-12

TRAJECTORY_HEADER = "step,phi,psi,gamma,gap,max,min,mean"


class PotentialOverflowError(OverflowError):
    """A centered load is too large for exp() in double precision."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class LoadVector:
    """Bin weights with derived mean and centered values.

    Unit-weight processes keep integer weights, so after k insertions the
    total is exactly k with no floating error.
    """

    weights: list

    def __post_init__(self):
        if len(self.weights) == 0:
            raise ValueError("load vector needs at least one bin")

    @classmethod
    def zeros(cls, bins: int, unit: bool = True) -> "LoadVector":
        if bins < 1:
            raise ValueError("bins must be >= 1")
        return cls([0] * bins if unit else [0.0] * bins)

    @property
    def bins(self) -> int:
        return len(self.weights)

    @property
    def total(self):
        return sum(self.weights)

    @property
    def mean(self) -> float:
        return self.total / len(self.weights)

    def centered(self) -> list[float]:
        mu = self.mean
        return [w - mu for w in self.weights]

    def gap(self):
        return max(self.weights) - min(self.weights)

    def copy(self) -> "LoadVector":
        return LoadVector(list(self.weights))


@dataclass(frozen=True)
class PotentialParams:
    """Constants for the exponential potential.

    The exponent scale is derived, never set directly:
    exponent = min(exp_cutoff / 2, drift_margin / (6 * moment_bound)).

    drift_margin is deliberately an explicit knob: the drift analysis is
    quoted with both margin = two_choice_prob / 16 and / 12 in different
    places, so callers pick one rather than this module deciding.
    """

    drift_margin: float
    good_margin: float = 0.0
    two_choice_prob: float = 0.0
    exp_cutoff: float = 1.0
    moment_bound: float = 1.0
    drift_constant: float = 0.0

    def __post_init__(self):
        if self.drift_margin <= 0:
            raise ValueError("drift_margin must be positive")
        if self.moment_bound <= 0 or self.exp_cutoff <= 0:
            raise ValueError("moment_bound and exp_cutoff must be positive")

    @property
    def exponent(self) -> float:
        return min(self.exp_cutoff / 2.0, self.drift_margin / (6.0 * self.moment_bound))

    @classmethod
    def from_good_margin(cls, good_margin: float, moment_bound: float = 1.0) -> "PotentialParams":
        """Parameters coupled to a good-step margin g: margin g/6, two-choice 2g."""
        if good_margin <= 0:
            raise ValueError("good_margin must be positive")
        return cls(
            drift_margin=good_margin / 6.0,
            good_margin=good_margin,
            two_choice_prob=min(1.0, 2.0 * good_margin),
            moment_bound=moment_bound,
        )


@dataclass(frozen=True)
class PotentialSnapshot:
    """phi, psi, gamma and the load spread at one step."""

    step: int
    phi: float
    psi: float
    gamma: float
    gap: float
    max_load: float
    min_load: float
    mean_load: float


@dataclass(frozen=True)
class ProbabilityVector:
    """p[i] = probability of inserting into the i-th least-loaded bin."""

    probs: tuple

    def __post_init__(self):
        if len(self.probs) == 0:
            raise ValueError("empty probability vector")
        for p in self.probs:
            if p < -PROB_SUM_TOL or p > 1.0 + PROB_SUM_TOL:
                raise ValueError(f"probability out of range: {p}")
        total = math.fsum(self.probs)
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"probabilities sum to {total}, not 1")

    @property
    def bins(self) -> int:
        return len(self.probs)

    def prefix_sums(self) -> np.ndarray:
        return np.cumsum(np.asarray(self.probs, dtype=np.float64))

    def cdf(self) -> np.ndarray:
        c = self.prefix_sums()
        c[-1] = 1.0
        return c


@dataclass(frozen=True)
class WeightDistribution:
    """Ball weight per insertion: constant 1 or exponential with given mean.

    The exponential mean is the single normalization knob; the default of
    1.0 makes unit and exponential runs directly comparable.
    """

    kind: str
    mean: float = 1.0

    UNIT = "unit"
    EXPONENTIAL = "exponential"

    def __post_init__(self):
        if self.kind not in (self.UNIT, self.EXPONENTIAL):
            raise ValueError(f"unknown weight kind: {self.kind!r}")
        if self.mean <= 0:
            raise ValueError("mean must be positive")

    @classmethod
    def unit(cls) -> "WeightDistribution":
        return cls(cls.UNIT)

    @classmethod
    def exponential(cls, mean: float = 1.0) -> "WeightDistribution":
        return cls(cls.EXPONENTIAL, mean)

    @property
    def is_unit(self) -> bool:
        return self.kind == self.UNIT

    @property
    def moment_bound(self) -> float:
        """Second-moment bound for the potential drift: 1 for unit, 8 otherwise."""
        return 1.0 if self.is_unit else 8.0

    def sample(self, rng: Generator):
        if self.is_unit:
            return 1
        return float(rng.exponential(self.mean))

    def sample_batch(self, rng: Generator, size: int) -> list:
        if self.is_unit:
            return [1] * size
        return rng.exponential(self.mean, size=size).tolist()


# ---------------------------------------------------------------------------
# probability vectors
# ---------------------------------------------------------------------------


def one_plus_beta_probabilities(bins: int, two_choice_prob: float) -> ProbabilityVector:
    """Rank probabilities of the (1+beta)-choice process.

    p_i = (1-b)/m + b * ((2/m) * (1 - (i-1)/m) - 1/m^2) for ranks i = 1..m,
    least loaded first. b=0 is uniform insertion, b=1 pure two-choice.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not 0.0 <= two_choice_prob <= 1.0:
        raise ValueError("two_choice_prob must lie in [0, 1]")
    m = bins
    b = two_choice_prob
    probs = tuple(
        (1.0 - b) / m + b * ((2.0 / m) * (1.0 - (i - 1) / m) - 1.0 / (m * m))
        for i in range(1, m + 1)
    )
    return ProbabilityVector(probs)


def bad_step_probabilities(bins: int) -> ProbabilityVector:
    """Worst-case rank probabilities, biased toward more loaded bins.

    p_i = (2i-1)/m^2: the mirror image of pure two-choice, used to model
    steps that deterministically pick the wrong bin of their pair.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    m = bins
    return ProbabilityVector(tuple((2 * i - 1) / (m * m) for i in range(1, m + 1)))


def good_step_probabilities(bins: int, correct_prob: float) -> ProbabilityVector:
    """Rank probabilities of a step that picks the lesser bin of a uniform
    pair with probability correct_prob and the greater one otherwise.

    p_i = 2r(m-i)/m^2 + 1/m^2 + 2(1-r)(i-1)/m^2 with r = correct_prob.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not 0.0 <= correct_prob <= 1.0:
        raise ValueError("correct_prob must lie in [0, 1]")
    m = bins
    r = correct_prob
    return ProbabilityVector(
        tuple(
            (2.0 * r * (m - i) + 1.0 + 2.0 * (1.0 - r) * (i - 1)) / (m * m)
            for i in range(1, m + 1)
        )
    )


def mixture(a: ProbabilityVector, b: ProbabilityVector, weight_on_a: float) -> ProbabilityVector:
    """Convex mixture of two rank vectors (corrupted-update processes)."""
    if a.bins != b.bins:
        raise ValueError("mixed vectors must have the same length")
    if not 0.0 <= weight_on_a <= 1.0:
        raise ValueError("weight_on_a must lie in [0, 1]")
    w = weight_on_a
    return ProbabilityVector(
        tuple(w * pa + (1.0 - w) * pb for pa, pb in zip(a.probs, b.probs))
    )


# ---------------------------------------------------------------------------
# potential
# ---------------------------------------------------------------------------


def potential(loads: LoadVector, params: PotentialParams, step: int = 0) -> PotentialSnapshot:
    """Fresh O(m) evaluation of phi, psi, gamma and the gap."""
    a = params.exponent
    mu = loads.mean
    phi = 0.0
    psi = 0.0
    for w in loads.weights:
        y = w - mu
        if abs(a * y) > MAX_SAFE_EXPONENT:
            raise PotentialOverflowError(
                f"exponent {a * y:.3g} exceeds safe range {MAX_SAFE_EXPONENT}"
            )
        phi += math.exp(a * y)
        psi += math.exp(-a * y)
    mx = max(loads.weights)
    mn = min(loads.weights)
    return PotentialSnapshot(
        step=step,
        phi=phi,
        psi=psi,
        gamma=phi + psi,
        gap=mx - mn,
        max_load=mx,
        min_load=mn,
        mean_load=mu,
    )


class LoadState:
    """Mutable bin state with O(1) gap tracking and incremental potentials.

    Weights only ever increase, so the maximum is tracked directly and the
    minimum by counting bins at the current minimum level (rescan when the
    level empties). Potential sums are kept relative to a sliding base so
    exponents never overflow on long runs.
    """

    __slots__ = (
        "weights", "bins", "unit", "total", "max_w", "min_w", "min_count",
        "exponent", "s_phi", "s_psi", "base", "updates",
    )

    def __init__(self, bins: int, params: PotentialParams, unit: bool = True):
        if bins < 1:
            raise ValueError("bins must be >= 1")
        self.bins = bins
        self.unit = unit
        self.weights = [0] * bins if unit else [0.0] * bins
        self.total = 0 if unit else 0.0
        self.max_w = 0
        self.min_w = 0
        self.min_count = bins
        self.exponent = params.exponent
        self.s_phi = float(bins)
        self.s_psi = float(bins)
        self.base = 0.0
        self.updates = 0

    def add(self, bin_idx: int, w) -> None:
        old = self.weights[bin_idx]
        new = old + w
        self.weights[bin_idx] = new
        self.total += w
        self.updates += 1
        a = self.exponent
        self.s_phi += math.exp(a * (new - self.base)) - math.exp(a * (old - self.base))
        self.s_psi += math.exp(-a * (new - self.base)) - math.exp(-a * (old - self.base))
        if new > self.max_w:
            self.max_w = new
        if old == self.min_w:
            self.min_count -= 1
            if self.min_count == 0:
                mn = min(self.weights)
                self.min_w = mn
                self.min_count = self.weights.count(mn)
        # Keep the base near the mean: both sums then stay O(bins), which
        # bounds the relative error of the incremental +/- updates. The
        # mean only grows, so one-sided checks suffice.
        if a * (self.total / self.bins - self.base) > 1.0:
            self._rebase()

    def _rebase(self) -> None:
        self.base = self.mean()
        a = self.exponent
        b = self.base
        self.s_phi = math.fsum(math.exp(a * (w - b)) for w in self.weights)
        self.s_psi = math.fsum(math.exp(-a * (w - b)) for w in self.weights)

    def mean(self) -> float:
        return self.total / self.bins

    def gap(self):
        return self.max_w - self.min_w

    def phi(self) -> float:
        return self.s_phi * math.exp(-self.exponent * (self.mean() - self.base))

    def psi(self) -> float:
        return self.s_psi * math.exp(self.exponent * (self.mean() - self.base))

    def load_vector(self) -> LoadVector:
        return LoadVector(list(self.weights))

    def snapshot_row(self, step: int) -> tuple:
        phi = self.phi()
        psi = self.psi()
        return (step, phi, psi, phi + psi, self.gap(), self.max_w, self.min_w, self.mean())


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Columnar sequence of potential snapshots."""

    steps: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    gamma: np.ndarray
    gap: np.ndarray
    max_load: np.ndarray
    min_load: np.ndarray
    mean_load: np.ndarray

    def __len__(self) -> int:
        return len(self.steps)

    def snapshot(self, i: int) -> PotentialSnapshot:
        return PotentialSnapshot(
            step=int(self.steps[i]),
            phi=float(self.phi[i]),
            psi=float(self.psi[i]),
            gamma=float(self.gamma[i]),
            gap=float(self.gap[i]),
            max_load=float(self.max_load[i]),
            min_load=float(self.min_load[i]),
            mean_load=float(self.mean_load[i]),
        )

    def write_csv(self, path, header_comments: Iterable[str] = ()) -> None:
        with open(path, "w", newline="") as f:
            for line in header_comments:
                f.write(f"# {line}\n")
            f.write(TRAJECTORY_HEADER + "\n")
            w = csv.writer(f)
            for k in range(len(self.steps)):
                w.writerow([
                    int(self.steps[k]), repr(float(self.phi[k])), repr(float(self.psi[k])),
                    repr(float(self.gamma[k])), repr(float(self.gap[k])),
                    repr(float(self.max_load[k])), repr(float(self.min_load[k])),
                    repr(float(self.mean_load[k])),
                ])


class TrajectoryBuilder:
    """Preallocated trajectory sink."""

    def __init__(self, capacity: int):
        self._steps = np.zeros(capacity, dtype=np.int64)
        self._cols = [np.zeros(capacity, dtype=np.float64) for _ in range(7)]
        self._n = 0

    def append(self, row: tuple) -> None:
        n = self._n
        self._steps[n] = row[0]
        cols = self._cols
        for c in range(7):
            cols[c][n] = row[c + 1]
        self._n = n + 1

    def build(self) -> Trajectory:
        n = self._n
        c = self._cols
        return Trajectory(
            steps=self._steps[:n],
            phi=c[0][:n], psi=c[1][:n], gamma=c[2][:n], gap=c[3][:n],
            max_load=c[4][:n], min_load=c[5][:n], mean_load=c[6][:n],
        )


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def _rank_order(weights: Sequence) -> list[int]:
    """Bin indices in increasing (weight, index) order: ties go to lower index."""
    return sorted(range(len(weights)), key=lambda b: (weights[b], b))


def step_sequential(
    loads: LoadVector,
    probs: ProbabilityVector,
    weight: WeightDistribution,
    rng: Generator,
) -> tuple[LoadVector, int]:
    """One insertion driven by a rank probability vector.

    Samples a rank from probs, maps it to a bin through the current
    (weight, index) order, and adds one weight sample to that bin. Returns
    the updated loads and the chosen bin. This is the general-purpose step
    for arbitrary rank vectors; the bulk runners below specialize it.
    """
    if probs.bins != loads.bins:
        raise ValueError("probability vector length must match bin count")
    order = _rank_order(loads.weights)
    cdf = probs.cdf()
    rank = int(np.searchsorted(cdf, rng.random(), side="right"))
    if rank >= loads.bins:
        rank = loads.bins - 1
    chosen = order[rank]
    updated = loads.copy()
    updated.weights[chosen] += weight.sample(rng)
    return updated, chosen


def default_params(two_choice_prob: float, weight: WeightDistribution) -> PotentialParams:
    """Instrumentation defaults for a (1+beta) run.

    Couples the margin to the process via good_margin = beta/2; a pure
    uniform run (beta = 0) has no good margin, so fall back to 1/2 there
    (the instrumentation still tracks gap and gamma, it just is not tuned).
    """
    g = two_choice_prob / 2.0 if two_choice_prob > 0 else 0.5
    return PotentialParams.from_good_margin(g, moment_bound=weight.moment_bound)


def run_sequential(
    bins: int,
    steps: int,
    two_choice_prob: float,
    weight: WeightDistribution | None = None,
    rng: Generator | int | None = None,
    snapshot_every: int = 1000,
    params: PotentialParams | None = None,
) -> tuple[Trajectory, LoadVector]:
    """Run the (1+beta)-choice process and record snapshots at a cadence.

    The two-choice branch draws its two bin indices directly (rather than a
    rank) so that a concurrency-free simulated run consumes randomness
    identically and produces the same trajectory step for step. Snapshots
    are taken every snapshot_every steps and always at the final step.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not 0.0 <= two_choice_prob <= 1.0:
        raise ValueError("two_choice_prob must lie in [0, 1]")
    if snapshot_every < 1:
        raise ValueError("snapshot_every must be >= 1")
    weight = weight or WeightDistribution.unit()
    if isinstance(rng, int):
        rng = make_rng(rng)
    elif rng is None:
        rng = make_rng(0)
    params = params or default_params(two_choice_prob, weight)

    state = LoadState(bins, params, unit=weight.is_unit)
    cap = steps // snapshot_every + 2
    traj = TrajectoryBuilder(cap)
    if steps == 0:
        return traj.build(), state.load_vector()

    idx_rng, w_rng = rng.spawn(2)
    weights = state.weights
    unit = weight.is_unit

    def ball(k: int):
        return 1 if unit else w_samples[k]

    if not unit:
        w_samples = weight.sample_batch(w_rng, steps)

    if two_choice_prob >= 1.0:
        pairs = PairStream(idx_rng, bins)
        for s in range(1, steps + 1):
            i, j = pairs.next_pair()
            if (weights[j], j) < (weights[i], i):
                i = j
            state.add(i, ball(s - 1))
            if s % snapshot_every == 0:
                traj.append(state.snapshot_row(s))
    elif two_choice_prob <= 0.0:
        singles = IndexStream(idx_rng, bins)
        for s in range(1, steps + 1):
            state.add(singles.next_index(), ball(s - 1))
            if s % snapshot_every == 0:
                traj.append(state.snapshot_row(s))
    else:
        b = two_choice_prob
        for s in range(1, steps + 1):
            if idx_rng.random() < b:
                i = int(idx_rng.integers(0, bins))
                j = int(idx_rng.integers(0, bins))
                if (weights[j], j) < (weights[i], i):
                    i = j
            else:
                i = int(idx_rng.integers(0, bins))
            state.add(i, ball(s - 1))
            if s % snapshot_every == 0:
                traj.append(state.snapshot_row(s))

    if steps % snapshot_every != 0:
        traj.append(state.snapshot_row(steps))
    return traj.build(), state.load_vector()
