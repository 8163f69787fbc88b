"""Bayesian online change-point detection over positive interval sequences.

Observations are modelled in the log domain, ``z = log(x) - log(x_first)``,
as Gaussian with a fixed noise scale and an unknown per-segment mean. Each
segment's mean has a Normal prior centred on the first observation. The
posterior is kept over the run length ``r_t``, the number of earlier
observations that share a segment with ``x_t``. ``r_t == 0`` means ``x_t``
opens a new segment; index ``t`` is reported as a change point when the
filtered probability ``P(r_t = 0 | x_0..x_t)`` exceeds the threshold.

The change-point branch scores ``x_t`` under the prior predictive while each
growth branch scores it under its own run's predictive, so the change-point
mass measures how surprising ``x_t`` is for every segment seen so far.

The noise scale is fixed on purpose. Interval streams from training jobs are
spike trains (many short intra-step gaps, one long inter-step gap); a model
that learns its variance lets long runs absorb the spikes and goes blind
after a few hundred observations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np

DEFAULT_THRESHOLD = 0.95
DEFAULT_HAZARD = 1.0 / 50.0
DEFAULT_MAX_RUN = 4096
# log-domain scales: 0.5 tolerates ~4x wobble inside a segment, flags ~9x jumps
DEFAULT_NOISE_SCALE = 0.5
DEFAULT_PRIOR_SCALE = 10.0
# run lengths at the tail whose probability fell below 1e-300 are dropped;
# that mass is below double resolution of anything reported
DEFAULT_PRUNE_LOG_FLOOR = math.log(1e-300)

_LOG_2PI = math.log(2.0 * math.pi)


class IntervalError(ValueError):
    """Raised for non-positive or non-finite intervals."""


@dataclass(frozen=True)
class Segmentation:
    """Change points over a sequence of length ``n`` and the segments they induce."""

    n: int
    change_points: Tuple[int, ...] = ()

    def __post_init__(self):
        prev = 0
        for cp in self.change_points:
            if not prev < cp < self.n:
                raise ValueError(f"change point {cp} out of order or outside (0, {self.n})")
            prev = cp

    @property
    def segments(self) -> List[Tuple[int, int]]:
        if self.n == 0:
            return []
        bounds = [0, *self.change_points, self.n]
        return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]

    def __len__(self) -> int:
        return len(self.segments)


@dataclass
class RunLengthState:
    """Mutable detector state; one owner per sequence.

    ``log_post[r]`` is the log posterior of run length ``r`` after the latest
    observation. ``mean[r]`` and ``prec[r]`` are the Normal posterior of that
    run's level, including the latest observation.
    """

    hazard: float = DEFAULT_HAZARD
    threshold: float = DEFAULT_THRESHOLD
    max_run: int = DEFAULT_MAX_RUN
    noise_scale: float = DEFAULT_NOISE_SCALE
    prior_scale: float = DEFAULT_PRIOR_SCALE
    prune_log_floor: Optional[float] = DEFAULT_PRUNE_LOG_FLOOR
    t: int = 0
    origin: Optional[float] = None
    log_post: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    prec: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not 0.0 < self.hazard < 1.0:
            raise ValueError(f"hazard must be in (0, 1), got {self.hazard}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.max_run < 2:
            raise ValueError("max_run must be >= 2")
        if self.noise_scale <= 0 or self.prior_scale <= 0:
            raise ValueError("noise_scale and prior_scale must be positive")
        self._log_h = math.log(self.hazard)
        self._log_1mh = math.log1p(-self.hazard)
        self._noise_var = self.noise_scale**2
        self._inv_noise_var = 1.0 / self._noise_var
        self._prior_prec = 1.0 / self.prior_scale**2

    @property
    def posterior(self) -> np.ndarray:
        return np.exp(self.log_post)

    @property
    def cp_probability(self) -> float:
        """P(r_t = 0) after the latest observation (0.0 before any)."""
        if self.t == 0:
            return 0.0
        return math.exp(self.log_post[0])

    def _absorb(self, mean, prec, z):
        prec_n = prec + 1.0 / self._noise_var
        mean_n = (mean * prec + z / self._noise_var) / prec_n
        return mean_n, prec_n

    def _log_predictive(self, z: float, mean: float, prec: float) -> float:
        var = self._noise_var + 1.0 / prec
        return -0.5 * (_LOG_2PI + math.log(var) + (z - mean) ** 2 / var)

    def update(self, interval: float) -> bool:
        """Absorb one interval; return True if it is flagged as a change point."""
        x = float(interval)
        if not (x > 0.0 and math.isfinite(x)):
            raise IntervalError(f"interval must be positive and finite, got {interval!r}")

        if self.t == 0:
            self.origin = math.log(x)
            self.log_post = np.zeros(1)
            self.mean, self.prec = self._absorb(np.zeros(1), np.full(1, self._prior_prec), 0.0)
            self.t = 1
            return False

        z = math.log(x) - self.origin
        grow = min(self.log_post.size, self.max_run - 1)
        mean, prec = self.mean[:grow], self.prec[:grow]

        joint = np.empty(grow + 1)
        joint[0] = self._log_h + self._log_predictive(z, 0.0, self._prior_prec)
        var = self._noise_var + 1.0 / prec
        dev = z - mean
        joint[1:] = self.log_post[:grow] + self._log_1mh - 0.5 * (_LOG_2PI + np.log(var) + dev * dev / var)

        prec_n = np.empty(grow + 1)
        mean_n = np.empty(grow + 1)
        prec_n[0] = self._prior_prec + self._inv_noise_var
        mean_n[0] = z * self._inv_noise_var / prec_n[0]
        np.add(prec, self._inv_noise_var, out=prec_n[1:])
        mean_n[1:] = (mean * prec + z * self._inv_noise_var) / prec_n[1:]

        peak = joint.max()
        log_post = joint - (peak + math.log(np.exp(joint - peak).sum()))
        if self.prune_log_floor is not None and log_post[-1] < self.prune_log_floor:
            keep = np.flatnonzero(log_post >= self.prune_log_floor)
            cut = int(keep[-1]) + 1
            log_post = log_post[:cut]
            log_post -= math.log(np.exp(log_post).sum())
            mean_n, prec_n = mean_n[:cut], prec_n[:cut]
        self.mean, self.prec = mean_n, prec_n
        self.log_post = log_post
        self.t += 1
        return self.cp_probability > self.threshold


def new_state(
    threshold: float = DEFAULT_THRESHOLD,
    hazard: float = DEFAULT_HAZARD,
    max_run: int = DEFAULT_MAX_RUN,
    noise_scale: float = DEFAULT_NOISE_SCALE,
    prune_log_floor: Optional[float] = DEFAULT_PRUNE_LOG_FLOOR,
) -> RunLengthState:
    return RunLengthState(
        hazard=hazard,
        threshold=threshold,
        max_run=max_run,
        noise_scale=noise_scale,
        prune_log_floor=prune_log_floor,
    )


def detect_streaming(state: RunLengthState, next_interval: float) -> Tuple[RunLengthState, bool]:
    """Advance ``state`` by one interval. The state is updated in place and returned."""
    return state, state.update(next_interval)


def detect(
    intervals: Iterable[float],
    threshold: float = DEFAULT_THRESHOLD,
    hazard: float = DEFAULT_HAZARD,
    max_run: int = DEFAULT_MAX_RUN,
    noise_scale: float = DEFAULT_NOISE_SCALE,
    prune_log_floor: Optional[float] = DEFAULT_PRUNE_LOG_FLOOR,
) -> Segmentation:
    """Segment ``intervals``; index i is a change point iff P(r_i = 0) > threshold."""
    values = [float(v) for v in intervals]
    if not values:
        raise IntervalError("intervals must be non-empty")
    for i, v in enumerate(values):
        if not (v > 0.0 and math.isfinite(v)):
            raise IntervalError(f"interval {i} must be positive and finite, got {v!r}")
    state = new_state(threshold, hazard, max_run, noise_scale, prune_log_floor)
    cps = tuple(i for i, v in enumerate(values) if state.update(v))
    return Segmentation(len(values), cps)
