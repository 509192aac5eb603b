"""Job arrival models and the load-fluctuation statistic.

Grid job arrivals are burstier than a Poisson process; the overdispersed
model here is doubly stochastic: each bin's rate is resampled from a gamma
distribution, which multiplies the count variance without changing the mean.
With theta = k^2 - 1 and shape mu/theta the count variance is mu * k^2, so
the fluctuation ratio (observed std over the Poisson-expected sqrt(mean))
comes out at the dispersion parameter k exactly; k = 1 degenerates to plain
Poisson.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InsufficientData

POISSON = "poisson"
OVERDISPERSED = "overdispersed"

MIN_BINS = 30


@dataclass(frozen=True)
class ArrivalModel:
    kind: str
    rate: float  # arrivals per unit time
    duration: float
    dispersion: float = 1.0  # target fluctuation ratio k; used by OVERDISPERSED
    bin_width: float = 1.0

    def __post_init__(self):
        if self.kind not in (POISSON, OVERDISPERSED):
            raise ValueError(f"unknown arrival kind: {self.kind!r}")
        if self.rate <= 0:
            raise ValueError("rate must be > 0")
        if self.duration <= 0 or self.bin_width <= 0:
            raise ValueError("duration and bin_width must be > 0")
        if self.dispersion < 1.0:
            raise ValueError("dispersion k must be >= 1")

    @property
    def n_bins(self) -> int:
        return max(1, int(round(self.duration / self.bin_width)))


def _bin_rates(model: ArrivalModel, n_bins: int, rng: np.random.Generator) -> np.ndarray:
    mu = model.rate * model.bin_width
    if model.kind == POISSON or model.dispersion == 1.0:
        return np.full(n_bins, mu)
    theta = model.dispersion**2 - 1.0
    shape = mu / theta
    return rng.gamma(shape, theta, size=n_bins)


def sample_bin_counts(
    model: ArrivalModel, n_bins: int, rng: np.random.Generator
) -> np.ndarray:
    """Unconditional per-bin arrival counts (the series fluctuation_ratio eats)."""
    rates = _bin_rates(model, n_bins, rng)
    return rng.poisson(rates)


def arrival_times(model: ArrivalModel, n_jobs: int, rng: np.random.Generator) -> np.ndarray:
    """`n_jobs` sorted start times in [0, duration) shaped by the model.

    Conditioned on the total count, Poisson arrivals are uniform; the
    overdispersed model distributes the jobs over bins proportionally to the
    resampled bin rates, keeping the burstiness pattern at a fixed job count.
    """
    if n_jobs == 0:
        return np.empty(0)
    if model.kind == POISSON:
        return np.sort(rng.uniform(0.0, model.duration, size=n_jobs))
    n_bins = model.n_bins
    rates = _bin_rates(model, n_bins, rng)
    weights = rates / rates.sum() if rates.sum() > 0 else np.full(n_bins, 1.0 / n_bins)
    per_bin = rng.multinomial(n_jobs, weights)
    times = []
    for i, count in enumerate(per_bin):
        if count:
            lo = i * model.bin_width
            hi = min((i + 1) * model.bin_width, model.duration)
            times.append(rng.uniform(lo, hi, size=count))
    return np.sort(np.concatenate(times))


def fluctuation_ratio(series) -> float:
    """Observed standard deviation over the Poisson-expected sqrt(mean).

    1.0 for a Poisson load, 0 for a constant one, and the calibrated k for
    the overdispersed model. Needs at least 30 bins.
    """
    counts = np.asarray(series, dtype=float)
    if counts.ndim != 1 or len(counts) < MIN_BINS:
        raise InsufficientData(f"need >= {MIN_BINS} bins, got {counts.size}")
    mean = counts.mean()
    std = counts.std(ddof=1)
    if std == 0.0:
        return 0.0
    if mean <= 0:
        raise InsufficientData("series mean must be positive")
    return float(std / math.sqrt(mean))


def bin_counts(times, duration: float, bin_width: float) -> np.ndarray:
    """Histogram event times into fixed-width bins over [0, duration)."""
    n_bins = max(1, int(round(duration / bin_width)))
    edges = np.linspace(0.0, duration, n_bins + 1)
    counts, _ = np.histogram(np.asarray(times), bins=edges)
    return counts
