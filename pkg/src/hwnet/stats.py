"""Batch-means output analysis for long-run averages."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

MIN_BATCHES = 20


@dataclass(frozen=True)
class ErgodicEstimate:
    """Long-run time average with a batch-means confidence interval.

    Attributes
    ----------
    estimate : float
        Mean of the batch means (equals the post-burn-in time average).
    half_width : float
        Half-width of the ``level`` t-interval.
    num_batches : int
        Total batches over all replications.
    horizon, burn_in : float
    seeds : tuple
        ``(seed, replication)`` pairs that produced the batches.
    """

    estimate: float
    half_width: float
    num_batches: int
    horizon: float
    burn_in: float
    seeds: tuple = ()
    level: float = 0.95
    batch_means: tuple = field(default=(), repr=False)

    @property
    def ci(self):
        return (self.estimate - self.half_width, self.estimate + self.half_width)

    def to_dict(self):
        return {
            "estimate": self.estimate,
            "half_width": self.half_width,
            "ci_lo": self.ci[0],
            "ci_hi": self.ci[1],
            "num_batches": self.num_batches,
            "horizon": self.horizon,
            "burn_in": self.burn_in,
            "seeds": [list(s) for s in self.seeds],
            "level": self.level,
        }


def batch_means_estimate(batch_means, horizon, burn_in, seeds=(), level=0.95):
    """t-interval from (pooled) batch means.

    Raises
    ------
    ValueError
        With fewer than 20 batches.
    """
    bm = np.asarray(batch_means, dtype=float).ravel()
    if bm.size < MIN_BATCHES:
        raise ValueError(f"need at least {MIN_BATCHES} batches, got {bm.size}")
    mean = float(bm.mean())
    sd = float(bm.std(ddof=1))
    tq = float(sps.t.ppf(0.5 + level / 2, bm.size - 1))
    hw = tq * sd / np.sqrt(bm.size)
    return ErgodicEstimate(mean, float(hw), int(bm.size), float(horizon), float(burn_in),
                           tuple(seeds), level, tuple(bm.tolist()))


def _tie_round(v, digits=12):
    """Round to ``digits`` significant digits so float noise does not break ties."""
    v = np.asarray(v, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        mag = np.where(v != 0, np.floor(np.log10(np.abs(v))), 0.0)
    scale = 10.0 ** (digits - 1 - mag)
    return np.round(v * scale) / scale


def spearman(x, y):
    """Spearman rank correlation (nan when either input is constant).

    Values agreeing to 12 significant digits count as ties.
    """
    x = _tie_round(x)
    y = _tie_round(y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(sps.spearmanr(x, y).statistic)
