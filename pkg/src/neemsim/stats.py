"""Ensemble statistics with deterministic aggregation.

Reductions run over path-indexed arrays in a fixed pairwise order (numpy's
pairwise summation over the path axis), so worker completion order can
never change a reported digit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError, EstimationError


@dataclass
class MomentSeries:
    """Second-moment time series of one ensemble run.

    ``second_moments`` and ``standard_errors`` have shape ``(N+1, 2m)`` in
    stacked order (displacements then velocities); per-step series
    (acceptance ratio, wall-clock, effective sample size, invalid fraction)
    have length ``N``.
    """

    times: np.ndarray
    second_moments: np.ndarray
    standard_errors: np.ndarray
    ensemble_size: int
    acceptance_ratios: np.ndarray = field(default=None)
    step_seconds: np.ndarray = field(default=None)
    ess: np.ndarray = field(default=None)
    invalid_fraction: np.ndarray = field(default=None)

    def __post_init__(self):
        n_nodes = len(self.times)
        steps = n_nodes - 1
        if self.second_moments.shape[0] != n_nodes or self.standard_errors.shape[0] != n_nodes:
            raise ConfigurationError("moment series length must match node count")
        if (self.second_moments < 0).any() or (self.standard_errors < 0).any():
            raise ConfigurationError("second moments and standard errors must be >= 0")
        for name in ("acceptance_ratios", "step_seconds", "ess", "invalid_fraction"):
            v = getattr(self, name)
            if v is None:
                setattr(self, name, np.full(steps, np.nan))
            elif len(v) != steps:
                raise ConfigurationError(f"{name} must have length {steps}")

    @property
    def dof(self) -> int:
        return self.second_moments.shape[1] // 2

    def interleaved(self) -> np.ndarray:
        """Columns reordered per DOF as (x_j, v_j) pairs, the CSV layout."""
        m = self.dof
        order = [c for j in range(m) for c in (j, m + j)]
        return self.second_moments[:, order], self.standard_errors[:, order]


def second_moments(values: np.ndarray, valid: np.ndarray | None = None):
    """Mean of squares over valid paths plus its standard error.

    ``values`` is ``(paths, d)``; returns ``(moment, se)`` each ``(d,)``.
    The standard error is the sample standard deviation of the squares over
    sqrt(count).
    """
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if valid is not None:
        v = v[np.asarray(valid, dtype=bool)]
    count = v.shape[0]
    if count < 2:
        raise EstimationError(f"need >= 2 valid paths, got {count}")
    sq = v**2
    mean = np.sum(sq, axis=0) / count
    resid = sq - mean
    var = np.sum(resid**2, axis=0) / (count - 1)
    se = np.sqrt(var / count)
    return mean, se


def convergence_fit(dts, errors):
    """Least-squares line of log(error) against log(dt).

    Returns ``(slope, intercept)``; needs at least three positive points.
    """
    x = np.asarray(dts, dtype=float)
    y = np.asarray(errors, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ConfigurationError("dts and errors must be equal-length vectors")
    if len(x) < 3:
        raise ConfigurationError("need at least 3 grid sizes for an order fit")
    if (x <= 0).any() or (y <= 0).any():
        raise ConfigurationError("order fit requires positive step sizes and errors")
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope), float(intercept)
