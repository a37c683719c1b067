"""Model abstraction for second-order nonlinear oscillators.

A system with ``m`` degrees of freedom driven by ``n`` independent Brownian
channels is reduced to a first-order Ito SDE on the stacked state
``(x1, x2)`` where ``x1`` holds displacements and ``x2`` velocities::

    dx1 = x2 dt
    dx2 = (linear + nonlinear + forcing) dt + f(t, x) dB

The linear part lives in a constant ``2m x 2m`` matrix acting on the stacked
state; the nonlinear part, forcing and diffusion are closures.  Models also
carry the analytic first and second derivatives of the per-channel drift
shift ``gamma`` (see :mod:`neemsim.girsanov`) because those are evaluated
inside the rejection sampler's hot loop; numerical differentiation is used
only by the audit tests.

All state-dependent closures accept arrays of shape ``(..., m)`` and must
broadcast over leading axes, be pure (identical inputs give identical
outputs) and re-entrant: models are immutable after construction and are
shared freely across worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class SimulationError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SimulationError):
    """Invalid parameters, grids or run configuration."""


class NumericDomainError(SimulationError):
    """A model closure or integration step produced a non-finite value."""


class SingularShiftError(SimulationError):
    """The measure change is undefined: zero diffusion against a nonzero
    drift error on some channel."""


class EstimationError(SimulationError):
    """Not enough valid samples to form an estimate."""


class OracleError(SimulationError):
    """An independent reference computation failed to converge."""


class DegenerateEnsembleError(SimulationError):
    """Every path in the ensemble has been flagged invalid."""


@dataclass(frozen=True)
class PathState:
    """Displacement/velocity state of one path at one time node."""

    x1: np.ndarray
    x2: np.ndarray
    t: float

    def __post_init__(self):
        x1 = np.atleast_1d(np.asarray(self.x1, dtype=float))
        x2 = np.atleast_1d(np.asarray(self.x2, dtype=float))
        if x1.shape != x2.shape or x1.ndim != 1:
            raise ConfigurationError(
                f"state blocks must be equal-length vectors, got {x1.shape} and {x2.shape}"
            )
        if not (np.isfinite(x1).all() and np.isfinite(x2).all() and np.isfinite(self.t)):
            raise NumericDomainError(f"non-finite state at t={self.t}")
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)
        object.__setattr__(self, "t", float(self.t))

    @property
    def dof(self) -> int:
        return self.x1.shape[0]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.x1, self.x2])


@dataclass(frozen=True)
class TimeGrid:
    """Uniform macro grid with an interior sub-grid per macro step."""

    t0: float
    t_end: float
    macro_steps: int
    substeps_per_macro: int = 1

    def __post_init__(self):
        if not self.t_end > self.t0:
            raise ConfigurationError(f"t_end={self.t_end} must exceed t0={self.t0}")
        if self.macro_steps < 1 or self.substeps_per_macro < 1:
            raise ConfigurationError("macro_steps and substeps_per_macro must be >= 1")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t0) / self.macro_steps

    @property
    def dt_sub(self) -> float:
        return self.dt / self.substeps_per_macro

    def macro_times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.macro_steps + 1)


@dataclass(frozen=True)
class GammaDerivatives:
    """Analytic derivative bundle of the per-channel shift gamma.

    Every closure takes ``(t, x1, x2, frozen_x1, frozen_x2)`` with the state
    blocks shaped ``(..., m)``.  Shapes of the returned arrays:

    - ``dx1``, ``dx2``: ``(..., n, m)``  -- d(gamma_k)/d(x1_j), d(gamma_k)/d(x2_j)
    - ``dx2dx2``: ``(..., n, m, m)``     -- d2(gamma_k)/d(x2_j)d(x2_l)
    - ``dx1dx2``: ``(..., n, m, m)``     -- d2(gamma_k)/d(x1_j)d(x2_l)

    Entries a model's derivation declares to vanish must be exact zeros.
    """

    dx1: Callable
    dx2: Callable
    dx2dx2: Callable
    dx1dx2: Callable


def zero_gamma_derivatives(dof: int, channels: int) -> GammaDerivatives:
    """Bundle for models whose nonlinear drift is identically zero."""

    def _vec(t, x1, x2, fx1, fx2):
        shape = np.broadcast_shapes(np.shape(x1), np.shape(x2))[:-1]
        return np.zeros(shape + (channels, dof))

    def _mat(t, x1, x2, fx1, fx2):
        shape = np.broadcast_shapes(np.shape(x1), np.shape(x2))[:-1]
        return np.zeros(shape + (channels, dof, dof))

    return GammaDerivatives(dx1=_vec, dx2=_vec, dx2dx2=_mat, dx1dx2=_mat)


@dataclass(frozen=True)
class OscillatorModel:
    """Immutable description of one oscillator reduced to first order.

    Parameters
    ----------
    dof, channels:
        Number of degrees of freedom ``m`` and of Brownian channels ``n``.
    linear_drift:
        ``(2m, 2m)`` matrix acting on the stacked state; its upper half must
        be ``[0, I]`` so that displacement rows reduce to ``dx1 = x2 dt``.
    nonlinear_drift:
        ``(t, x1, x2) -> (..., m)`` contribution to the velocity rows.
    forcing:
        ``t -> (..., m)`` deterministic excitation (zeros when autonomous);
        must broadcast when ``t`` carries leading axes.
    diffusion:
        ``(t, x1, x2) -> (..., m, n)`` noise intensity matrix.  Models with a
        state-dependent diffusion must say so via
        ``state_dependent_diffusion`` so the shift is re-evaluated at the
        current state.
    gamma_derivatives:
        Analytic bundle used by the measure-change terms; required by the
        rejection sampler.
    """

    name: str
    dof: int
    channels: int
    linear_drift: np.ndarray
    nonlinear_drift: Callable
    forcing: Callable
    diffusion: Callable
    gamma_derivatives: GammaDerivatives | None = None
    state_dependent_diffusion: bool = False
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.linear_drift, dtype=float)
        m = self.dof
        if self.dof < 1 or self.channels < 1:
            raise ConfigurationError("dof and channels must be positive")
        if a.shape != (2 * m, 2 * m):
            raise ConfigurationError(
                f"linear_drift must be {(2 * m, 2 * m)}, got {a.shape}"
            )
        if not np.isfinite(a).all():
            raise NumericDomainError("linear_drift has non-finite entries")
        expected_top = np.hstack([np.zeros((m, m)), np.eye(m)])
        if not np.array_equal(a[:m], expected_top):
            raise ConfigurationError("upper half of linear_drift must be [0, I]")
        object.__setattr__(self, "linear_drift", a)

    def velocity_linear(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        """Linear part of the velocity-row drift, shape ``(..., m)``."""
        m = self.dof
        kb = self.linear_drift[m:, :m]
        cb = self.linear_drift[m:, m:]
        return x1 @ kb.T + x2 @ cb.T

    def nonlinear(self, t, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        """Evaluate the nonlinear velocity drift, checking finiteness."""
        g = np.asarray(self.nonlinear_drift(t, x1, x2), dtype=float)
        if not np.isfinite(g).all():
            raise NumericDomainError(
                f"nonlinear_drift of model {self.name!r} returned non-finite values at t={t}"
            )
        return g

    def forcing_at(self, t) -> np.ndarray:
        f = np.asarray(self.forcing(t), dtype=float)
        if not np.isfinite(f).all():
            raise NumericDomainError(
                f"forcing of model {self.name!r} returned non-finite values at t={t}"
            )
        return f

    def diffusion_at(self, t, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        f = np.asarray(self.diffusion(t, x1, x2), dtype=float)
        if not np.isfinite(f).all():
            raise NumericDomainError(
                f"diffusion of model {self.name!r} returned non-finite values at t={t}"
            )
        return f


def drift(model: OscillatorModel, t: float, state: PathState) -> np.ndarray:
    """Full drift vector of the stacked state, shape ``(2m,)``.

    Rows ``1..m`` equal the velocities; rows ``m+1..2m`` are
    linear + nonlinear + forcing.
    """
    vel = (
        model.velocity_linear(state.x1, state.x2)
        + model.nonlinear(t, state.x1, state.x2)
        + model.forcing_at(t)
    )
    return np.concatenate([state.x2, vel])


def frozen_nonlinear(model: OscillatorModel, t_prev: float, s_prev: PathState) -> np.ndarray:
    """Nonlinear drift held at a macro-step start.

    Caching the returned vector for the whole macro step is sound because
    ``nonlinear_drift`` is required to be pure.
    """
    return model.nonlinear(t_prev, s_prev.x1, s_prev.x2)
