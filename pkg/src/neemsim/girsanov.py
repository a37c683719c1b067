"""Measure-change ingredients for drift-frozen Euler-Maruyama proposals.

Freezing the nonlinear drift at the macro-step start leaves an error
process ``delta`` on the velocity rows.  Absorbing that error into the
diffusion defines a per-channel shift ``gamma`` and a change of measure
whose Radon-Nikodym weight factors into a boundary part ``Lambda1``
(evaluable from endpoint values) and a time-integral part
``Lambda2 = exp(-int phi ds)`` that the rejection sampler realizes by
Poisson thinning.  Everything here is a pure function of its inputs; all
state blocks broadcast over leading axes.

Weights are always accumulated in log space.  Functions return non-finite
values instead of raising when a single path degenerates, so that the
ensemble driver can flag that path invalid rather than abort the run; the
scalar wrappers raise :class:`SingularShiftError` as a convenience.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    ConfigurationError,
    GammaDerivatives,
    OscillatorModel,
    PathState,
    SingularShiftError,
)

_trapz = getattr(np, "trapezoid", np.trapz)


@dataclass(frozen=True)
class GirsanovTerms:
    """Per-channel shift and weight pieces for one macro step of one path."""

    gamma: np.ndarray
    phi: np.ndarray
    log_lambda1: float
    log_lambda2: float
    valid: bool

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        p = np.atleast_1d(np.asarray(self.phi, dtype=float))
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "phi", p)
        if self.valid and not (
            np.isfinite(self.log_lambda1) and np.isfinite(self.log_lambda2)
        ):
            raise ConfigurationError("valid terms require finite log weights")


def delta_arrays(model, t, x1, x2, frozen_gnl):
    """Freezing-error process on the velocity rows, shape ``(..., m)``.

    Signed as the worked oscillator examples sign it: positive when the
    current nonlinear force exceeds its frozen value, i.e.
    ``frozen - current`` on drift convention.
    """
    return frozen_gnl - np.asarray(model.nonlinear_drift(t, x1, x2), dtype=float)


def gamma_arrays(model, t, x1, x2, frozen_gnl):
    """Per-channel shift ``gamma_k = -sum_j delta_j / f_jk``, shape ``(..., n)``.

    Channels sum only over their nonzero diffusion entries.  A velocity row
    with nonzero ``delta`` served by no channel, or a vanishing diffusion
    entry on its own channel, leaves the measure change undefined: those
    entries come back non-finite for the caller to flag.
    """
    d = delta_arrays(model, t, x1, x2, frozen_gnl)
    f = np.asarray(model.diffusion(t, x1, x2), dtype=float)
    live = f != 0.0
    contrib = np.where(live, d[..., :, None] / np.where(live, f, 1.0), 0.0)
    g = -contrib.sum(axis=-2)
    uncovered = (d != 0.0) & ~live.any(axis=-1)
    if uncovered.any():
        g = np.where(uncovered.any(axis=-1)[..., None], np.nan, g)
    return g


def delta(model: OscillatorModel, t: float, s: PathState, frozen: np.ndarray) -> np.ndarray:
    """Error process at one state; ``frozen`` is the frozen nonlinear drift."""
    return delta_arrays(model, t, s.x1, s.x2, np.asarray(frozen, dtype=float))


def gamma(model: OscillatorModel, t: float, s: PathState, frozen: np.ndarray) -> np.ndarray:
    """Shift vector at one state; raises when the change is undefined."""
    g = gamma_arrays(model, t, s.x1, s.x2, np.asarray(frozen, dtype=float))
    if not np.isfinite(g).all():
        raise SingularShiftError(
            f"model {model.name!r}: zero diffusion against nonzero drift error at t={t}"
        )
    return g


def _bundle(model, derivatives):
    b = derivatives if derivatives is not None else model.gamma_derivatives
    if b is None:
        raise ConfigurationError(
            f"model {model.name!r} carries no gamma derivative bundle"
        )
    return b


def phi_arrays(
    model,
    t,
    x1,
    x2,
    btilde,
    frozen_x1,
    frozen_x2,
    frozen_gnl,
    derivatives: GammaDerivatives | None = None,
    return_terms: bool = False,
):
    """Per-channel integrand of the Lambda2 exponent, shape ``(..., n)``.

    ``btilde`` holds the Q-measure Brownian values, shape ``(..., n)``.  The
    drift entering the mixed terms is the proposal drift: current linear
    part plus frozen nonlinear part plus forcing.
    """
    b = _bundle(model, derivatives)
    f = np.asarray(model.diffusion(t, x1, x2), dtype=float)
    g_tilde = (
        model.velocity_linear(x1, x2)
        + frozen_gnl
        + np.asarray(model.forcing(t), dtype=float)
    )
    gam = gamma_arrays(model, t, x1, x2, frozen_gnl)

    dx1 = np.asarray(b.dx1(t, x1, x2, frozen_x1, frozen_x2), dtype=float)
    dx2 = np.asarray(b.dx2(t, x1, x2, frozen_x1, frozen_x2), dtype=float)
    dx2dx2 = np.asarray(b.dx2dx2(t, x1, x2, frozen_x1, frozen_x2), dtype=float)
    dx1dx2 = np.asarray(b.dx1dx2(t, x1, x2, frozen_x1, frozen_x2), dtype=float)

    bt = np.asarray(btilde, dtype=float)
    t1 = -np.einsum("...kj,...jk->...k", dx2, f)
    t2 = -bt * np.einsum("...kj,...j->...k", dx1, x2)
    t3 = -bt * np.einsum("...kj,...j->...k", dx2, g_tilde)
    quad = np.einsum("...jk,...kjl,...lk->...k", f, dx2dx2, f)
    t4 = -0.5 * bt * quad
    t5 = bt**2 * np.einsum("...kjl,...lk,...j->...k", dx1dx2, f, x2)
    t6 = bt**2 * np.einsum("...kjl,...lk,...j->...k", dx2dx2, f, g_tilde)
    t7 = bt * quad
    t8 = -0.5 * gam**2
    total = t1 + t2 + t3 + t4 + t5 + t6 + t7 + t8
    if return_terms:
        return total, {
            "dx2_f": t1,
            "dx1_x2": t2,
            "dx2_drift": t3,
            "dx2dx2_half": t4,
            "dx1dx2_x2": t5,
            "dx2dx2_drift": t6,
            "dx2dx2_f": t7,
            "half_gamma_sq": t8,
        }
    return total


def lambda2_integrand_arrays(
    model,
    t,
    x1,
    x2,
    btilde,
    frozen_x1,
    frozen_x2,
    frozen_gnl,
    derivatives: GammaDerivatives | None = None,
):
    """Ito-consistent per-channel integrand of the Lambda2 exponent.

    Collecting ``int gamma dBt - (1/2) int gamma^2 ds`` into boundary and
    time-integral parts by two stochastic integrations by parts gives

        log Lambda = [gamma Bt] - (1/2)[Bt^2 (d_x2 gamma)^T f] - int q ds

    with ``q`` this integrand (the residual Ito term, third-order and
    cross-diffusion derivatives are dropped; they enter at higher order in
    the step).  This differs from the tabulated :func:`phi_arrays` form in
    the sign of the first-derivative terms and in two half coefficients;
    the identity was verified in closed form on a linear-shift model.  The
    sampler uses this assembly by default because the tabulated variant
    biases the corrected moments measurably at the benchmark step sizes.
    """
    b = _bundle(model, derivatives)
    f = np.asarray(model.diffusion(t, x1, x2), dtype=float)
    g_tilde = (
        model.velocity_linear(x1, x2)
        + frozen_gnl
        + np.asarray(model.forcing(t), dtype=float)
    )
    gam = gamma_arrays(model, t, x1, x2, frozen_gnl)

    dx1 = np.asarray(b.dx1(t, x1, x2, frozen_x1, frozen_x2), dtype=float)
    dx2 = np.asarray(b.dx2(t, x1, x2, frozen_x1, frozen_x2), dtype=float)
    dx2dx2 = np.asarray(b.dx2dx2(t, x1, x2, frozen_x1, frozen_x2), dtype=float)
    dx1dx2 = np.asarray(b.dx1dx2(t, x1, x2, frozen_x1, frozen_x2), dtype=float)

    bt = np.asarray(btilde, dtype=float)
    quad = np.einsum("...jk,...kjl,...lk->...k", f, dx2dx2, f)
    return (
        0.5 * np.einsum("...kj,...jk->...k", dx2, f)
        + bt * np.einsum("...kj,...j->...k", dx1, x2)
        + bt * np.einsum("...kj,...j->...k", dx2, g_tilde)
        - 0.5 * bt * quad
        - 0.5 * bt**2 * np.einsum("...kjl,...lk,...j->...k", dx1dx2, f, x2)
        - 0.5 * bt**2 * np.einsum("...kjl,...lk,...j->...k", dx2dx2, f, g_tilde)
        + 0.5 * gam**2
    )


def phi(
    model: OscillatorModel,
    t: float,
    s: PathState,
    frozen_state: PathState,
    b_tilde: np.ndarray,
    derivatives: GammaDerivatives | None = None,
) -> np.ndarray:
    """Per-channel phi at one state given the frozen reference state."""
    frozen_gnl = model.nonlinear(frozen_state.t, frozen_state.x1, frozen_state.x2)
    return phi_arrays(
        model,
        t,
        s.x1,
        s.x2,
        np.asarray(b_tilde, dtype=float),
        frozen_state.x1,
        frozen_state.x2,
        frozen_gnl,
        derivatives=derivatives,
    )


def lambda1_boundary_arrays(
    model, t, x1, x2, btilde, frozen_x1, frozen_x2, frozen_gnl,
    derivatives: GammaDerivatives | None = None,
    b2_coefficient: float = 1.0,
):
    """One boundary's contribution ``sum_k gamma_k Bt_k - c Bt_k^2 (d_x2 gamma_k)^T f_k``.

    ``b2_coefficient`` is 1 in the tabulated factorization and 1/2 in the
    Ito-consistent one (see :func:`lambda2_integrand_arrays`).
    """
    b = _bundle(model, derivatives)
    gam = gamma_arrays(model, t, x1, x2, frozen_gnl)
    dx2 = np.asarray(b.dx2(t, x1, x2, frozen_x1, frozen_x2), dtype=float)
    f = np.asarray(model.diffusion(t, x1, x2), dtype=float)
    bt = np.asarray(btilde, dtype=float)
    per_channel = gam * bt - b2_coefficient * bt**2 * np.einsum("...kj,...jk->...k", dx2, f)
    return per_channel.sum(axis=-1)


def lambda1(
    model: OscillatorModel,
    s_r: PathState,
    btilde_r: np.ndarray,
    s_i: PathState,
    btilde_i: np.ndarray,
    frozen_state: PathState,
    derivatives: GammaDerivatives | None = None,
) -> float:
    """Log boundary weight between two nodes of one macro step.

    Non-finite results are returned as-is; the driver flags such paths
    invalid (weight zero) instead of aborting the ensemble.
    """
    frozen_gnl = model.nonlinear(frozen_state.t, frozen_state.x1, frozen_state.x2)
    hi = lambda1_boundary_arrays(
        model, s_i.t, s_i.x1, s_i.x2, np.asarray(btilde_i, dtype=float),
        frozen_state.x1, frozen_state.x2, frozen_gnl, derivatives,
    )
    lo = lambda1_boundary_arrays(
        model, s_r.t, s_r.x1, s_r.x2, np.asarray(btilde_r, dtype=float),
        frozen_state.x1, frozen_state.x2, frozen_gnl, derivatives,
    )
    return float(hi - lo)


def lambda2_log_integral(phi_samples: np.ndarray, dt_sub: float) -> float | np.ndarray:
    """Trapezoidal estimate of ``-int phi ds`` over a uniform sub-grid.

    ``phi_samples`` may be ``(n_nodes,)`` for a single channel,
    ``(channels, n_nodes)`` to sum channels, or carry extra leading axes.
    """
    p = np.asarray(phi_samples, dtype=float)
    integral = _trapz(p, dx=dt_sub, axis=-1)
    if p.ndim >= 2:
        integral = integral.sum(axis=-1)
    return -integral


def discrete_radon_nikodym(gammas, increments, dt: float):
    """Radon-Nikodym weight of a discretized path under a drift shift.

    ``log Lambda_N = sum_i gamma_i dx_i - (1/2) sum_i gamma_i^2 dt`` with the
    exponent accumulated in log space; the compensator makes the weight a
    unit-mean martingale over paths of independent ``N(0, dt)`` increments.
    Accepts stacked paths via leading axes (summation over the last axis).
    """
    g = np.asarray(gammas, dtype=float)
    dx = np.asarray(increments, dtype=float)
    if g.shape[-1] != dx.shape[-1]:
        raise ConfigurationError("gammas and increments must have equal length")
    log_w = (g * dx).sum(axis=-1) - 0.5 * (g**2).sum(axis=-1) * dt
    return np.exp(log_w)


def normal_shift_weight(x, shift: float):
    """Weight ``exp(x*shift - shift^2/2)`` tilting a standard normal by ``shift``."""
    return np.exp(np.asarray(x, dtype=float) * shift - 0.5 * shift**2)


def step_terms(
    model: OscillatorModel,
    s_i: PathState,
    btilde_i: np.ndarray,
    frozen_state: PathState,
    phi_node_samples: np.ndarray,
    dt_sub: float,
) -> GirsanovTerms:
    """Summarize one macro step whose lower boundary is the frozen point.

    At the frozen point the shift vanishes and ``Btilde = 0``, so the lower
    boundary contributes nothing to the log boundary weight.
    """
    frozen_gnl = model.nonlinear(frozen_state.t, frozen_state.x1, frozen_state.x2)
    g = gamma_arrays(model, s_i.t, s_i.x1, s_i.x2, frozen_gnl)
    p = phi_arrays(
        model, s_i.t, s_i.x1, s_i.x2, np.asarray(btilde_i, dtype=float),
        frozen_state.x1, frozen_state.x2, frozen_gnl,
    )
    l1 = lambda1_boundary_arrays(
        model, s_i.t, s_i.x1, s_i.x2, np.asarray(btilde_i, dtype=float),
        frozen_state.x1, frozen_state.x2, frozen_gnl,
    )
    l2 = lambda2_log_integral(phi_node_samples, dt_sub)
    valid = bool(
        np.isfinite(g).all() and np.isfinite(p).all()
        and np.isfinite(l1) and np.isfinite(np.asarray(l2)).all()
    )
    return GirsanovTerms(
        gamma=g, phi=p,
        log_lambda1=float(l1) if valid else float("nan"),
        log_lambda2=float(np.asarray(l2)) if valid else float("nan"),
        valid=valid,
    )


def finite_difference_bundle(
    model: OscillatorModel, h1: float = 1e-6, h2: float = 1e-3
) -> GammaDerivatives:
    """Central-difference derivative bundle of ``gamma`` for audit tests.

    Never used by the sampler: phi runs inside the rejection loop, so models
    ship analytic closures and this bundle exists to validate them.  The
    second-difference step is wide because the shipped shifts are cubic
    (no truncation error) while cancellation noise scales as
    ``eps |gamma| / h^2``.
    """

    def gam(t, x1, x2, fx1, fx2):
        frozen_gnl = model.nonlinear(t, fx1, fx2)
        return gamma_arrays(model, t, x1, x2, frozen_gnl)

    def shift(x, j, h):
        out = np.array(x, dtype=float, copy=True)
        out[..., j] += h
        return out

    m = model.dof

    def dx1(t, x1, x2, fx1, fx2):
        cols = [
            (gam(t, shift(x1, j, h1), x2, fx1, fx2) - gam(t, shift(x1, j, -h1), x2, fx1, fx2))
            / (2 * h1)
            for j in range(m)
        ]
        return np.stack(cols, axis=-1)

    def dx2(t, x1, x2, fx1, fx2):
        cols = [
            (gam(t, x1, shift(x2, j, h1), fx1, fx2) - gam(t, x1, shift(x2, j, -h1), fx1, fx2))
            / (2 * h1)
            for j in range(m)
        ]
        return np.stack(cols, axis=-1)

    def dx2dx2(t, x1, x2, fx1, fx2):
        base = gam(t, x1, x2, fx1, fx2)
        rows = []
        for j in range(m):
            row = []
            for l in range(m):
                if j == l:
                    hi = gam(t, x1, shift(x2, j, h2), fx1, fx2)
                    lo = gam(t, x1, shift(x2, j, -h2), fx1, fx2)
                    row.append((hi - 2 * base + lo) / h2**2)
                else:
                    pp = gam(t, x1, shift(shift(x2, j, h2), l, h2), fx1, fx2)
                    pm = gam(t, x1, shift(shift(x2, j, h2), l, -h2), fx1, fx2)
                    mp = gam(t, x1, shift(shift(x2, j, -h2), l, h2), fx1, fx2)
                    mm = gam(t, x1, shift(shift(x2, j, -h2), l, -h2), fx1, fx2)
                    row.append((pp - pm - mp + mm) / (4 * h2**2))
            rows.append(np.stack(row, axis=-1))
        return np.stack(rows, axis=-2)

    def dx1dx2(t, x1, x2, fx1, fx2):
        rows = []
        for j in range(m):
            row = []
            for l in range(m):
                pp = gam(t, shift(x1, j, h2), shift(x2, l, h2), fx1, fx2)
                pm = gam(t, shift(x1, j, h2), shift(x2, l, -h2), fx1, fx2)
                mp = gam(t, shift(x1, j, -h2), shift(x2, l, h2), fx1, fx2)
                mm = gam(t, shift(x1, j, -h2), shift(x2, l, -h2), fx1, fx2)
                row.append((pp - pm - mp + mm) / (4 * h2**2))
            rows.append(np.stack(row, axis=-1))
        return np.stack(rows, axis=-2)

    return GammaDerivatives(dx1=dx1, dx2=dx2, dx2dx2=dx2dx2, dx1dx2=dx1dx2)
