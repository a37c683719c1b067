"""The three benchmark oscillators and the RVP stationary-moment oracle.

Each builder returns an immutable :class:`OscillatorModel` whose gamma
derivative bundle is the analytic term table of the corresponding
derivation; audit tests check the bundles against finite differences and
check that every entry declared to vanish is an exact zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    ConfigurationError,
    GammaDerivatives,
    OracleError,
    OscillatorModel,
)

DVP_GAMMA_VARIANTS = ("tabulated", "quotient")


@dataclass(frozen=True)
class RvpParams:
    """Rayleigh-Van der Pol oscillator with additive noise.

    ``x'' + (h1 + h3 x^2 + h3 x'^2) x' + x = sigma dB``.
    """

    h1: float = 1.0
    h3: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigurationError("sigma must be positive")
        if self.h1 <= 0 or self.h3 < 0:
            raise ConfigurationError(
                "h1 > 0 and h3 >= 0 are required for a well-defined stationary density"
            )


@dataclass(frozen=True)
class DvpParams:
    """Duffing-Van der Pol oscillator with multiplicative noise.

    ``m x'' + c x' - k x + alpha x^3 = rho x dB + A sin(2 pi omega t)``.
    The linear stiffness enters with a negative restoring force as written,
    which makes the origin linearly unstable and the cubic term the
    stabilizer; the long-run motion lives near x = +-sqrt(k/alpha).  The
    forcing amplitude defaults to zero (autonomous benchmark setup).
    """

    mass: float = 1.0
    damping: float = 1.5
    stiffness: float = 60.0
    alpha: float = 2.0
    rho: float = 0.5
    amplitude: float = 0.0
    frequency: float = 0.0

    def __post_init__(self):
        if self.mass <= 0:
            raise ConfigurationError("mass must be positive")
        if self.rho < 0:
            raise ConfigurationError("rho must be >= 0")


@dataclass(frozen=True)
class TwoDofParams:
    """Chain of two coupled DOFs with cubic dissipation nonlinearities."""

    c1: float = 7.75
    c2: float = 7.75
    k1: float = 100.0
    k2: float = 100.0
    alpha: float = 100.0
    beta: float = 100.0
    sigma1: float = 1.0
    sigma2: float = 1.0

    def __post_init__(self):
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ConfigurationError("sigma1 and sigma2 must be positive")


def build_rvp(p: RvpParams) -> OscillatorModel:
    """Single-DOF RVP model; nonlinear drift ``-h3 (x1^2 x2 + x2^3)``."""
    h1, h3, sig = p.h1, p.h3, p.sigma
    linear = np.array([[0.0, 1.0], [-1.0, -h1]])

    def nonlinear(t, x1, x2):
        return -h3 * (x1**2 * x2 + x2**3)

    def forcing(t):
        return np.zeros(np.shape(t) + (1,))

    def diffusion(t, x1, x2):
        shape = np.broadcast_shapes(np.shape(x1), np.shape(x2))[:-1]
        out = np.zeros(shape + (1, 1))
        out[..., 0, 0] = sig
        return out

    inv = 1.0 / sig

    def dx1(t, x1, x2, fx1, fx2):
        return (-inv * 2.0 * h3 * x1 * x2)[..., None, :]

    def dx2(t, x1, x2, fx1, fx2):
        return (-inv * (h3 * x1**2 + 3.0 * h3 * x2**2))[..., None, :]

    def dx2dx2(t, x1, x2, fx1, fx2):
        return (-inv * 6.0 * h3 * x2)[..., None, :, None]

    def dx1dx2(t, x1, x2, fx1, fx2):
        return (-inv * 2.0 * h3 * x1)[..., None, :, None]

    return OscillatorModel(
        name="rvp",
        dof=1,
        channels=1,
        linear_drift=linear,
        nonlinear_drift=nonlinear,
        forcing=forcing,
        diffusion=diffusion,
        gamma_derivatives=GammaDerivatives(dx1, dx2, dx2dx2, dx1dx2),
        state_dependent_diffusion=False,
        parameters={"h1": h1, "h3": h3, "sigma": sig},
    )


def build_dvp(p: DvpParams, gamma_derivative_variant: str = "tabulated") -> OscillatorModel:
    """Single-DOF DVP model with diffusion ``rho x1 / m``.

    The shift is ``gamma = -(rho x1/m)^{-1} (alpha/m)(x1^3 - x1_frozen^3)``
    and vanishes whenever the diffusion entry does, so evaluating it at
    x1 = 0 is a singular-shift error.  ``gamma_derivative_variant`` picks the
    d(gamma)/d(x1) closure: ``"tabulated"`` differentiates the numerator
    cubic only (the term-table form), ``"quotient"`` adds the prefactor's
    quotient-rule term ``-gamma/x1``.  Both coincide at the frozen point.
    """
    if gamma_derivative_variant not in DVP_GAMMA_VARIANTS:
        raise ConfigurationError(
            f"gamma_derivative_variant must be one of {DVP_GAMMA_VARIANTS}"
        )
    m, c, k = p.mass, p.damping, p.stiffness
    alpha, rho = p.alpha, p.rho
    amp, freq = p.amplitude, p.frequency
    linear = np.array([[0.0, 1.0], [k / m, -c / m]])

    def nonlinear(t, x1, x2):
        return -(alpha / m) * x1**3

    def forcing(t):
        return (amp / m) * np.sin(2.0 * np.pi * freq * np.asarray(t, dtype=float))[..., None]

    def diffusion(t, x1, x2):
        shape = np.broadcast_shapes(np.shape(x1), np.shape(x2))[:-1]
        out = np.zeros(shape + (1, 1))
        out[..., 0, 0] = rho * x1[..., 0] / m
        return out

    def dx1(t, x1, x2, fx1, fx2):
        v = -(3.0 * alpha / rho) * x1
        if gamma_derivative_variant == "quotient":
            with np.errstate(divide="ignore", invalid="ignore"):
                v = -(alpha / rho) * (2.0 * x1 + fx1**3 / x1**2)
        return v[..., None, :]

    def zeros_vec(t, x1, x2, fx1, fx2):
        shape = np.broadcast_shapes(np.shape(x1), np.shape(x2))[:-1]
        return np.zeros(shape + (1, 1))

    def zeros_mat(t, x1, x2, fx1, fx2):
        shape = np.broadcast_shapes(np.shape(x1), np.shape(x2))[:-1]
        return np.zeros(shape + (1, 1, 1))

    return OscillatorModel(
        name="dvp",
        dof=1,
        channels=1,
        linear_drift=linear,
        nonlinear_drift=nonlinear,
        forcing=forcing,
        diffusion=diffusion,
        gamma_derivatives=GammaDerivatives(
            dx1=dx1, dx2=zeros_vec, dx2dx2=zeros_mat, dx1dx2=zeros_mat
        ),
        state_dependent_diffusion=True,
        parameters={
            "mass": m, "damping": c, "stiffness": k, "alpha": alpha,
            "rho": rho, "amplitude": amp, "frequency": freq,
            "gamma_derivative_variant": gamma_derivative_variant,
        },
    )


def build_two_dof(p: TwoDofParams) -> OscillatorModel:
    """Two-DOF chain; channel k drives DOF k with intensity sigma_k.

    State blocks are x1 = (displacement 1, displacement 2) and
    x2 = (velocity 1, velocity 2); nonlinear drift rows are
    ``(-alpha x1_1^2 x2_1, -beta x1_2^3)``.  Explicit stepping wants a macro
    step of at most 0.01 at the benchmark stiffness of 100.
    """
    c1, c2, k1, k2 = p.c1, p.c2, p.k1, p.k2
    alpha, beta = p.alpha, p.beta
    s1, s2 = p.sigma1, p.sigma2
    kb = np.array([[-(k1 + k2), k2], [k2, -k2]])
    cb = np.array([[-(c1 + c2), c2], [c2, -c2]])
    linear = np.block([[np.zeros((2, 2)), np.eye(2)], [kb, cb]])

    def nonlinear(t, x1, x2):
        g1 = -alpha * x1[..., 0] ** 2 * x2[..., 0]
        g2 = -beta * x1[..., 1] ** 3
        return np.stack([g1, g2], axis=-1)

    def forcing(t):
        return np.zeros(np.shape(t) + (2,))

    fmat = np.array([[s1, 0.0], [0.0, s2]])

    def diffusion(t, x1, x2):
        shape = np.broadcast_shapes(np.shape(x1), np.shape(x2))[:-1]
        return np.broadcast_to(fmat, shape + (2, 2)).copy()

    i1, i2 = 1.0 / s1, 1.0 / s2

    def dx1(t, x1, x2, fx1, fx2):
        shape = np.broadcast_shapes(np.shape(x1), np.shape(x2))[:-1]
        out = np.zeros(shape + (2, 2))
        out[..., 0, 0] = -i1 * 2.0 * alpha * x1[..., 0] * x2[..., 0]
        out[..., 1, 1] = -i2 * 3.0 * beta * x1[..., 1] ** 2
        return out

    def dx2(t, x1, x2, fx1, fx2):
        shape = np.broadcast_shapes(np.shape(x1), np.shape(x2))[:-1]
        out = np.zeros(shape + (2, 2))
        out[..., 0, 0] = -i1 * alpha * x1[..., 0] ** 2
        return out

    def dx2dx2(t, x1, x2, fx1, fx2):
        shape = np.broadcast_shapes(np.shape(x1), np.shape(x2))[:-1]
        return np.zeros(shape + (2, 2, 2))

    def dx1dx2(t, x1, x2, fx1, fx2):
        shape = np.broadcast_shapes(np.shape(x1), np.shape(x2))[:-1]
        out = np.zeros(shape + (2, 2, 2))
        out[..., 0, 0, 0] = -i1 * 2.0 * alpha * x1[..., 0]
        return out

    return OscillatorModel(
        name="two_dof",
        dof=2,
        channels=2,
        linear_drift=linear,
        nonlinear_drift=nonlinear,
        forcing=forcing,
        diffusion=diffusion,
        gamma_derivatives=GammaDerivatives(dx1, dx2, dx2dx2, dx1dx2),
        state_dependent_diffusion=False,
        parameters={
            "c1": c1, "c2": c2, "k1": k1, "k2": k2,
            "alpha": alpha, "beta": beta, "sigma1": s1, "sigma2": s2,
        },
    )


def rvp_stationary_density(p: RvpParams, x1, x2):
    """Unnormalized stationary density of the RVP oscillator.

    Energy-envelope solution of the stationary forward equation for this
    damping class: ``exp(-(2/sigma^2)(h1 H + h3 H^2))`` with
    ``H = (x1^2 + x2^2)/2``.  Direct substitution shows it solves the
    stationary equation exactly for every h1, h3 > 0.
    """
    h = 0.5 * (np.asarray(x1, dtype=float) ** 2 + np.asarray(x2, dtype=float) ** 2)
    return np.exp(-(2.0 / p.sigma**2) * (p.h1 * h + p.h3 * h**2))


def _density_extent(p: RvpParams, ratio: float) -> float:
    # smallest L with density(L, 0)/density(0, 0) below ratio
    target = -np.log(ratio)
    lo, hi = 1.0, 2.0
    def exponent(l):
        h = 0.5 * l * l
        return (2.0 / p.sigma**2) * (p.h1 * h + p.h3 * h**2)
    while exponent(hi) < target:
        hi *= 2.0
        if hi > 1e6:
            raise OracleError("stationary density does not decay; check parameters")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if exponent(mid) < target:
            lo = mid
        else:
            hi = mid
    return hi


def rvp_stationary_moments(
    p: RvpParams,
    rel_tol: float = 1e-6,
    boundary_ratio: float = 1e-12,
    max_refinements: int = 14,
):
    """Stationary ``(E[X^2], E[X'^2])`` by adaptive tensor-grid quadrature.

    Trapezoid quadrature on ``[-L, L]^2`` with L chosen so the boundary
    density falls below ``boundary_ratio`` of the peak, refined by halving
    the spacing until both moments move by less than ``rel_tol`` relative.
    """
    L = _density_extent(p, boundary_ratio)
    prev = None
    n = 64
    for _ in range(max_refinements):
        xs = np.linspace(-L, L, n + 1)
        w = np.full(n + 1, 2.0 * L / n)
        w[0] *= 0.5
        w[-1] *= 0.5
        x1g, x2g = np.meshgrid(xs, xs, indexing="ij")
        dens = rvp_stationary_density(p, x1g, x2g)
        wt = np.outer(w, w) * dens
        mass = wt.sum()
        ex2 = (wt * x1g**2).sum() / mass
        ev2 = (wt * x2g**2).sum() / mass
        if prev is not None:
            move = max(abs(ex2 - prev[0]) / prev[0], abs(ev2 - prev[1]) / prev[1])
            if move < rel_tol:
                return float(ex2), float(ev2)
        prev = (ex2, ev2)
        n *= 2
    raise OracleError(
        f"stationary-moment quadrature did not converge to {rel_tol} "
        f"within {max_refinements} refinements (last: {prev})"
    )


MODEL_BUILDERS = {
    "rvp": (RvpParams, build_rvp),
    "dvp": (DvpParams, build_dvp),
    "two_dof": (TwoDofParams, build_two_dof),
}
