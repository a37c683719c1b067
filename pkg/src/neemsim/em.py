"""Euler-Maruyama stepping, whole paths and the fine-step reference oracle.

The explicit scheme only; no taming or implicitness.  Step-size guidance
for the shipped oscillators: the stiffest of them (the 2-DOF system with
stiffness 100) needs a step of at most 0.01 on the macro grid; the
reference oracle is meant to run at 1e-3 or finer.
"""

from __future__ import annotations

import numpy as np

from . import brownian
from .core import (
    ConfigurationError,
    NumericDomainError,
    OscillatorModel,
    PathState,
    TimeGrid,
)
from .stats import MomentSeries, convergence_fit, second_moments

MODES = ("classical", "frozen")


def em_substep_arrays(model, t, x1, x2, dt, dw, gnl):
    """One EM update on ``(..., m)`` state blocks with precomputed nonlinear
    drift ``gnl`` (current-state for classical mode, frozen for proposals)."""
    vel = model.velocity_linear(x1, x2) + gnl + model.forcing_at(t)
    f = model.diffusion_at(t, x1, x2)
    new_x1 = x1 + x2 * dt
    new_x2 = x2 + vel * dt + np.einsum("...jk,...k->...j", f, dw)
    return new_x1, new_x2


def em_step(
    model: OscillatorModel,
    t: float,
    s: PathState,
    dt: float,
    db: np.ndarray,
    mode: str = "classical",
    frozen_gnl: np.ndarray | None = None,
) -> PathState:
    """Single Euler-Maruyama step.

    ``mode="classical"`` evaluates the nonlinear drift at the current state;
    ``mode="frozen"`` holds it at the supplied macro-step-start value.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    db = np.asarray(db, dtype=float)
    if not np.isfinite(db).all():
        raise NumericDomainError(f"non-finite Brownian increment at t={t}")
    if mode == "classical":
        gnl = model.nonlinear(t, s.x1, s.x2)
    elif mode == "frozen":
        if frozen_gnl is None:
            raise ConfigurationError("frozen mode needs the frozen nonlinear drift")
        gnl = np.asarray(frozen_gnl, dtype=float)
    else:
        raise ConfigurationError(f"unknown mode {mode!r}, expected one of {MODES}")
    x1, x2 = em_substep_arrays(model, t, s.x1, s.x2, dt, db, gnl)
    if not (np.isfinite(x1).all() and np.isfinite(x2).all()):
        raise NumericDomainError(
            f"EM step left the finite domain at t={t} (x1={s.x1}, x2={s.x2})"
        )
    return PathState(x1=x1, x2=x2, t=s.t + dt)


def em_path(
    model: OscillatorModel,
    grid: TimeGrid,
    seed: int,
    path_index: int,
    init: PathState,
    mode: str = "classical",
) -> list[PathState]:
    """States at the macro nodes of one EM trajectory.

    Increments come from the path's whole-trajectory substream, consumed one
    substep at a time, which makes the trajectory invariant under
    refactoring macro steps into substeps (same physical sub-grid, same
    numbers).  Sub-node states exist only transiently within the current
    macro step.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}, expected one of {MODES}")
    rng = brownian.path_stream(seed, path_index)
    n, n_sub = model.channels, grid.substeps_per_macro
    dt_sub = grid.dt_sub
    sqrt_h = np.sqrt(dt_sub)
    out = [PathState(x1=init.x1, x2=init.x2, t=grid.t0)]
    state = out[0]
    for i in range(grid.macro_steps):
        frozen = model.nonlinear(state.t, state.x1, state.x2) if mode == "frozen" else None
        for r in range(n_sub):
            db = rng.standard_normal(n) * sqrt_h
            state = em_step(model, state.t, state, dt_sub, db, mode=mode, frozen_gnl=frozen)
        out.append(state)
    return out


def strong_order_estimate(
    dt_list,
    ensemble: int,
    seed: int,
    drift: float = 0.1,
    volatility: float = 1.5,
    x0: float = 1.0,
    t_end: float = 1.0,
):
    """Fitted strong order of EM against the exact geometric Brownian motion.

    Geometric Brownian motion is the built-in closed-form model:
    ``X_T = x0 exp((mu - sigma^2/2) T + sigma W_T)`` pathwise on the same
    driving noise as the EM recursion.  Returns ``(slope, intercept,
    errors)`` with errors the mean absolute endpoint deviations.

    The defaults keep the diffusion error dominant over the whole fitted
    range; with a large drift-to-volatility ratio the deterministic Euler
    error takes over and the fitted slope drifts toward one (which the
    zero-volatility degenerate case reaches exactly).
    """
    dts = sorted(float(d) for d in dt_list)
    if len(dts) < 3:
        raise ConfigurationError("need at least 3 step sizes for a strong-order fit")
    steps_fine = int(round(t_end / dts[0]))
    for d in dts:
        ratio = d / dts[0]
        # grids must nest so coarse increments are sums of fine ones
        if abs(round(ratio) - ratio) > 1e-9 or steps_fine % int(round(ratio)) != 0:
            raise ConfigurationError("step sizes must be nested divisors of t_end")
    rng = brownian.substream(seed, brownian.PURPOSE_ORACLE, 0, 0, 1)
    dw_fine = rng.standard_normal((ensemble, steps_fine)) * np.sqrt(dts[0])
    w_t = dw_fine.sum(axis=1)
    exact = x0 * np.exp((drift - 0.5 * volatility**2) * t_end + volatility * w_t)
    errors = []
    for d in dts:
        factor = int(round(d / dts[0]))
        dw = dw_fine.reshape(ensemble, steps_fine // factor, factor).sum(axis=2)
        x = np.full(ensemble, float(x0))
        for r in range(dw.shape[1]):
            x = x + drift * x * d + volatility * x * dw[:, r]
        errors.append(np.mean(np.abs(x - exact)))
    slope, intercept = convergence_fit(dts, errors)
    return slope, intercept, np.asarray(errors)


def _aligned_indices(times: np.ndarray, targets) -> np.ndarray:
    idx = []
    dt = times[1] - times[0]
    for t in targets:
        i = int(round((t - times[0]) / dt))
        if i < 0 or i >= len(times) or abs(times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ConfigurationError(f"output time {t} is not a grid node")
        idx.append(i)
    return np.asarray(idx)


def reference_oracle(
    model: OscillatorModel,
    grid_fine: TimeGrid,
    ensemble: int,
    seed: int,
    init: PathState,
    output_times=None,
) -> MomentSeries:
    """Fine-step classical-EM reference moments with standard errors.

    Stands in for a higher-order reference scheme: a small enough step (1e-3
    recommended) and a large ensemble give an independently trustworthy
    second-moment curve, downsampled to ``output_times`` (default: every
    fine node).  Increments are drawn per step in fixed path-major order so
    path ``p``'s noise never depends on the ensemble size beyond ``p``.
    """
    m, n = model.dof, model.channels
    times = grid_fine.macro_times()
    steps = grid_fine.macro_steps
    dt = grid_fine.dt
    sqrt_dt = np.sqrt(dt)
    out_idx = (
        np.arange(steps + 1) if output_times is None else _aligned_indices(times, output_times)
    )
    keep = np.zeros(steps + 1, dtype=bool)
    keep[out_idx] = True

    x1 = np.tile(init.x1, (ensemble, 1)).astype(float)
    x2 = np.tile(init.x2, (ensemble, 1)).astype(float)
    moments = np.zeros((steps + 1, 2 * m))
    ses = np.zeros((steps + 1, 2 * m))

    def record(node):
        stacked = np.hstack([x1, x2])
        mo, se = second_moments(stacked)
        moments[node] = mo
        ses[node] = se

    if keep[0]:
        record(0)
    for i in range(steps):
        dw = (
            brownian.substream(seed, brownian.PURPOSE_ORACLE, i).standard_normal((ensemble, n))
            * sqrt_dt
        )
        gnl = model.nonlinear(times[i], x1, x2)
        x1, x2 = em_substep_arrays(model, times[i], x1, x2, dt, dw, gnl)
        if not (np.isfinite(x1).all() and np.isfinite(x2).all()):
            raise NumericDomainError(f"reference oracle diverged at t={times[i + 1]}")
        if keep[i + 1]:
            record(i + 1)
    return MomentSeries(
        times=times[out_idx],
        second_moments=moments[out_idx],
        standard_errors=ses[out_idx],
        ensemble_size=ensemble,
    )
