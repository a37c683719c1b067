import numpy as np
import pytest

import neemsim as ns
from neemsim import girsanov
from neemsim.core import ConfigurationError, TimeGrid
from neemsim.em import reference_oracle
from neemsim.models import rvp_stationary_density


def test_rvp_paper_configuration():
    m = ns.build_rvp(ns.RvpParams(h1=1.0, h3=1.0, sigma=1.0))
    assert m.parameters == {"h1": 1.0, "h3": 1.0, "sigma": 1.0}
    assert m.dof == 1 and m.channels == 1
    assert np.array_equal(m.linear_drift, [[0.0, 1.0], [-1.0, -1.0]])


def test_rvp_gamma_derivative_value():
    m = ns.build_rvp(ns.RvpParams(1, 1, 1))
    d = m.gamma_derivatives.dx2(0.0, np.array([0.1]), np.array([0.2]), None, None)
    assert d[0, 0] == pytest.approx(-0.13)


def test_rvp_zero_cubic_coefficient_is_linear():
    m = ns.build_rvp(ns.RvpParams(h1=1.0, h3=0.0))
    rng = np.random.default_rng(1)
    x1 = rng.uniform(-2, 2, (10, 1))
    x2 = rng.uniform(-2, 2, (10, 1))
    assert np.all(m.nonlinear(0.0, x1, x2) == 0.0)
    b = m.gamma_derivatives
    for name in ("dx1", "dx2", "dx2dx2", "dx1dx2"):
        assert np.all(getattr(b, name)(0.0, x1, x2, x1, x2) == 0.0)


def test_rvp_invariants():
    with pytest.raises(ConfigurationError):
        ns.RvpParams(sigma=0.0)
    with pytest.raises(ConfigurationError):
        ns.RvpParams(h1=-1.0)


def test_dvp_paper_configuration():
    m = ns.build_dvp(ns.DvpParams(mass=1, damping=1.5, stiffness=60, alpha=2, rho=0.5))
    assert m.state_dependent_diffusion
    assert np.array_equal(m.linear_drift, [[0.0, 1.0], [60.0, -1.5]])
    f = m.diffusion_at(0.0, np.array([2.0]), np.array([0.0]))
    assert f[0, 0] == pytest.approx(1.0)


def test_dvp_gamma_value_and_linear_limit():
    m = ns.build_dvp(ns.DvpParams(alpha=2, rho=0.5, mass=1))
    fro = ns.frozen_nonlinear(m, 0.0, ns.PathState([1.0], [0.0], 0.0))
    assert ns.gamma(m, 0.0, ns.PathState([2.0], [0.3], 0.0), fro) == pytest.approx([-14.0])
    lin = ns.build_dvp(ns.DvpParams(alpha=0.0))
    fro = ns.frozen_nonlinear(lin, 0.0, ns.PathState([1.0], [0.0], 0.0))
    assert ns.gamma(lin, 0.0, ns.PathState([2.0], [0.3], 0.0), fro) == pytest.approx([0.0])


def test_two_dof_paper_configuration():
    m = ns.build_two_dof(ns.TwoDofParams(c1=7.75, c2=7.75, k1=100, k2=100,
                                         alpha=100, beta=100, sigma1=1, sigma2=1))
    assert m.dof == 2 and m.channels == 2
    expected = np.array([
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [-200.0, 100.0, -15.5, 7.75],
        [100.0, -100.0, 7.75, -7.75],
    ])
    assert np.array_equal(m.linear_drift, expected)


def test_two_dof_gamma2_value_and_degenerate():
    m = ns.build_two_dof(ns.TwoDofParams(beta=100, sigma2=1))
    fro = ns.frozen_nonlinear(m, 0.0, ns.PathState([0.0, 0.0], [0.0, 0.0], 0.0))
    g = ns.gamma(m, 0.0, ns.PathState([0.0, 0.1], [0.0, 0.0], 0.0), fro)
    assert g == pytest.approx([0.0, -0.1])
    lin = ns.build_two_dof(ns.TwoDofParams(alpha=0.0, beta=0.0))
    rng = np.random.default_rng(2)
    s = ns.PathState(rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2), 0.0)
    assert ns.gamma(lin, 0.0, s, ns.frozen_nonlinear(lin, 0.0, ns.PathState([1.0, 1.0], [1.0, 1.0], 0.0))) == pytest.approx([0.0, 0.0])


# --- derivative audits -------------------------------------------------------

AUDIT_MODELS = [
    ("rvp", ns.build_rvp(ns.RvpParams()), False),
    ("two_dof", ns.build_two_dof(ns.TwoDofParams()), False),
    ("dvp", ns.build_dvp(ns.DvpParams()), True),
]


@pytest.mark.parametrize("name,model,on_diagonal", AUDIT_MODELS)
def test_gamma_derivatives_match_finite_differences(name, model, on_diagonal):
    # relative tolerance 1e-6 at 100 random points (absolute floor for the
    # entries the derivations declare exactly zero)
    fd = girsanov.finite_difference_bundle(model)
    rng = np.random.default_rng(42)
    for _ in range(100):
        x1 = rng.uniform(0.5, 1.5, model.dof)
        x2 = rng.uniform(-1.0, 1.0, model.dof)
        if on_diagonal:
            fx1, fx2 = x1, x2
        else:
            fx1 = rng.uniform(0.5, 1.5, model.dof)
            fx2 = rng.uniform(-1.0, 1.0, model.dof)
        for attr in ("dx1", "dx2", "dx2dx2", "dx1dx2"):
            a = np.asarray(getattr(model.gamma_derivatives, attr)(0.0, x1, x2, fx1, fx2), float)
            b = np.asarray(getattr(fd, attr)(0.0, x1, x2, fx1, fx2), float)
            budget = 1e-6 * np.maximum(np.abs(a), np.abs(b)) + 1e-7
            assert (np.abs(a - b) <= budget).all(), f"{name}.{attr}"


def test_dvp_quotient_variant_matches_fd_off_diagonal():
    m = ns.build_dvp(ns.DvpParams(), gamma_derivative_variant="quotient")
    fd = girsanov.finite_difference_bundle(m)
    rng = np.random.default_rng(8)
    for _ in range(50):
        x1 = rng.uniform(0.5, 2.0, 1)
        fx1 = rng.uniform(0.5, 2.0, 1)
        x2 = rng.uniform(-1, 1, 1)
        a = m.gamma_derivatives.dx1(0.0, x1, x2, fx1, x2)
        b = fd.dx1(0.0, x1, x2, fx1, x2)
        assert np.allclose(a, b, rtol=1e-6, atol=1e-9)


def test_dvp_tabulated_variant_discrepancy_documented():
    # off the diagonal the tabulated dx1 misses the prefactor quotient-rule
    # term, which equals -gamma/x1; on the diagonal both variants coincide
    tab = ns.build_dvp(ns.DvpParams())
    quo = ns.build_dvp(ns.DvpParams(), gamma_derivative_variant="quotient")
    x1 = np.array([1.4])
    fx1 = np.array([0.9])
    x2 = np.array([0.2])
    fro = tab.nonlinear(0.0, fx1, x2)
    g = girsanov.gamma_arrays(tab, 0.0, x1, x2, fro)
    a = tab.gamma_derivatives.dx1(0.0, x1, x2, fx1, x2)[0, 0]
    b = quo.gamma_derivatives.dx1(0.0, x1, x2, fx1, x2)[0, 0]
    assert a != pytest.approx(b)
    assert b - a == pytest.approx(-g[0] / x1[0])
    a_diag = tab.gamma_derivatives.dx1(0.0, x1, x2, x1, x2)[0, 0]
    b_diag = quo.gamma_derivatives.dx1(0.0, x1, x2, x1, x2)[0, 0]
    assert a_diag == pytest.approx(b_diag, rel=1e-12)


def test_appendix_zero_entries_are_exact_zeros():
    rng = np.random.default_rng(3)
    x1 = rng.uniform(0.5, 1.5, (20, 1))
    x2 = rng.uniform(-1, 1, (20, 1))
    dvp = ns.build_dvp(ns.DvpParams())
    assert np.all(dvp.gamma_derivatives.dx2(0.0, x1, x2, x1, x2) == 0.0)
    assert np.all(dvp.gamma_derivatives.dx2dx2(0.0, x1, x2, x1, x2) == 0.0)
    assert np.all(dvp.gamma_derivatives.dx1dx2(0.0, x1, x2, x1, x2) == 0.0)

    td = ns.build_two_dof(ns.TwoDofParams())
    y1 = rng.uniform(0.5, 1.5, (20, 2))
    y2 = rng.uniform(-1, 1, (20, 2))
    assert np.all(td.gamma_derivatives.dx2dx2(0.0, y1, y2, y1, y2) == 0.0)
    # channel 2 never depends on the second velocity
    assert np.all(td.gamma_derivatives.dx2(0.0, y1, y2, y1, y2)[:, 1, :] == 0.0)
    assert np.all(td.gamma_derivatives.dx1dx2(0.0, y1, y2, y1, y2)[:, 1] == 0.0)


def test_phi_term_activity_matches_derivations():
    # every term the derivations keep is active on generic inputs and every
    # term they drop is identically zero
    rng = np.random.default_rng(12)

    def terms(model):
        x1 = rng.uniform(0.8, 1.2, model.dof)
        x2 = rng.uniform(0.5, 1.0, model.dof)
        fx1 = rng.uniform(0.8, 1.2, model.dof)
        fx2 = rng.uniform(0.5, 1.0, model.dof)
        bt = rng.uniform(0.5, 1.0, model.channels)
        fro = model.nonlinear(0.0, fx1, fx2)
        _, parts = girsanov.phi_arrays(
            model, 0.0, x1, x2, bt, fx1, fx2, fro, return_terms=True
        )
        return parts

    parts = terms(ns.build_rvp(ns.RvpParams()))
    for name, val in parts.items():
        assert np.abs(val).max() > 0.0, f"rvp {name}"

    parts = terms(ns.build_dvp(ns.DvpParams()))
    active = {"dx1_x2", "half_gamma_sq"}
    for name, val in parts.items():
        if name in active:
            assert np.abs(val).max() > 0.0, f"dvp {name}"
        else:
            assert np.all(val == 0.0), f"dvp {name}"

    parts = terms(ns.build_two_dof(ns.TwoDofParams()))
    ch1_active = {"dx2_f", "dx1_x2", "dx2_drift", "dx1dx2_x2", "half_gamma_sq"}
    for name, val in parts.items():
        if name in ch1_active:
            assert abs(val[0]) > 0.0, f"two_dof ch1 {name}"
        else:
            assert val[0] == 0.0, f"two_dof ch1 {name}"
    for name, val in parts.items():
        if name in {"dx1_x2", "half_gamma_sq"}:
            assert abs(val[1]) > 0.0, f"two_dof ch2 {name}"
        else:
            assert val[1] == 0.0, f"two_dof ch2 {name}"


# --- stationary oracle -------------------------------------------------------

def test_stationary_symmetry():
    ex2, ev2 = ns.rvp_stationary_moments(ns.RvpParams(1.0, 1.0, 1.0))
    assert ex2 == pytest.approx(ev2, rel=1e-9)


def test_stationary_gaussian_limit():
    # h3 -> 0: Gaussian with variance sigma^2/(2 h1) = 0.5 at unit parameters
    ex2, ev2 = ns.rvp_stationary_moments(ns.RvpParams(1.0, 1e-12, 1.0))
    assert ex2 == pytest.approx(0.5, rel=1e-4)
    assert ev2 == pytest.approx(0.5, rel=1e-4)


def test_stationary_matches_radial_reduction():
    # independent 1-D oracle: with H = (x1^2+x2^2)/2 the plane measure is
    # 2 pi dH, so E[X^2] = E[H] under the density exp(-2(h1 H + h3 H^2)/s^2)
    p = ns.RvpParams(1.0, 1.0, 1.0)
    hs = np.linspace(0.0, 14.0, 200_001)
    w = np.exp(-(2.0 / p.sigma**2) * (p.h1 * hs + p.h3 * hs**2))
    trapz = getattr(np, "trapezoid", np.trapz)
    expected = trapz(hs * w, hs) / trapz(w, hs)
    ex2, ev2 = ns.rvp_stationary_moments(p)
    assert ex2 == pytest.approx(expected, rel=1e-6)


def test_stationary_density_solves_forward_equation():
    # plug the density into the stationary forward operator at random points
    p = ns.RvpParams(1.3, 0.7, 0.9)
    h = 1e-4
    rng = np.random.default_rng(5)

    def dens(x1, x2):
        return rvp_stationary_density(p, x1, x2)

    for _ in range(50):
        x1, x2 = rng.uniform(-1.5, 1.5, 2)
        d_x1 = (dens(x1 + h, x2) - dens(x1 - h, x2)) / (2 * h)
        d_x2 = (dens(x1, x2 + h) - dens(x1, x2 - h)) / (2 * h)
        d_x2x2 = (dens(x1, x2 + h) - 2 * dens(x1, x2) + dens(x1, x2 - h)) / h**2
        damp = p.h1 + p.h3 * (x1**2 + x2**2)
        b2 = -x1 - damp * x2
        db2_dx2 = -damp - 2 * p.h3 * x2**2
        residual = (
            -x2 * d_x1
            - (db2_dx2 * dens(x1, x2) + b2 * d_x2)
            + 0.5 * p.sigma**2 * d_x2x2
        )
        assert abs(residual) < 5e-6 * max(dens(x1, x2), 1e-3)


@pytest.mark.slow
def test_stationary_cross_validated_by_long_simulation():
    # mandatory dual-oracle check: quadrature vs a long fine-step ensemble
    p = ns.RvpParams(1.0, 1.0, 1.0)
    ex2, ev2 = ns.rvp_stationary_moments(p)
    model = ns.build_rvp(p)
    grid = TimeGrid(0.0, 200.0, 200_000, 1)
    series = reference_oracle(
        model, grid, ensemble=1000, seed=31,
        init=ns.PathState([0.01], [0.01], 0.0),
        output_times=np.arange(100.0, 201.0, 10.0),
    )
    sim_x = series.second_moments[:, 0].mean()
    sim_v = series.second_moments[:, 1].mean()
    # time-averaged standard error from batch scatter across the outputs
    se_x = series.second_moments[:, 0].std(ddof=1) / np.sqrt(len(series.times))
    se_v = series.second_moments[:, 1].std(ddof=1) / np.sqrt(len(series.times))
    assert abs(sim_x - ex2) < 3 * max(se_x, 1e-3)
    assert abs(sim_v - ev2) < 3 * max(se_v, 1e-3)


def test_dvp_variant_validation():
    with pytest.raises(ConfigurationError):
        ns.build_dvp(ns.DvpParams(), gamma_derivative_variant="bogus")
    with pytest.raises(ConfigurationError):
        ns.DvpParams(mass=0.0)
    with pytest.raises(ConfigurationError):
        ns.TwoDofParams(sigma1=0.0)
