import math

import numpy as np
import pytest

from passat.dynamics import (GEOPOTENTIAL_SCALE, OMEGA, DynamicsParams, VelocityField,
                             advective_derivative, from_planar, navier_stokes_tendency,
                             navier_stokes_terms, planar_advective_derivative, scalar_tendency,
                             to_planar)
from passat.errors import GridError, NumericalError
from passat.sphere_grid import Grid, ddphi, ddtheta


def rand_velocity(rng, shape, scale=0.005):
    return VelocityField(rng.uniform(-scale, scale, shape), rng.uniform(-scale, scale, shape))


def test_constants():
    assert OMEGA == 0.2618
    assert GEOPOTENTIAL_SCALE == pytest.approx(3600.0**2 / 6371000.0**2, rel=1e-15)
    assert DynamicsParams().mu == 1e-4
    with pytest.raises(ValueError):
        DynamicsParams(mu=-1.0)


def test_advective_derivative_trivial_cases(rng, toy_grid):
    v = rand_velocity(rng, toy_grid.shape)
    assert np.all(advective_derivative(np.full(toy_grid.shape, 2.0), v, toy_grid) == 0)
    u = rng.standard_normal(toy_grid.shape)
    assert np.all(advective_derivative(u, VelocityField.zeros(toy_grid.shape), toy_grid) == 0)


def test_solid_body_rotation_of_sine(standard_grid):
    g, c = standard_grid, 0.004
    _, phi = g.mesh()
    v = VelocityField.solid_body(g, c)
    out = advective_derivative(np.sin(phi), v, g)
    exact = c * np.cos(phi)
    rel = np.abs(out - exact)[1:-1].max() / np.abs(exact).max()
    assert rel <= 2 * g.d_phi**2


def test_planar_equivalence(rng, standard_grid):
    for _ in range(20):
        u = rng.standard_normal(standard_grid.shape)
        v = rand_velocity(rng, standard_grid.shape)
        sph = advective_derivative(u, v, standard_grid)
        pla = planar_advective_derivative(u, to_planar(v, standard_grid), standard_grid)
        assert np.max(np.abs(pla - sph)) <= 1e-12 * np.max(np.abs(sph))


def test_planar_round_trip_and_distortion(standard_grid):
    g = standard_grid
    v = VelocityField(np.zeros(g.shape), np.full(g.shape, 0.001))
    vp = to_planar(v, g)
    back = from_planar(vp, g)
    assert np.allclose(back.v_phi, v.v_phi, rtol=1e-15)
    i_eq, i_hi = 16, 29  # rows at 2.8125° and 75.9375°
    ratio = vp.v_phi[i_hi, 0] / vp.v_phi[i_eq, 0]
    assert ratio == pytest.approx(math.cos(g.lat[i_eq]) / math.cos(g.lat[i_hi]), rel=1e-14)
    assert ratio == pytest.approx(4.11060464521351616437720042665, rel=1e-12)
    assert math.cos(math.radians(2.8)) / math.cos(math.radians(74.5)) == pytest.approx(3.7375, abs=5e-4)
    assert np.all(planar_advective_derivative(np.ones(g.shape), vp, g) == 0)


def test_advection_scales_with_velocity(rng, toy_grid):
    u = rng.standard_normal(toy_grid.shape)
    v = rand_velocity(rng, toy_grid.shape)
    base = advective_derivative(u, v, toy_grid)
    for alpha in (0.5, 4.0):
        assert np.array_equal(advective_derivative(u, v.scaled(alpha), toy_grid), alpha * base)


def test_zonal_equivariance(rng, toy_grid):
    g = toy_grid
    u, z = rng.standard_normal((2,) + g.shape)
    v = rand_velocity(rng, g.shape)
    p = DynamicsParams()
    k = 3
    roll = lambda x: np.roll(x, k, axis=-1)  # noqa: E731
    vr = VelocityField(roll(v.v_theta), roll(v.v_phi))
    assert np.array_equal(advective_derivative(roll(u), vr, g), roll(advective_derivative(u, v, g)))
    a = navier_stokes_tendency(vr, roll(z) * 1e-4, g, p)
    b = navier_stokes_tendency(v, z * 1e-4, g, p)
    assert np.array_equal(a[0], roll(b[0])) and np.array_equal(a[1], roll(b[1]))


def test_rest_state_is_steady(toy_grid):
    z = np.full(toy_grid.shape, 0.7)
    dvt, dvp = navier_stokes_tendency(VelocityField.zeros(toy_grid.shape), z, toy_grid, DynamicsParams())
    assert np.all(dvt == 0) and np.all(dvp == 0)


def test_only_pressure_acts_at_rest(rng, toy_grid):
    g = toy_grid
    z = rng.standard_normal(g.shape) * 1e-3
    dvt, dvp = navier_stokes_tendency(VelocityField.zeros(g.shape), z, g, DynamicsParams())
    assert np.array_equal(dvt, -ddtheta(z, g))
    assert np.array_equal(dvp, -(g.column(1 / g.cos_lat) * ddphi(z, g)))


def _pointwise_terms(v, z, g, p):
    """Scalar double-loop evaluation of every left-hand-side term."""
    dvt_th, dvt_ph = ddtheta(v.v_theta, g), ddphi(v.v_theta, g)
    dvp_th, dvp_ph = ddtheta(v.v_phi, g), ddphi(v.v_phi, g)
    dz_th, dz_ph = ddtheta(z, g), ddphi(z, g)
    th, ph = {}, {}
    for name in ("advection_theta", "advection_phi", "curvature", "pressure", "coriolis", "friction"):
        th[name], ph[name] = np.empty(g.shape), np.empty(g.shape)
    for i in range(g.n_lat):
        t = g.lat[i]
        c, s, tn = math.cos(t), math.sin(t), math.tan(t)
        for j in range(g.n_lon):
            a, b = v.v_theta[i, j], v.v_phi[i, j]
            th["advection_theta"][i, j] = a * dvt_th[i, j]
            th["advection_phi"][i, j] = b / c * dvt_ph[i, j]
            th["curvature"][i, j] = b * b * tn
            th["pressure"][i, j] = dz_th[i, j]
            th["coriolis"][i, j] = 2 * p.omega * b * s
            th["friction"][i, j] = p.mu * a / (c * c)
            ph["advection_theta"][i, j] = a * dvp_th[i, j]
            ph["advection_phi"][i, j] = b / c * dvp_ph[i, j]
            ph["curvature"][i, j] = -b * a * tn
            ph["pressure"][i, j] = dz_ph[i, j] / c
            ph["coriolis"][i, j] = -2 * p.omega * a * s
            ph["friction"][i, j] = p.mu * b / (c * c)
    return th, ph


def test_every_labelled_term_matches_pointwise_oracle(rng, toy_grid):
    g = toy_grid
    v = rand_velocity(rng, g.shape)
    z = rng.standard_normal(g.shape) * 1e-3
    p = DynamicsParams(mu=0.01)
    got_th, got_ph = navier_stokes_terms(v, z, g, p)
    ref_th, ref_ph = _pointwise_terms(v, z, g, p)
    assert set(got_th) == set(ref_th) and len(got_th) == 6
    for name in ref_th:
        for got, ref in ((got_th[name], ref_th[name]), (got_ph[name], ref_ph[name])):
            scale = max(np.abs(ref).max(), 1e-300)
            assert np.max(np.abs(got - ref)) <= 1e-12 * scale, name
    dvt, dvp = navier_stokes_tendency(v, z, g, p)
    assert np.allclose(dvt, -sum(ref_th.values()), rtol=0, atol=1e-15)
    assert np.allclose(dvp, -sum(ref_ph.values()), rtol=0, atol=1e-15)


def _uniform(g, a, b):
    return VelocityField(np.full(g.shape, a), np.full(g.shape, b))


def test_term_isolation_by_input_choice(toy_grid):
    g = toy_grid
    zero = np.zeros(g.shape)
    lat = g.column(g.lat)
    # friction alone: uniform meridional flow, no rotation
    dvt, dvp = navier_stokes_tendency(_uniform(g, 0.003, 0.0), zero, g, DynamicsParams(omega=0.0, mu=0.02))
    assert np.allclose(dvt, -0.02 * 0.003 / np.cos(lat) ** 2, rtol=1e-12, atol=0)
    assert np.all(dvp == 0)
    # Coriolis alone in the zonal equation
    dvt, dvp = navier_stokes_tendency(_uniform(g, 0.003, 0.0), zero, g, DynamicsParams(mu=0.0))
    assert np.all(dvt == 0)
    assert np.allclose(dvp, 2 * OMEGA * 0.003 * np.sin(lat), rtol=1e-12, atol=0)
    # curvature: uniform zonal flow without rotation or friction
    dvt, dvp = navier_stokes_tendency(_uniform(g, 0.0, 0.004), zero, g, DynamicsParams(omega=0.0, mu=0.0))
    assert np.allclose(dvt, -(0.004**2) * np.tan(lat), rtol=1e-12, atol=0)
    assert np.all(dvp == 0)
    dvt, dvp = navier_stokes_tendency(_uniform(g, 0.002, 0.004), zero, g, DynamicsParams(omega=0.0, mu=0.0))
    assert np.allclose(dvp, 0.002 * 0.004 * np.tan(lat), rtol=1e-12, atol=0)
    # meridional self-advection of a ramp
    vt = np.broadcast_to(0.001 * lat, g.shape).copy()
    v = VelocityField(vt, np.zeros(g.shape))
    dvt, dvp = navier_stokes_tendency(v, zero, g, DynamicsParams(omega=0.0, mu=0.0))
    assert np.allclose(dvt, -vt * 0.001, rtol=1e-12, atol=1e-20)
    assert np.all(dvp == 0)


def balanced_zonal_flow(g: Grid, rate: float, omega: float = OMEGA):
    """Zonal wind in exact discrete balance with a smooth geopotential.

    Picks z from the continuous balance of rigid rotation, then solves the
    per-row quadratic v² tanθ + 2ω v sinθ + ∂z/∂θ = 0 with the discrete
    derivative, keeping the root nearest the rigid-rotation wind.
    """
    z_row = -(rate**2 + 2 * omega * rate) * 0.5 * np.sin(g.lat) ** 2
    z = np.broadcast_to(g.column(z_row), g.shape).copy()
    dz = ddtheta(z, g)[:, 0]
    v = np.empty(g.n_lat)
    for i, t in enumerate(g.lat):
        a, b, c = math.tan(t), 2 * omega * math.sin(t), dz[i]
        roots = np.roots([a, b, c]).real
        v[i] = roots[np.argmin(np.abs(roots - rate * math.cos(t)))]
    return VelocityField(np.zeros(g.shape), np.broadcast_to(g.column(v), g.shape).copy()), z


def test_geostrophic_balance(standard_grid):
    v, z = balanced_zonal_flow(standard_grid, 0.004)
    dvt, dvp = navier_stokes_tendency(v, z, standard_grid, DynamicsParams(mu=0.0))
    assert np.max(np.abs(dvt)) < 1e-10
    # zonal residual: the flow and z are zonally uniform, so nothing is left
    assert np.max(np.abs(dvp)) < 1e-15


def test_scalar_tendency(rng, toy_grid):
    u = rng.standard_normal(toy_grid.shape)
    v = rand_velocity(rng, toy_grid.shape)
    inter = rng.standard_normal(toy_grid.shape)
    out = scalar_tendency(u, v, inter, toy_grid)
    assert np.array_equal(out, inter - advective_derivative(u, v, toy_grid))
    planar = scalar_tendency(u, to_planar(v, toy_grid), inter, toy_grid, planar=True)
    assert np.allclose(planar, out, atol=1e-14)


def test_errors(toy_grid):
    v = VelocityField.zeros(toy_grid.shape)
    with pytest.raises(GridError):
        advective_derivative(np.zeros((4, 4)), v, toy_grid)
    with pytest.raises(GridError):
        VelocityField(np.zeros((2, 2)), np.zeros((3, 3)))
    z = np.zeros(toy_grid.shape)
    z[1, 1] = np.nan
    with pytest.raises(NumericalError) as err:
        navier_stokes_tendency(v, z, toy_grid, DynamicsParams())
    assert err.value.field == "z"
