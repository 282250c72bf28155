import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nmqsd.errors import SingularNormalizationError
from nmqsd.kernels import TimeGrid, kernel_from_bath, make_kernel, make_spectral_density
from nmqsd.memory import ClassicalSolution, solve_classical_motion, trapezoid_weights
from nmqsd.qbm import (drift_closed_form, drift_integral_route, evolve_sse_coeffs,
                       klmn_tables, me_coefficients, singular_mask, wxyz_closed_form)

OMEGA = 1.0


def zero_kernel(grid):
    return make_kernel(make_spectral_density("ohmic-exp", 0.0, 1.0), 0.0, grid)


@pytest.fixture(scope="module")
def sse4(bath4):
    grid = TimeGrid.from_t_max(3.0, 0.01)
    return evolve_sse_coeffs(kernel_from_bath(bath4, grid), OMEGA, 1.0, grid)


def test_sse_boundary_rows(sse4):
    n = np.arange(sse4.grid.n_points)
    assert np.all(sse4.f[n, n] == 1.0)
    assert np.all(sse4.g[n, n] == 0.0)
    last = sse4.grid.n_points - 1
    j = sse4.j_last
    # j(t, t, s') = 0 and j(t, s, t) = -g(t, s)
    assert np.all(j[last, :] == 0)
    assert np.array_equal(j[:, last], -sse4.g[last, :])
    assert not sse4.unstable


def test_sse_g_equation_residual(sse4):
    # central difference in t of g(t, s) against -Omega f - i g G at fixed s
    dt = sse4.grid.dt
    s_idx = 50
    rows = np.arange(s_idx + 2, sse4.grid.n_points - 1)
    dg = (sse4.g[rows + 1, s_idx] - sse4.g[rows - 1, s_idx]) / (2 * dt)
    rhs = -OMEGA * sse4.f[rows, s_idx] - 1j * sse4.g[rows, s_idx] * sse4.G[rows]
    assert np.max(np.abs(dg - rhs)) < 1e-3


def test_sse_zero_coupling_analytic_and_order():
    errs = []
    for dt in (0.02, 0.01):
        grid = TimeGrid.from_t_max(2.0, dt)
        c = evolve_sse_coeffs(zero_kernel(grid), OMEGA, 1.0, grid)
        t = grid.t
        tri = t[:, None] >= t[None, :]
        lag = t[:, None] - t[None, :]
        ef = np.max(np.abs(np.where(tri, c.f - np.cos(OMEGA * lag), 0)))
        eg = np.max(np.abs(np.where(tri, c.g + np.sin(OMEGA * lag), 0)))
        errs.append(max(ef, eg))
        assert not np.any(c.F) and not np.any(c.G) and not np.any(c.J_int)
        # j is seeded by the boundary column: j(t, s, s') = sin Omega (s' - s) for s' >= s
        jan = np.where(t[None, :] >= t[:, None], np.sin(OMEGA * (t[None, :] - t[:, None])), 0)
        assert np.max(np.abs(c.j_last - jan)) < 2 * errs[-1] + 1e-12
        # G = 0 relation: d_t g(t, s) = -Omega f(t, s)
        dg = np.gradient(c.g[:, 0], dt, edge_order=2)
        assert np.max(np.abs(dg + OMEGA * c.f[:, 0])) < 50 * dt ** 2
    assert np.log2(errs[0] / errs[1]) >= 1.9


def test_sse_weak_coupling_close_to_free():
    grid = TimeGrid.from_t_max(1.0, 0.01)
    K = make_kernel(make_spectral_density("ohmic-exp", 0.01, 2.0), 0.0, grid)
    c = evolve_sse_coeffs(K, OMEGA, 1.0, grid)
    lag = grid.t[-1] - grid.t
    assert np.max(np.abs(c.f[-1] - np.cos(OMEGA * lag))) < 0.01 * grid.t_max * 2


def test_sse_csv(sse4, tmp_path):
    sse4.to_csv(tmp_path / "fg.csv")
    assert (tmp_path / "fg.csv").read_text().splitlines()[0] == "t,re_F,im_F,re_G,im_G"


@pytest.fixture(scope="module")
def me4(bath4):
    grid = TimeGrid.from_t_max(4.0, 0.01)
    K = kernel_from_bath(bath4, grid)
    cl = solve_classical_motion(K, OMEGA, 1.0, grid)
    return K, cl, me_coefficients(K, cl, OMEGA, 1.0, grid)


def test_wxyz_zero_coupling():
    grid = TimeGrid.from_t_max(3.0, 0.005)
    K = zero_kernel(grid)
    cl = solve_classical_motion(K, OMEGA, 1.0, grid)
    n = grid.n_points - 1
    w, x, y, z = wxyz_closed_form(cl, K, OMEGA, 1.0, grid, n)
    lag = grid.t[n] - grid.t
    tol = 1e-4
    assert np.max(np.abs(w - np.cos(lag))) < tol
    assert np.max(np.abs(x + np.sin(lag))) < tol
    assert np.max(np.abs(y - np.cos(lag))) < tol
    assert np.max(np.abs(z - np.sin(lag))) < tol
    assert not np.any(y.imag) and not np.any(z.imag)


def test_wxyz_final_values(me4):
    _, _, me = me4
    n = np.arange(1, me.grid.n_points)
    assert np.allclose(me.w[n, n], 1.0) and np.allclose(me.x[n, n], 0.0, atol=1e-14)
    assert np.allclose(me.y[n, n], 1.0) and np.allclose(me.z[n, n], 0.0, atol=1e-14)
    k, l, m, nn = me.k, me.l, me.m, me.n
    assert np.allclose(k[n, n], 1) and np.allclose(l[n, n], 0, atol=1e-14)
    assert np.allclose(m[n, n], 0, atol=1e-14) and np.allclose(nn[n, n], 0, atol=1e-14)
    # slope conditions: d_s w = 0 and d_s z = -Omega at s = t
    i = me.grid.n_points - 1
    dt = me.grid.dt
    ds_w = (3 * me.w[i, i] - 4 * me.w[i, i - 1] + me.w[i, i - 2]) / (2 * dt)
    ds_z = (3 * me.z[i, i] - 4 * me.z[i, i - 1] + me.z[i, i - 2]) / (2 * dt)
    assert abs(ds_w) < 1e-3 and abs(ds_z + OMEGA) < 1e-3


def test_y_imag_satisfies_inhomogeneous_equation(me4):
    K, cl, me = me4
    grid, dt = me.grid, me.grid.dt
    i = grid.n_points - 1
    yR, yI = me.y[i, :i + 1].real, me.y[i, :i + 1].imag
    tw = trapezoid_weights(i, dt)
    nu = K.nu
    src = np.array([2.0 * np.sum(tw * nu[np.abs(np.arange(i + 1) - s)] * yR)
                    for s in range(i + 1)])
    eta = K.eta
    mem = np.array([2.0 * (trapezoid_weights(s, dt) @ (eta[s::-1] * yI[:s + 1]))
                    for s in range(i + 1)])
    d2 = np.gradient(np.gradient(yI, dt, edge_order=2), dt, edge_order=2)
    res = d2 + OMEGA ** 2 * yI + mem - src
    assert np.max(np.abs(res[3:-3])) < 1e-3 * np.max(np.abs(src))


def test_me_coefficients_basic_properties(me4):
    _, _, me = me4
    for arr in (me.a_t, me.b_t, me.c_pq, me.d_qq):
        assert arr.dtype == float and arr[0] == 0.0 and np.all(np.isfinite(arr))
    assert not np.any(me.singular)
    k, l, m, n = klmn_tables(me.w, me.x, me.y, me.z)
    assert np.array_equal(k, me.k) and np.array_equal(n, me.n)


def test_me_zero_coupling_all_zero():
    grid = TimeGrid.from_t_max(2.0, 0.02)
    K = zero_kernel(grid)
    cl = solve_classical_motion(K, OMEGA, 1.0, grid)
    me = me_coefficients(K, cl, OMEGA, 1.0, grid, store_tables=False)
    for arr in (me.a_t, me.b_t, me.c_pq, me.d_qq):
        assert not np.any(arr)
    a, b = drift_closed_form(cl, OMEGA, 1.0, np.arange(grid.n_points))
    assert np.max(np.abs(a)) < 1e-3 and np.max(np.abs(b)) < 1e-3


def test_dual_route_drift(bath4):
    grid = TimeGrid.from_t_max(6.0, 0.005)
    K = kernel_from_bath(bath4, grid)
    cl = solve_classical_motion(K, OMEGA, 1.0, grid)
    ok = ~singular_mask(cl)
    a1, b1 = drift_integral_route(K, cl, OMEGA, 1.0, grid)
    a2, b2 = drift_closed_form(cl, OMEGA, 1.0, np.flatnonzero(ok))
    assert np.max(np.abs(a1[ok] - a2)) <= 1e-4 * np.max(np.abs(a2))
    assert np.max(np.abs(b1[ok] - b2)) <= 1e-4 * np.max(np.abs(b2))
    # the integral route equals the full coefficient integrals
    me = me_coefficients(K, cl, OMEGA, 1.0, grid, store_tables=False)
    assert np.allclose(me.a_t, a1, atol=1e-12) and np.allclose(me.b_t, b1, atol=1e-12)
    # small-t limit
    assert abs(a2[1]) < 1e-3 and abs(b2[1]) < 1e-3


def test_singular_normalization_is_reported():
    grid = TimeGrid.from_t_max(1.0, 0.1)
    q = np.sin(grid.t)
    qd = np.cos(grid.t)
    qd[5] = 0.0
    q[5] = 0.0  # forces D(t_5) = 0
    cl = ClassicalSolution(grid, 1.0, q, qd, -q, -qd)
    K = zero_kernel(grid)
    with pytest.raises(SingularNormalizationError) as info:
        me_coefficients(K, cl, 1.0, 1.0, grid)
    assert info.value.t == pytest.approx(0.5)
    flagged = me_coefficients(K, cl, 1.0, 1.0, grid, on_singular="flag")
    assert flagged.singular[5] and np.isnan(flagged.a_t[5])
    with pytest.raises(SingularNormalizationError):
        drift_closed_form(cl, 1.0, 1.0, 5)


def test_me_csv(me4, tmp_path):
    me4[2].to_csv(tmp_path / "abcd.csv")
    assert (tmp_path / "abcd.csv").read_text().splitlines()[0] == "t,a,b,c_pq,d_qq"


cplx = arrays(np.complex128, (3, 4), elements=st.complex_numbers(max_magnitude=1e3,
                                                                  allow_nan=False))


@settings(max_examples=30, deadline=None)
@given(w=cplx, x=cplx, y=cplx, z=cplx)
def test_klmn_round_trip(w, x, y, z):
    k, l, m, n = klmn_tables(w, x, y, z)
    assert np.allclose(k + m, w) and np.allclose(k - m, y)
    assert np.allclose(l + n, x) and np.allclose(n - l, z)


def test_klmn_zero_coupling_structure():
    s = np.linspace(0, 2, 7)
    w = y = np.cos(s)
    x = -np.sin(s)
    z = np.sin(s)
    k, l, m, n = klmn_tables(w, x, y, z)
    assert np.array_equal(k, w) and not np.any(m) and np.array_equal(l, x) and not np.any(n)


def test_sign_change_of_D_is_singular():
    grid = TimeGrid.from_t_max(10.0, 0.01)
    from nmqsd.kernels import DiscreteBath
    K = kernel_from_bath(DiscreteBath.from_modes([0.5], [0.3]), grid)
    cl = solve_classical_motion(K, OMEGA, 1.0, grid)
    mask = singular_mask(cl)
    D = cl.q_dot ** 2 - cl.q * cl.q_ddot
    assert mask.any() and np.all(np.abs(D[mask]) < np.max(np.abs(D)))
    with pytest.raises(SingularNormalizationError) as info:
        me_coefficients(K, cl, OMEGA, 1.0, grid, store_tables=False)
    assert 0 < info.value.t < 10.0
    short = TimeGrid.from_t_max(3.0, 0.01)
    flagged = me_coefficients(kernel_from_bath(DiscreteBath.from_modes([0.5], [0.3]), short),
                              solve_classical_motion(
                                  kernel_from_bath(DiscreteBath.from_modes([0.5], [0.3]), short),
                                  OMEGA, 1.0, short), OMEGA, 1.0, short, store_tables=False,
                              on_singular="flag")
    assert np.array_equal(np.isnan(flagged.a_t), flagged.singular)
