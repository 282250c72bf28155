"""Coefficients of the exact quantum Brownian motion SSE and master equation.

Two independent constructions live here:

* :func:`evolve_sse_coeffs` advances the functions ``f(t,s)``, ``g(t,s)`` and
  ``j(t,s,s')`` of the O-operator ansatz forward in ``t`` on a triangular grid
  and returns the integrated drift functions ``F``, ``G`` and ``J_int``.
* :func:`me_coefficients` builds the master-equation coefficients
  ``a, b, c_pq, d_qq`` from the classical damped trajectory ``q(s)`` and the
  closed forms for ``w, x, y, z``. :func:`drift_closed_form` gives ``a, b``
  directly from ``q`` and its derivatives as a cross-check.

The master-equation coefficient ``c_pq`` is unrelated to the RWA amplitude
``amp_c`` in :mod:`nmqsd.memory`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import toeplitz

from nmqsd.errors import InvalidParameterError, SingularNormalizationError
from nmqsd.io import write_csv
from nmqsd.kernels import BathKernel, TimeGrid
from nmqsd.memory import ClassicalSolution, trapezoid_weights

EPS_DIV = 1e-12
OVERFLOW = 1e12


@dataclass(frozen=True)
class QbmSseCoeffs:
    """Triangular tables ``f[t_i, s_j]``, ``g[t_i, s_j]`` (zero for ``j > i``),
    series ``F``, ``G`` and ``J_int[t_i, s'_k]``.

    ``j_last`` is ``j(t, s, s')`` at the final grid time only.
    """

    grid: TimeGrid
    Omega: float
    mass_M: float
    hbar: float
    f: np.ndarray
    g: np.ndarray
    F: np.ndarray
    G: np.ndarray
    J_int: np.ndarray
    j_last: np.ndarray
    unstable: bool = False

    def to_csv(self, path, meta=None):
        write_csv(path, ["t", "re_F", "im_F", "re_G", "im_G"],
                  [self.grid.t, self.F.real, self.F.imag, self.G.real, self.G.imag], meta=meta)


def evolve_sse_coeffs(kernel: BathKernel, Omega: float, mass_M: float, grid: TimeGrid,
                      hbar: Optional[float] = None) -> QbmSseCoeffs:
    """Heun-advance ``f, g, j`` in ``t`` with boundary rows appended at each new time.

    Evolution equations::

        d_t f = Omega g - 2i g F + i f G + i J(t, s)
        d_t g = -Omega f - i g G
        d_t j(t, s, s') = -i g(t, s) J(t, s')

    with ``f(s,s) = 1``, ``g(s,s) = 0``, ``j(s,s,s') = 0`` and
    ``j(s', s, s') = -g(s', s)``. ``F, G, J`` are trapezoid integrals
    against ``alpha(t - s) / (M Omega hbar)``.
    """
    hbar = kernel.hbar if hbar is None else hbar
    if kernel.grid.n_points < grid.n_points or not np.isclose(kernel.grid.dt, grid.dt):
        raise InvalidParameterError("kernel grid must cover the coefficient grid with the same dt")
    n_pts, dt = grid.n_points, grid.dt
    alpha = kernel.alpha[:n_pts]
    pref = 1.0 / (mass_M * Omega * hbar)

    f_tab = np.zeros((n_pts, n_pts), dtype=complex)
    g_tab = np.zeros((n_pts, n_pts), dtype=complex)
    J_tab = np.zeros((n_pts, n_pts), dtype=complex)
    F = np.zeros(n_pts, dtype=complex)
    G = np.zeros(n_pts, dtype=complex)

    def integrals(n, f, g, j):
        kern = pref * trapezoid_weights(n, dt) * alpha[n::-1]
        return kern @ f, kern @ g, kern @ j

    def rates(f, g, Fn, Gn, Jn):
        df = Omega * g - 2j * g * Fn + 1j * f * Gn + 1j * Jn
        dg = -Omega * f - 1j * g * Gn
        dj = -1j * np.outer(g, Jn)
        return df, dg, dj

    def extend(f, g, j):
        m = f.size
        fe = np.empty(m + 1, dtype=complex)
        ge = np.empty(m + 1, dtype=complex)
        je = np.zeros((m + 1, m + 1), dtype=complex)
        fe[:m], fe[m] = f, 1.0
        ge[:m], ge[m] = g, 0.0
        je[:m, :m] = j
        je[:, m] = -ge
        return fe, ge, je

    f = np.ones(1, dtype=complex)
    g = np.zeros(1, dtype=complex)
    j = np.zeros((1, 1), dtype=complex)
    Fn, Gn, Jn = integrals(0, f, g, j)
    f_tab[0, 0] = 1.0
    unstable = False
    for n in range(n_pts - 1):
        df, dg, dj = rates(f, g, Fn, Gn, Jn)
        fp, gp, jp = extend(f + dt * df, g + dt * dg, j + dt * dj)
        Fp, Gp, Jp = integrals(n + 1, fp, gp, jp)
        dfp, dgp, djp = rates(fp, gp, Fp, Gp, Jp)
        f, g, j = extend(f + 0.5 * dt * (df + dfp[:-1]),
                         g + 0.5 * dt * (dg + dgp[:-1]),
                         j + 0.5 * dt * (dj + djp[:-1, :-1]))
        Fn, Gn, Jn = integrals(n + 1, f, g, j)
        m = n + 1
        f_tab[m, :m + 1] = f
        g_tab[m, :m + 1] = g
        F[m], G[m] = Fn, Gn
        J_tab[m, :m + 1] = Jn
        if not unstable and max(np.max(np.abs(f)), np.max(np.abs(g))) > OVERFLOW:
            unstable = True
    return QbmSseCoeffs(grid, float(Omega), float(mass_M), float(hbar), f_tab, g_tab, F, G,
                        J_tab, j, unstable)


# --- master-equation coefficients ---------------------------------------------

def normalization(classical: ClassicalSolution) -> np.ndarray:
    """``D(t) = qdot(t)^2 - q(t) qddot(t)``."""
    return classical.q_dot ** 2 - classical.q * classical.q_ddot


def singular_mask(classical: ClassicalSolution, rel_threshold: float = 1e-6) -> np.ndarray:
    """Times where ``|D(t)| <= rel_threshold * Omega^2`` or next to a sign change of ``D``.

    A sign change between two grid points means ``D`` vanishes inside that step,
    so both end points are flagged.
    """
    D = normalization(classical)
    mask = np.abs(D) <= rel_threshold * classical.Omega ** 2
    flips = np.flatnonzero(np.sign(D[:-1]) * np.sign(D[1:]) < 0)
    mask[flips] = True
    mask[flips + 1] = True
    return mask


def _first_crossing(classical: ClassicalSolution):
    """Linearly interpolated time of the first sign change of ``D``, or None."""
    D = normalization(classical)
    flips = np.flatnonzero(np.sign(D[:-1]) * np.sign(D[1:]) < 0)
    if flips.size == 0:
        return None
    i = flips[0]
    t = classical.grid.t
    return float(t[i] + (t[i + 1] - t[i]) * D[i] / (D[i] - D[i + 1]))


def _check_D(classical, n, eps_div):
    D = classical.q_dot[n] ** 2 - classical.q[n] * classical.q_ddot[n]
    if abs(D) < eps_div * classical.Omega ** 2:
        raise SingularNormalizationError(
            f"D(t) = {D:.3e} is singular at t = {classical.grid.t[n]:.6g}", classical.grid.t[n])
    return D


def wx_closed_form(classical: ClassicalSolution, t_index: int, eps_div: float = EPS_DIV):
    """Real ``w(t, s)`` and ``x(t, s)`` for ``s = t_0..t_n`` at fixed ``t = t_n``."""
    n = t_index
    q, qd, qdd = classical.q, classical.q_dot, classical.q_ddot
    D = _check_D(classical, n, eps_div)
    w = (qd[:n + 1] * qd[n] - q[:n + 1] * qdd[n]) / D
    x = classical.Omega * (q[:n + 1] * qd[n] - qd[:n + 1] * q[n]) / D
    return w, x


class _WxyzWorkspace:
    """Toeplitz matrices of ``nu`` and ``q`` shared across all ``t``."""

    def __init__(self, classical: ClassicalSolution, kernel: BathKernel):
        n_pts = classical.grid.n_points
        self.nu = toeplitz(kernel.nu[:n_pts])
        self.qlow = np.tril(toeplitz(classical.q[:n_pts]))


def wxyz_closed_form(classical: ClassicalSolution, kernel: BathKernel, Omega: float,
                     mass_M: float, grid: TimeGrid, t_index: int, hbar: Optional[float] = None,
                     eps_div: float = EPS_DIV, _ws: Optional[_WxyzWorkspace] = None):
    """``(w, x, y, z)`` as functions of ``s`` on ``[0, t]`` for ``t = grid.t[t_index]``.

    ``w`` and ``x`` are real. ``y = y_R + i y_I`` and ``z = z_R + i z_I`` with
    ``y_R(s) = qdot(t-s)/Omega``, ``z_R(s) = q(t-s)``; the imaginary parts are
    the Green's-function convolution of the ``nu`` inhomogeneity plus the
    homogeneous correction ``-p(t) w(s) - p'(t) x(s) / Omega`` that enforces
    zero final value and slope.
    """
    hbar = kernel.hbar if hbar is None else hbar
    ws = _ws if _ws is not None else _WxyzWorkspace(classical, kernel)
    n, dt = t_index, grid.dt
    w, x = wx_closed_form(classical, n, eps_div)
    q, qd = classical.q, classical.q_dot
    yR = qd[n::-1] / Omega
    zR = q[n::-1].copy()
    if n == 0:
        zero = np.zeros(1)
        return w, x, yR + 0j, zR + 0j
    tw = trapezoid_weights(n, dt)
    nu = ws.nu[:n + 1, :n + 1]
    qlow = ws.qlow[:n + 1, :n + 1]
    src = (2.0 / (mass_M * hbar)) * (nu @ (tw[:, None] * np.stack([yR, zR], axis=1)))

    # particular solution with zero initial data: (1/Omega) int_0^s q(s-s') h(s') ds'
    part = (dt / Omega) * (qlow @ src - 0.5 * np.outer(q[:n + 1], src[0]))
    slope = (1.0 / Omega) * ((tw * qd[n::-1]) @ src)
    imag = part - np.outer(w, part[n]) - np.outer(x / Omega, slope)
    y = yR + 1j * imag[:, 0]
    z = zR + 1j * imag[:, 1]
    return w, x, y, z


def klmn_tables(w, x, y, z):
    """Invert ``w = k + m``, ``x = l + n``, ``y = k - m``, ``z = n - l``."""
    w, x, y, z = (np.asarray(a) for a in (w, x, y, z))
    if not (w.shape == x.shape == y.shape == z.shape):
        raise InvalidParameterError("w, x, y, z must have matching shapes")
    k = 0.5 * (w + y)
    m = 0.5 * (w - y)
    ell = 0.5 * (x - z)
    nn = 0.5 * (x + z)
    return k, ell, m, nn


@dataclass(frozen=True)
class QbmMeCoeffs:
    """Exact master-equation coefficients and (optionally) the ``w..z``, ``k..n`` tables.

    Tables are indexed ``[t_i, s_j]`` and are zero for ``j > i``. Coefficients
    at times flagged in ``singular`` are NaN.
    """

    grid: TimeGrid
    classical: ClassicalSolution
    a_t: np.ndarray
    b_t: np.ndarray
    c_pq: np.ndarray
    d_qq: np.ndarray
    singular: np.ndarray
    w: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    k: Optional[np.ndarray] = None
    l: Optional[np.ndarray] = None  # noqa: E741
    m: Optional[np.ndarray] = None
    n: Optional[np.ndarray] = None

    def to_csv(self, path, meta=None):
        write_csv(path, ["t", "a", "b", "c_pq", "d_qq"],
                  [self.grid.t, self.a_t, self.b_t, self.c_pq, self.d_qq], meta=meta)


def me_coefficients(kernel: BathKernel, classical: ClassicalSolution, Omega: float, mass_M: float,
                    grid: TimeGrid, hbar: Optional[float] = None, store_tables: bool = True,
                    on_singular: str = "raise", eps_div: float = EPS_DIV) -> QbmMeCoeffs:
    """Coefficients of the exact QBM master equation::

        a = (2/hbar) Im int alpha(t-s) w(t,s) ds
        b = 2/(M Omega hbar) Im int alpha(t-s) x(t,s) ds
        c_pq = 1/(M Omega) Re int alpha(t-s) z(t,s) ds
        d_qq = Re int alpha(t-s) y(t,s) ds

    ``on_singular="flag"`` records singular ``D(t)`` times as NaN instead of raising.
    """
    if on_singular not in ("raise", "flag"):
        raise InvalidParameterError("on_singular must be 'raise' or 'flag'")
    hbar = kernel.hbar if hbar is None else hbar
    n_pts, dt = grid.n_points, grid.dt
    alpha = kernel.alpha[:n_pts]
    ws = _WxyzWorkspace(classical, kernel)
    a = np.zeros(n_pts)
    b = np.zeros(n_pts)
    c = np.zeros(n_pts)
    d = np.zeros(n_pts)
    singular = np.zeros(n_pts, dtype=bool)
    t_cross = _first_crossing(classical)
    if t_cross is not None and t_cross <= grid.t[-1] and on_singular == "raise":
        raise SingularNormalizationError(
            f"D(t) changes sign near t = {t_cross:.6g}", t_cross)
    tabs = None
    if store_tables:
        tabs = {name: np.zeros((n_pts, n_pts), dtype=float if name in "wx" else complex)
                for name in "wxyz"}
    for n in range(n_pts):
        try:
            w, x, y, z = wxyz_closed_form(classical, kernel, Omega, mass_M, grid, n, hbar,
                                          eps_div, ws)
        except SingularNormalizationError:
            if on_singular == "raise":
                raise
            singular[n] = True
            a[n] = b[n] = c[n] = d[n] = np.nan
            continue
        kern = trapezoid_weights(n, dt) * alpha[n::-1]
        a[n] = (2.0 / hbar) * np.imag(kern @ w)
        b[n] = 2.0 / (mass_M * Omega * hbar) * np.imag(kern @ x)
        c[n] = np.real(kern @ z) / (mass_M * Omega)
        d[n] = np.real(kern @ y)
        if tabs is not None:
            for name, arr in zip("wxyz", (w, x, y, z)):
                tabs[name][n, :n + 1] = arr
    if t_cross is not None:
        # both neighbours of a sign change straddle the pole; their values are meaningless
        crossing = singular_mask(classical, rel_threshold=0.0)[:n_pts]
        singular |= crossing
        for arr in (a, b, c, d):
            arr[crossing] = np.nan
    extra = {}
    if tabs is not None:
        k, ell, m, nn = klmn_tables(tabs["w"], tabs["x"], tabs["y"], tabs["z"])
        extra = dict(w=tabs["w"], x=tabs["x"], y=tabs["y"], z=tabs["z"], k=k, l=ell, m=m, n=nn)
    return QbmMeCoeffs(grid, classical, a, b, c, d, singular, **extra)


def drift_closed_form(classical: ClassicalSolution, Omega: float, mass_M: float, t_index,
                      eps_div: float = EPS_DIV):
    """``(a, b)`` from ``q`` and its first three derivatives at grid index ``t_index``.

    ``t_index`` may be an integer or an index array.
    """
    q, qd = classical.q[t_index], classical.q_dot[t_index]
    qdd, qddd = classical.q_ddot[t_index], classical.q_dddot[t_index]
    D = qd ** 2 - q * qdd
    if np.any(np.abs(D) < eps_div * Omega ** 2):
        bad = np.atleast_1d(classical.grid.t[t_index])[np.atleast_1d(np.abs(D) < eps_div * Omega ** 2)]
        raise SingularNormalizationError(f"D(t) singular at t = {bad[0]:.6g}", float(bad[0]))
    a = -mass_M * Omega ** 2 + mass_M * (qdd ** 2 - qd * qddd) / D
    b = (q * qddd - qd * qdd) / D
    return a, b


def drift_integral_route(kernel: BathKernel, classical: ClassicalSolution, Omega: float,
                         mass_M: float, grid: TimeGrid, eps_div: float = EPS_DIV):
    """``a(t) = 2 int eta(t-s) w(t,s) ds`` and ``b(t) = 2/(M Omega) int eta x`` for all ``t``.

    Cheap ``O(N^2)`` path used for the drift cross-check on fine grids.
    """
    n_pts, dt = grid.n_points, grid.dt
    eta = kernel.eta[:n_pts]
    a = np.full(n_pts, np.nan)
    b = np.full(n_pts, np.nan)
    for n in range(n_pts):
        try:
            w, x = wx_closed_form(classical, n, eps_div)
        except SingularNormalizationError:
            continue
        kern = trapezoid_weights(n, dt) * eta[n::-1]
        a[n] = 2.0 * (kern @ w)
        b[n] = 2.0 / (mass_M * Omega) * (kern @ x)
    return a, b
