"""Density-matrix propagators, observables and comparison metrics.

Every propagator is classical RK4 on a time-local generator. Time-dependent
coefficients tabulated on the grid are evaluated at half steps through a
cubic spline. After each step the state is re-symmetrized; the largest
anti-Hermitian part removed and the smallest eigenvalue are recorded but
positivity is never imposed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from nmqsd.errors import InvalidParameterError, UndefinedCoefficientError
from nmqsd.io import write_csv
from nmqsd.kernels import TimeGrid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DensitySeries:
    t: np.ndarray
    rho: np.ndarray
    min_eigenvalue: np.ndarray
    hermiticity_defect: float
    label: str = ""

    @property
    def trace(self) -> np.ndarray:
        return np.real(np.trace(self.rho, axis1=1, axis2=2))

    def to_csv(self, path, meta=None):
        """Long form: one row per ``(t, row, col)``."""
        n_t, d, _ = self.rho.shape
        tt = np.repeat(self.t, d * d)
        rows = np.tile(np.repeat(np.arange(d), d), n_t)
        cols = np.tile(np.tile(np.arange(d), d), n_t)
        flat = self.rho.reshape(-1)
        write_csv(path, ["t", "row", "col", "re", "im"], [tt, rows, cols, flat.real, flat.imag],
                  meta=meta)


def density_from_csv(columns) -> DensitySeries:
    """Rebuild a :class:`DensitySeries` from :func:`nmqsd.io.read_csv` columns."""
    t_all = columns["t"]
    d = int(columns["row"].max()) + 1
    n_t = t_all.size // (d * d)
    rho = (columns["re"] + 1j * columns["im"]).reshape(n_t, d, d)
    return DensitySeries(t_all[::d * d], rho, np.full(n_t, np.nan), 0.0)


def _comm(A, B):
    return A @ B - B @ A


def _rk4(generator: Callable[[float, np.ndarray], np.ndarray], rho0, grid: TimeGrid,
         label: str) -> DensitySeries:
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.ndim != 2 or rho0.shape[0] != rho0.shape[1]:
        raise InvalidParameterError("rho0 must be square")
    dt = grid.dt
    out = np.empty((grid.n_points,) + rho0.shape, dtype=complex)
    min_eig = np.empty(grid.n_points)
    rho = 0.5 * (rho0 + rho0.conj().T)
    out[0] = rho
    min_eig[0] = np.linalg.eigvalsh(rho)[0]
    defect = 0.0
    for n in range(grid.n_steps):
        t = grid.t[n]
        k1 = generator(t, rho)
        k2 = generator(t + 0.5 * dt, rho + 0.5 * dt * k1)
        k3 = generator(t + 0.5 * dt, rho + 0.5 * dt * k2)
        k4 = generator(t + dt, rho + dt * k3)
        rho = rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        anti = 0.5 * (rho - rho.conj().T)
        defect = max(defect, float(np.max(np.abs(anti))))
        rho = rho - anti
        out[n + 1] = rho
        min_eig[n + 1] = np.linalg.eigvalsh(rho)[0]
    if min_eig.min() < -1e-8:
        log.info("%s: smallest eigenvalue %.3e (positivity not enforced)", label, min_eig.min())
    return DensitySeries(grid.t.copy(), out, min_eig, defect, label)


def _series(values, grid: TimeGrid):
    """Callable ``t -> value`` for a grid series (cubic spline) or a constant."""
    values = np.asarray(values)
    if values.ndim == 0 or (values.ndim == 2 and values.shape[0] != grid.n_points):
        const = values
        return lambda t: const
    if values.shape[0] < grid.n_points:
        raise InvalidParameterError("coefficient series does not cover the propagation grid")
    spline = CubicSpline(grid.t, values[:grid.n_points], axis=0)
    return spline


def _check_square(*mats):
    d = mats[0].shape[0]
    for m in mats:
        if m.shape != (d, d):
            raise InvalidParameterError("operator dimensions do not match")


def integrate_lindblad(H, L, rho0, grid: TimeGrid, hbar: float = 1.0) -> DensitySeries:
    """``-(i/hbar)[H, rho] + ([L, rho L^dagger] + [L rho, L^dagger]) / 2``."""
    H, L = np.asarray(H, dtype=complex), np.asarray(L, dtype=complex)
    _check_square(H, L, np.asarray(rho0))
    Ld = L.conj().T

    def gen(t, rho):
        return (-1j / hbar) * _comm(H, rho) + 0.5 * (_comm(L, rho @ Ld) + _comm(L @ rho, Ld))

    return _rk4(gen, rho0, grid, "lindblad")


def integrate_convolutionless_me(H, L, Obar_series, rho0, grid: TimeGrid,
                                 hbar: float = 1.0) -> DensitySeries:
    """``-(i/hbar)[H, rho] + [L, rho Obar^dagger] + [Obar rho, L^dagger]``.

    ``Obar_series`` is a single matrix or a ``(n_points, d, d)`` series.
    """
    H, L = np.asarray(H, dtype=complex), np.asarray(L, dtype=complex)
    _check_square(H, L, np.asarray(rho0))
    Ld = L.conj().T
    Obar = _series(np.asarray(Obar_series, dtype=complex), grid)

    def gen(t, rho):
        O = Obar(t)
        return (-1j / hbar) * _comm(H, rho) + _comm(L, rho @ O.conj().T) + _comm(O @ rho, Ld)

    return _rk4(gen, rho0, grid, "convolutionless")


def integrate_rwa_exact(Omega: float, C_series, rho0, grid: TimeGrid, a=None) -> DensitySeries:
    """``-i[(Omega + Im C) a^dagger a, rho] + Re C ([a, rho a^dagger] + [a rho, a^dagger])``.

    ``C_series`` may be an :class:`~nmqsd.memory.AmplitudeResponse`; undefined
    ``C`` anywhere on the grid is refused.
    """
    undefined = getattr(C_series, "undefined", None)
    C_vals = getattr(C_series, "big_C", C_series)
    C_vals = np.asarray(C_vals, dtype=complex)
    if undefined is not None and np.any(undefined[:grid.n_points]):
        t_bad = grid.t[np.argmax(undefined[:grid.n_points])]
        raise UndefinedCoefficientError(f"C(t) undefined from t = {t_bad:.6g}")
    if C_vals.ndim and not np.all(np.isfinite(C_vals[:grid.n_points])):
        raise UndefinedCoefficientError("C(t) is not finite on the grid")
    rho0 = np.asarray(rho0, dtype=complex)
    d = rho0.shape[0]
    if a is None:
        a = np.diag(np.sqrt(np.arange(1, d, dtype=float)), 1).astype(complex)
    ad = a.conj().T
    num = ad @ a
    C = _series(C_vals, grid)

    def gen(t, rho):
        c = complex(C(t))
        return (-1j * (Omega + c.imag) * _comm(num, rho)
                + c.real * (_comm(a, rho @ ad) + _comm(a @ rho, ad)))

    return _rk4(gen, rho0, grid, "rwa-exact")


def qbm_generator(model, a_t: float, b_t: float, c_pq: float, d_qq: float):
    """Instantaneous QBM generator ``rho -> d rho / dt`` for fixed coefficients."""
    hb = model.hbar
    q, p = model.q, model.p
    q2 = q @ q
    H = model.H

    def gen(rho):
        return ((1 / (1j * hb)) * _comm(H, rho)
                + (a_t / (2j * hb)) * _comm(q2, rho)
                + (b_t / (2j * hb)) * _comm(q, p @ rho + rho @ p)
                + (c_pq / hb ** 2) * _comm(q, _comm(p, rho))
                - (d_qq / hb ** 2) * _comm(q, _comm(q, rho)))

    return gen


def integrate_qbm_me(model, coeffs, rho0, grid: Optional[TimeGrid] = None) -> DensitySeries:
    """Exact QBM master equation with tabulated ``a, b, c_pq, d_qq``."""
    grid = coeffs.grid if grid is None else grid
    if coeffs.grid.n_points < grid.n_points or not np.isclose(coeffs.grid.dt, grid.dt):
        raise InvalidParameterError("coefficient grid must cover the propagation grid")
    sing = np.asarray(coeffs.singular[:grid.n_points])
    if np.any(sing):
        raise UndefinedCoefficientError(
            f"singular normalization at t = {grid.t[np.argmax(sing)]:.6g}; refusing to propagate")
    tab = np.stack([coeffs.a_t, coeffs.b_t, coeffs.c_pq, coeffs.d_qq], axis=1)[:grid.n_points]
    spline = CubicSpline(grid.t, tab, axis=0)
    hb, q, p, H = model.hbar, model.q, model.p, model.H
    q2 = q @ q

    def gen(t, rho):
        a, b, c, d = spline(t)
        return ((1 / (1j * hb)) * _comm(H, rho)
                + (a / (2j * hb)) * _comm(q2, rho)
                + (b / (2j * hb)) * _comm(q, p @ rho + rho @ p)
                + (c / hb ** 2) * _comm(q, _comm(p, rho))
                - (d / hb ** 2) * _comm(q, _comm(q, rho)))

    return _rk4(gen, rho0, grid, "qbm-me")


def observables(rho, model, imag_tol: float = 1e-10):
    """``<q>, <p>, Var q, Var p, Cov(q,p), purity, trace`` for each matrix.

    Expectations are normalized by the trace, so raw ensemble means work too.
    ``rho`` may be a :class:`DensitySeries` or an array ``(..., d, d)``.
    """
    rho = getattr(rho, "rho", rho)
    rho = np.asarray(rho, dtype=complex)
    q, p = model.q, model.p
    tr = np.trace(rho, axis1=-2, axis2=-1)

    def ev(op):
        val = np.einsum("...ij,ji->...", rho, op) / tr
        scale = np.maximum(np.abs(val), 1.0)
        if np.any(np.abs(val.imag) > imag_tol * scale):
            log.warning("expectation has imaginary residue %.3e", np.max(np.abs(val.imag)))
        return val.real

    mq, mp = ev(q), ev(p)
    sym = 0.5 * (q @ p + p @ q)
    purity = np.real(np.einsum("...ij,...ji->...", rho, rho) / tr ** 2)
    return {
        "q": mq, "p": mp,
        "var_q": ev(q @ q) - mq ** 2,
        "var_p": ev(p @ p) - mp ** 2,
        "cov_qp": ev(sym) - mq * mp,
        "purity": purity,
        "trace": tr.real,
    }


def trace_distance(rho_a, rho_b) -> np.ndarray:
    """``||rho_a - rho_b||_1 / 2`` for each pair (Hermitian eigenvalues)."""
    A = np.asarray(getattr(rho_a, "rho", rho_a), dtype=complex)
    B = np.asarray(getattr(rho_b, "rho", rho_b), dtype=complex)
    if A.shape != B.shape:
        raise InvalidParameterError(f"shape mismatch {A.shape} vs {B.shape}")
    diff = A - B
    diff = 0.5 * (diff + np.conj(np.swapaxes(diff, -1, -2)))
    return 0.5 * np.sum(np.abs(np.linalg.eigvalsh(diff)), axis=-1)


def write_observables(path, series: DensitySeries, model, meta=None):
    tab = observables(series, model)
    write_csv(path, ["t", "re_q", "re_p", "var_q", "var_p", "cov_qp", "purity", "trace_raw"],
              [series.t, tab["q"], tab["p"], tab["var_q"], tab["var_p"], tab["cov_qp"],
               tab["purity"], tab["trace"]], meta=meta)
