"""Scalar memory equations: the RWA amplitude c(t) and the classical Brownian trajectory q(s).

Both integrators are Heun predictor-corrector steps with composite-trapezoid
memory integrals on the uniform grid, so they are second order in ``dt``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nmqsd.errors import InvalidParameterError
from nmqsd.io import write_csv
from nmqsd.kernels import BathKernel, TimeGrid

EPS_DIV = 1e-12


@dataclass(frozen=True)
class QuadratureRule:
    """Composite rule on ``n + 1`` equally spaced points."""

    kind: str = "trapezoid"

    def weights(self, n: int, dt: float) -> np.ndarray:
        if n == 0:
            return np.zeros(1)
        if self.kind == "trapezoid":
            w = np.full(n + 1, dt)
            w[0] = w[-1] = 0.5 * dt
            return w
        if self.kind == "simpson-composite":
            if n % 2:
                # Simpson on the first n-1 intervals, trapezoid on the last one
                w = np.zeros(n + 1)
                w[:n] = QuadratureRule("simpson-composite").weights(n - 1, dt)
                w[n - 1:] += 0.5 * dt
                return w
            w = np.full(n + 1, 2.0)
            w[1:-1:2] = 4.0
            w[0] = w[-1] = 1.0
            return w * dt / 3.0
        raise InvalidParameterError(f"unknown quadrature kind {self.kind!r}")


def trapezoid_weights(n: int, dt: float) -> np.ndarray:
    return QuadratureRule().weights(n, dt)


def _check_cover(kernel: BathKernel, grid: TimeGrid):
    if kernel.grid.n_points < grid.n_points or not np.isclose(kernel.grid.dt, grid.dt):
        raise InvalidParameterError("kernel grid must cover the solver grid with the same dt")


@dataclass(frozen=True)
class AmplitudeResponse:
    """``c(t)`` and ``C(t) = int_0^t c(s) alpha(t-s) ds / c(t)``.

    ``undefined`` marks times where ``|c(t)| < eps_div``; ``big_C`` is NaN there.
    """

    grid: TimeGrid
    amp_c: np.ndarray
    big_C: np.ndarray
    undefined: np.ndarray
    memory: np.ndarray

    @property
    def any_undefined(self) -> bool:
        return bool(np.any(self.undefined))

    def to_csv(self, path, meta=None):
        write_csv(path, ["t", "re_c", "im_c", "re_C", "im_C"],
                  [self.grid.t, self.amp_c.real, self.amp_c.imag, self.big_C.real,
                   self.big_C.imag], meta=meta)


def solve_amplitude(kernel: BathKernel, Omega: float, grid: TimeGrid,
                    eps_div: float = EPS_DIV) -> AmplitudeResponse:
    """Integrate ``c' + i Omega c + int_0^t alpha(t-s) c(s) ds = 0`` with ``c(0) = 1``."""
    _check_cover(kernel, grid)
    n_pts, dt = grid.n_points, grid.dt
    alpha = kernel.alpha[:n_pts]
    c = np.zeros(n_pts, dtype=complex)
    mem = np.zeros(n_pts, dtype=complex)
    c[0] = 1.0
    # running sum_{k=1}^{n-1} alpha(t_n - t_k) c_k is recomputed each step
    for n in range(n_pts - 1):
        rhs_n = -1j * Omega * c[n] - mem[n]
        c_pred = c[n] + dt * rhs_n
        m = n + 1
        inner = np.dot(alpha[m - 1:0:-1], c[1:m]) if m > 1 else 0.0
        base = dt * (inner + 0.5 * alpha[m] * c[0])
        mem_pred = base + 0.5 * dt * alpha[0] * c_pred
        rhs_pred = -1j * Omega * c_pred - mem_pred
        c[m] = c[n] + 0.5 * dt * (rhs_n + rhs_pred)
        mem[m] = base + 0.5 * dt * alpha[0] * c[m]
    undefined = np.abs(c) < eps_div
    with np.errstate(divide="ignore", invalid="ignore"):
        big_C = np.where(undefined, np.nan + 0j, mem / np.where(undefined, 1.0, c))
    return AmplitudeResponse(grid, c, big_C, undefined, mem)


def amplitude_residual(resp: AmplitudeResponse, Omega: float) -> np.ndarray:
    """Pointwise residual ``c' + i Omega c + memory`` with ``c'`` by central differences."""
    dc = np.gradient(resp.amp_c, resp.grid.dt, edge_order=2)
    return dc + 1j * Omega * resp.amp_c + resp.memory


@dataclass(frozen=True)
class ClassicalSolution:
    """Classical trajectory with ``q(0) = 0``, ``q'(0) = Omega`` and its derivatives."""

    grid: TimeGrid
    Omega: float
    q: np.ndarray
    q_dot: np.ndarray
    q_ddot: np.ndarray
    q_dddot: np.ndarray

    def to_csv(self, path, meta=None):
        write_csv(path, ["s", "q", "q_dot", "q_ddot", "q_dddot"],
                  [self.grid.t, self.q, self.q_dot, self.q_ddot, self.q_dddot], meta=meta)


def solve_classical_motion(kernel: BathKernel, Omega: float, mass_M: float,
                           grid: TimeGrid) -> ClassicalSolution:
    """Integrate ``q'' + Omega^2 q + (2/M) int_0^s eta(s-s') q(s') ds' = 0``.

    ``q''`` is evaluated from the equation itself and ``q'''`` from its
    derivative, ``q''' = -Omega^2 q' - (2/M) int eta'(s-s') q(s') ds'``.
    """
    _check_cover(kernel, grid)
    n_pts, dt = grid.n_points, grid.dt
    eta = kernel.eta[:n_pts]
    eta_dot = kernel.eta_dot[:n_pts]
    k2 = 2.0 / mass_M
    q = np.zeros(n_pts)
    v = np.zeros(n_pts)
    acc = np.zeros(n_pts)
    v[0] = Omega
    for n in range(n_pts - 1):
        a_n = acc[n]
        q_pred = q[n] + dt * v[n]
        v_pred = v[n] + dt * a_n
        m = n + 1
        # q(0) = 0 and eta(0) = 0: neither trapezoid endpoint contributes
        mem = dt * np.dot(eta[m - 1:0:-1], q[1:m])
        a_pred = -Omega ** 2 * q_pred - k2 * mem
        q[m] = q[n] + 0.5 * dt * (v[n] + v_pred)
        v[m] = v[n] + 0.5 * dt * (a_n + a_pred)
        acc[m] = -Omega ** 2 * q[m] - k2 * mem
    jerk = np.empty(n_pts)
    jerk[0] = -Omega ** 2 * v[0]
    for m in range(1, n_pts):
        w = trapezoid_weights(m, dt)
        jerk[m] = -Omega ** 2 * v[m] - k2 * np.dot(w, eta_dot[m::-1] * q[:m + 1])
    return ClassicalSolution(grid, float(Omega), q, v, acc, jerk)
