"""Spectral densities, bath correlation kernels and discretized bath modes.

Conventions: ``hbar`` and ``kB`` are explicit (default 1). The bath
correlation function is

    alpha(tau) = hbar * int_0^inf J(w) [coth(hbar w / 2 kB T) cos(w tau) - i sin(w tau)] dw
               = nu(tau) + i hbar eta(tau)

and the classical damping kernel is gamma_cl(tau) = (2/M) int J(w) cos(w tau) / w dw,
so that d/dtau gamma_cl = (2/M) eta.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from nmqsd.errors import InvalidParameterError, QuadratureError
from nmqsd.io import write_csv

EPS_QUAD = 1e-8
EPS_PSD = 1e-10

SPECTRAL_KINDS = ("ohmic-exponential", "ohmic-lorentzian", "tabulated")
_KIND_ALIASES = {"ohmic-exp": "ohmic-exponential", "ohmic-lor": "ohmic-lorentzian"}

_GL_ORDER = 16
_GL_X, _GL_W = np.polynomial.legendre.leggauss(_GL_ORDER)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k * dt`` for ``k = 0..n_steps``."""

    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidParameterError(f"dt must be positive, got {self.dt}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise InvalidParameterError(f"n_steps must be an integer >= 2, got {self.n_steps}")

    @classmethod
    def from_t_max(cls, t_max: float, dt: float) -> "TimeGrid":
        n = int(round(t_max / dt))
        if not math.isclose(n * dt, t_max, rel_tol=1e-9, abs_tol=1e-12):
            raise InvalidParameterError(f"t_max={t_max} is not a multiple of dt={dt}")
        return cls(dt=dt, n_steps=n)

    @property
    def t_max(self) -> float:
        return self.dt * self.n_steps

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.n_points) * self.dt

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.dt / factor, self.n_steps * factor)


def thermal_occupation(omega, temperature: float, hbar: float = 1.0, kB: float = 1.0):
    """Bose occupation 1/(exp(hbar w / kB T) - 1); zero at T = 0."""
    omega = np.asarray(omega, dtype=float)
    if temperature <= 0:
        return np.zeros_like(omega)
    return 1.0 / np.expm1(hbar * omega / (kB * temperature))


def _coth_factor(omega, temperature, hbar, kB):
    if temperature <= 0:
        return np.ones_like(omega)
    return 1.0 / np.tanh(hbar * omega / (2.0 * kB * temperature))


@dataclass(frozen=True)
class SpectralDensity:
    """Ohmic-type spectral density ``J(w) = M gamma w f_c(w / Lambda)``.

    ``ohmic-exponential`` uses ``f_c(x) = exp(-x)``; ``ohmic-lorentzian`` uses
    the squared Lorentzian ``f_c(x) = 1 / (1 + x^2)^2`` so that ``int J`` stays
    finite. ``tabulated`` interpolates linearly between ``(omega_samples,
    J_samples)`` and is zero beyond the last sample.
    """

    kind: str
    gamma: float
    Lambda: float
    mass_M: float = 1.0
    omega_samples: Optional[np.ndarray] = field(default=None, repr=False)
    J_samples: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def cutoff_form(self) -> str:
        return {
            "ohmic-exponential": "exp(-x)",
            "ohmic-lorentzian": "1/(1+x^2)^2",
            "tabulated": "linear-interpolation",
        }[self.kind]

    def __call__(self, omega):
        omega = np.asarray(omega, dtype=float)
        if self.kind == "tabulated":
            out = np.interp(omega, self.omega_samples, self.J_samples, left=0.0, right=0.0)
            return np.where(omega > self.omega_samples[-1], 0.0, out)
        x = omega / self.Lambda
        if self.kind == "ohmic-exponential":
            fc = np.exp(-x)
        else:
            fc = 1.0 / (1.0 + x * x) ** 2
        return np.where(omega >= 0, self.mass_M * self.gamma * omega * fc, 0.0)

    def over_omega(self, omega):
        """J(w)/w, finite at w -> 0 for ohmic kinds."""
        omega = np.asarray(omega, dtype=float)
        if self.kind == "tabulated":
            with np.errstate(divide="ignore", invalid="ignore"):
                return self(omega) / omega
        x = omega / self.Lambda
        fc = np.exp(-x) if self.kind == "ohmic-exponential" else 1.0 / (1.0 + x * x) ** 2
        return self.mass_M * self.gamma * fc

    @property
    def support_max(self) -> float:
        """Upper end of the frequency quadrature."""
        if self.kind == "ohmic-exponential":
            return 40.0 * self.Lambda
        if self.kind == "ohmic-lorentzian":
            return 300.0 * self.Lambda
        return float(self.omega_samples[-1])

    def breakpoints(self) -> np.ndarray:
        if self.kind == "tabulated":
            pts = np.asarray(self.omega_samples, dtype=float)
            return np.unique(np.concatenate([[0.0], pts[pts > 0]]))
        return np.array([0.0, self.support_max])


def make_spectral_density(kind: str, gamma: float, Lambda: float = 1.0, mass_M: float = 1.0,
                          omega_samples=None, J_samples=None) -> SpectralDensity:
    """Build a :class:`SpectralDensity`.

    Raises
    ------
    InvalidParameterError
        For negative ``gamma``, non-positive ``Lambda`` or ``mass_M``, or
        malformed tabulated samples.
    """
    kind = _KIND_ALIASES.get(kind, kind)
    if kind not in SPECTRAL_KINDS:
        raise InvalidParameterError(f"unknown spectral density kind {kind!r}")
    if gamma < 0:
        raise InvalidParameterError(f"gamma must be >= 0, got {gamma}")
    if not Lambda > 0:
        raise InvalidParameterError(f"Lambda must be positive, got {Lambda}")
    if not mass_M > 0:
        raise InvalidParameterError(f"mass_M must be positive, got {mass_M}")
    if kind == "tabulated":
        if omega_samples is None or J_samples is None:
            raise InvalidParameterError("tabulated spectral density needs omega_samples and J_samples")
        w = np.asarray(omega_samples, dtype=float)
        j = np.asarray(J_samples, dtype=float)
        if w.ndim != 1 or w.shape != j.shape or w.size < 2:
            raise InvalidParameterError("omega_samples and J_samples must be 1-d of equal length >= 2")
        if np.any(np.diff(w) <= 0) or w[0] < 0:
            raise InvalidParameterError("omega_samples must be non-negative and strictly increasing")
        if np.any(j < 0):
            raise InvalidParameterError("J_samples must be non-negative")
        return SpectralDensity(kind, gamma, Lambda, mass_M, w, j)
    return SpectralDensity(kind, gamma, Lambda, mass_M)


# --- frequency quadrature --------------------------------------------------

def _panel_nodes(breaks: np.ndarray, per_interval: int):
    """Gauss-Legendre nodes/weights with each base interval split into panels."""
    edges = []
    for a, b in zip(breaks[:-1], breaks[1:]):
        edges.append(np.linspace(a, b, per_interval + 1)[:-1])
    edges.append([breaks[-1]])
    edges = np.concatenate(edges)
    lo, hi = edges[:-1], edges[1:]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    nodes = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
    weights = (half[:, None] * _GL_W[None, :]).ravel()
    return nodes, weights


def _fourier_moments(weighted, nodes, weights, taus, chunk=256):
    """Return (int f_c cos(w tau), int f_s sin(w tau), ...) for each weighted column.

    ``weighted`` maps a name to ``(values_at_nodes, 'cos'|'sin'|'none')``.
    """
    out = {name: np.empty(taus.size) for name in weighted}
    for start in range(0, taus.size, chunk):
        tt = taus[start:start + chunk]
        phase = np.outer(tt, nodes)
        c = np.cos(phase)
        s = np.sin(phase)
        for name, (vals, trig) in weighted.items():
            vw = vals * weights
            out[name][start:start + chunk] = (c if trig == "cos" else s) @ vw
    return out


def _converged_moments(J: SpectralDensity, weighted_fn, taus, eps=EPS_QUAD, max_levels=12,
                       breaks=None):
    breaks = J.breakpoints() if breaks is None else breaks
    span = breaks[-1] - breaks[0]
    tmax = float(np.max(np.abs(taus))) if taus.size else 0.0
    n_base = max(breaks.size - 1, 1)
    # roughly one panel per half oscillation of the fastest Fourier factor
    per = max(4, int(math.ceil(span * tmax / math.pi / n_base)) + 1)
    prev = None
    for _ in range(max_levels):
        nodes, weights = _panel_nodes(breaks, per)
        cur = _fourier_moments(weighted_fn(nodes), nodes, weights, taus)
        if prev is not None:
            scale = max(max(np.max(np.abs(v)) for v in cur.values()), 1e-300)
            change = max(np.max(np.abs(cur[k] - prev[k])) for k in cur) / scale
            if change < eps:
                return cur
        prev = cur
        per *= 2
    raise QuadratureError("frequency quadrature did not converge", prev, cur)


@dataclass(frozen=True)
class BathKernel:
    """Bath correlation kernel tabulated at non-negative lags ``tau_k = k dt``.

    Only the half ``tau >= 0`` is stored; negative lags follow from
    ``alpha(-tau) = conj(alpha(tau))``, ``nu`` even, ``eta`` odd.
    """

    grid: TimeGrid
    alpha: np.ndarray
    nu: np.ndarray
    eta: np.ndarray
    eta_dot: np.ndarray
    gamma_cl: Optional[np.ndarray]
    temperature_T: float = 0.0
    hbar: float = 1.0
    kB: float = 1.0
    mass_M: float = 1.0

    @property
    def tau(self) -> np.ndarray:
        return self.grid.t

    @property
    def tau_full(self) -> np.ndarray:
        t = self.grid.t
        return np.concatenate([-t[:0:-1], t])

    @property
    def alpha_full(self) -> np.ndarray:
        return np.concatenate([np.conj(self.alpha[:0:-1]), self.alpha])

    @property
    def nu_full(self) -> np.ndarray:
        return np.concatenate([self.nu[:0:-1], self.nu])

    @property
    def eta_full(self) -> np.ndarray:
        return np.concatenate([-self.eta[:0:-1], self.eta])

    @property
    def gamma_cl_full(self) -> Optional[np.ndarray]:
        if self.gamma_cl is None:
            return None
        return np.concatenate([self.gamma_cl[:0:-1], self.gamma_cl])

    def covariance_matrix(self, n_points: Optional[int] = None) -> np.ndarray:
        """``C_ij = alpha(t_i - t_j)`` on the first ``n_points`` grid times."""
        n = self.grid.n_points if n_points is None else n_points
        idx = np.arange(n)
        lag = idx[:, None] - idx[None, :]
        a = self.alpha[np.abs(lag)]
        return np.where(lag >= 0, a, np.conj(a))

    def check_psd(self, eps_psd: float = EPS_PSD, n_points: Optional[int] = None) -> float:
        """Return min eigenvalue / max eigenvalue of the grid covariance."""
        ev = np.linalg.eigvalsh(self.covariance_matrix(n_points))
        top = max(ev[-1], 1e-300)
        return float(ev[0] / top)

    def to_csv(self, path, meta=None):
        g = self.gamma_cl_full
        alpha = self.alpha_full
        write_csv(
            path,
            ["tau", "re_alpha", "im_alpha", "nu", "eta", "gamma_cl"],
            [self.tau_full, alpha.real, alpha.imag, self.nu_full, self.eta_full,
             g if g is not None else np.full(alpha.shape, np.nan)],
            meta=meta,
        )


def _kernel_from_parts(grid, nu, eta, eta_dot, gamma_cl, T, hbar, kB, mass_M) -> BathKernel:
    eta = np.array(eta, dtype=float)
    eta[0] = 0.0
    alpha = nu + 1j * hbar * eta
    return BathKernel(grid, alpha, np.asarray(nu, float), eta, np.asarray(eta_dot, float),
                      None if gamma_cl is None else np.asarray(gamma_cl, float),
                      float(T), float(hbar), float(kB), float(mass_M))


def make_kernel(J: SpectralDensity, T: float, grid: TimeGrid, hbar: float = 1.0, kB: float = 1.0,
                eps_quad: float = EPS_QUAD) -> BathKernel:
    """Tabulate the finite-temperature kernel of ``J`` on ``grid``.

    The frequency integrals use Gauss-Legendre panels refined by doubling
    until the largest relative change drops below ``eps_quad``.
    """
    if T < 0:
        raise InvalidParameterError(f"temperature must be >= 0, got {T}")
    taus = grid.t
    if J.gamma == 0:
        z = np.zeros(taus.size)
        return _kernel_from_parts(grid, z, z, z, z.copy(), T, hbar, kB, J.mass_M)
    include_gcl = J.kind != "tabulated" or float(J(np.array([0.0]))[0]) == 0.0

    def weighted(w):
        jw = J(w)
        cols = {
            "nu": (hbar * jw * _coth_factor(w, T, hbar, kB), "cos"),
            "eta": (-jw, "sin"),
            "eta_dot": (-jw * w, "cos"),
        }
        if include_gcl:
            cols["gamma_cl"] = ((2.0 / J.mass_M) * J.over_omega(w), "cos")
        return cols

    m = _converged_moments(J, weighted, taus, eps=eps_quad)
    return _kernel_from_parts(grid, m["nu"], m["eta"], m["eta_dot"], m.get("gamma_cl"),
                              T, hbar, kB, J.mass_M)


def classical_damping_kernel(J: SpectralDensity, mass_M: float, grid: TimeGrid,
                             eps_quad: float = EPS_QUAD) -> np.ndarray:
    """Tabulate ``gamma_cl(tau) = (2/M) int J(w) cos(w tau) / w dw`` at ``tau >= 0``."""
    if J.kind == "tabulated" and float(J(np.array([0.0]))[0]) != 0.0:
        raise InvalidParameterError("J(0) != 0: the 1/omega integral for gamma_cl diverges")
    if J.gamma == 0:
        return np.zeros(grid.n_points)
    m = _converged_moments(J, lambda w: {"g": ((2.0 / mass_M) * J.over_omega(w), "cos")},
                           grid.t, eps=eps_quad)
    return m["g"]


def spectral_integral(J: SpectralDensity, upper: Optional[float] = None) -> float:
    """``int_0^upper J(w) dw`` (``upper`` defaults to the full support)."""
    breaks = J.breakpoints()
    if upper is not None:
        breaks = np.unique(np.concatenate([breaks[breaks < upper], [upper]]))
    m = _converged_moments(J, lambda w: {"i": (J(w), "cos")}, np.zeros(1), eps=1e-12,
                           breaks=breaks)
    return float(m["i"][0])


def kernel_from_function(alpha: Callable, grid: TimeGrid, hbar: float = 1.0,
                         alpha_dot: Optional[Callable] = None, mass_M: float = 1.0) -> BathKernel:
    """Kernel from a callable ``alpha(tau)`` defined for ``tau >= 0``.

    ``gamma_cl`` is left undefined (no spectral density); ``eta_dot`` uses
    ``alpha_dot`` when given, else second-order finite differences.
    """
    t = grid.t
    a = np.asarray(alpha(t), dtype=complex)
    if alpha_dot is not None:
        eta_dot = np.imag(np.asarray(alpha_dot(t), dtype=complex)) / hbar
    else:
        eta_dot = np.gradient(a.imag / hbar, grid.dt, edge_order=2)
    return _kernel_from_parts(grid, a.real, a.imag / hbar, eta_dot, None, 0.0, hbar, 1.0, mass_M)


def exponential_kernel(gamma: float, kappa: float, grid: TimeGrid, hbar: float = 1.0) -> BathKernel:
    """``alpha(tau) = (gamma kappa / 2) exp(-kappa |tau|)``; Markov limit ``gamma delta``."""
    amp = 0.5 * gamma * kappa
    return kernel_from_function(lambda t: amp * np.exp(-kappa * t) + 0j, grid, hbar,
                                alpha_dot=lambda t: -kappa * amp * np.exp(-kappa * t) + 0j)


# --- discrete baths ----------------------------------------------------------

@dataclass(frozen=True)
class DiscreteBath:
    """Finite set of bath modes with couplings ``g``, frequencies and occupations."""

    g: np.ndarray
    omega: np.ndarray
    nbar: np.ndarray
    temperature_T: float = 0.0
    hbar: float = 1.0
    kB: float = 1.0
    quadrature_error: float = 0.0
    coverage_warning: bool = False

    def __post_init__(self):
        if self.g.size == 0:
            raise InvalidParameterError("a discrete bath needs at least one mode")
        if np.any(self.omega <= 0):
            raise InvalidParameterError("all mode frequencies must be positive")
        if np.any(self.nbar < 0):
            raise InvalidParameterError("occupations must be non-negative")

    @property
    def n_modes(self) -> int:
        return int(self.g.size)

    @classmethod
    def from_modes(cls, g, omega, temperature_T: float = 0.0, hbar: float = 1.0, kB: float = 1.0):
        g = np.atleast_1d(np.asarray(g, dtype=complex))
        omega = np.atleast_1d(np.asarray(omega, dtype=float))
        if g.shape != omega.shape:
            raise InvalidParameterError("g and omega must have the same length")
        return cls(g, omega, thermal_occupation(omega, temperature_T, hbar, kB),
                   float(temperature_T), float(hbar), float(kB))


def discretize_bath(J: SpectralDensity, T: float, n_modes: int, omega_max: float,
                    scheme: str = "uniform-midpoint", hbar: float = 1.0, kB: float = 1.0) -> DiscreteBath:
    """Discretize ``J`` into ``n_modes`` modes with ``|g|^2 = hbar J(w) w_quad``."""
    if n_modes < 1:
        raise InvalidParameterError("n_modes must be >= 1")
    if not omega_max > 0:
        raise InvalidParameterError("omega_max must be positive")
    if scheme == "uniform-midpoint":
        dw = omega_max / n_modes
        omega = (np.arange(n_modes) + 0.5) * dw
        w = np.full(n_modes, dw)
    elif scheme == "gauss-legendre":
        x, wq = np.polynomial.legendre.leggauss(n_modes)
        omega = 0.5 * omega_max * (x + 1.0)
        w = 0.5 * omega_max * wq
    else:
        raise InvalidParameterError(f"unknown discretization scheme {scheme!r}")
    g = np.sqrt(hbar * J(omega) * w).astype(complex)
    if J.gamma == 0:
        total = covered = 0.0
    else:
        total = spectral_integral(J)
        covered = spectral_integral(J, upper=min(omega_max, J.breakpoints()[-1]))
    warn = bool(total > 0 and covered < 0.99 * total)
    if warn:
        warnings.warn(f"omega_max={omega_max} covers only {covered / total:.3%} of int J", RuntimeWarning)
    err = abs(float(np.sum(np.abs(g) ** 2)) - hbar * total)
    return DiscreteBath(g, omega, thermal_occupation(omega, T, hbar, kB), float(T), float(hbar),
                        float(kB), err, warn)


def kernel_from_bath(bath: DiscreteBath, grid: TimeGrid, hbar: Optional[float] = None,
                     mass_M: float = 1.0) -> BathKernel:
    """Mode-sum kernel ``sum |g|^2 [(n+1) e^{-i w tau} + n e^{i w tau}]``."""
    hbar = bath.hbar if hbar is None else hbar
    t = grid.t
    g2 = np.abs(bath.g) ** 2
    ph = np.outer(t, bath.omega)
    c, s = np.cos(ph), np.sin(ph)
    nu = c @ (g2 * (2.0 * bath.nbar + 1.0))
    eta = -(s @ g2) / hbar
    eta_dot = -(c @ (g2 * bath.omega)) / hbar
    gamma_cl = (2.0 / mass_M) * (c @ (g2 / bath.omega)) / hbar
    return _kernel_from_parts(grid, nu, eta, eta_dot, gamma_cl, bath.temperature_T, hbar,
                              bath.kB, mass_M)
