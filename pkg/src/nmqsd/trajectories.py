"""Linear stochastic Schrödinger equations in a truncated basis.

All schemes reduce to the linear form

    d psi / dt = (-i H / hbar + A(t)) psi + s_k(t) B psi

with a per-time matrix ``A(t)``, a fixed coupling ``B`` and a per-trajectory
scalar drive ``s_k(t)``. A batch of trajectories is advanced together with an
integrating-factor Heun step: the free rotation ``exp(-i H dt / hbar)`` is
applied exactly and the remaining terms use drive values at both step
endpoints. For white
noise the drive is ``dW*/dt`` on the step and is used by both stages, which
is the Stratonovich-consistent choice.

Ensembles are reduced in fixed-size chunks whose partial sums are combined
pairwise in chunk order, so results do not depend on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from nmqsd.errors import InvalidParameterError
from nmqsd.io import write_csv
from nmqsd.kernels import TimeGrid
from nmqsd.memory import trapezoid_weights
from nmqsd.noise import NoisePath, white_noise_increments

EPS_TRUNC = 1e-6
GROWTH_LIMIT = 1e6
DEFAULT_CHUNK = 250


@dataclass(frozen=True)
class SystemModel:
    """Operators of the system in its truncated basis.

    For ``kind="oscillator"`` ``H`` is the exact diagonal ``hbar Omega (n + 1/2)``
    and ``q``, ``p`` come from the truncated ladder operator. For
    ``kind="two-level"`` ``H = hbar Omega sigma_z / 2``, ``a`` is the lowering
    operator, ``q = sigma_x`` and ``p = sigma_y``.
    """

    kind: str
    Omega: float
    mass_M: float
    hbar: float
    dim: int
    H: np.ndarray
    a: np.ndarray
    q: np.ndarray
    p: np.ndarray

    @property
    def fock_dim(self) -> int:
        return self.dim

    def coherent_state(self, beta: complex) -> np.ndarray:
        """Truncated and renormalized coherent state (ground/excited superposition for two levels)."""
        n = np.arange(self.dim)
        logfact = np.cumsum(np.log(np.maximum(n, 1)))
        amp = np.exp(-0.5 * abs(beta) ** 2 - 0.5 * logfact) * complex(beta) ** n
        return (amp / np.linalg.norm(amp)).astype(complex)

    def basis_state(self, n: int) -> np.ndarray:
        v = np.zeros(self.dim, dtype=complex)
        v[n] = 1.0
        return v


def build_system(Omega: float, mass_M: float = 1.0, hbar: float = 1.0, fock_dim: int = 10,
                 kind: str = "oscillator") -> SystemModel:
    if Omega <= 0 or mass_M <= 0 or hbar <= 0:
        raise InvalidParameterError("Omega, mass_M and hbar must be positive")
    if kind == "oscillator":
        if fock_dim < 4:
            raise InvalidParameterError("the oscillator needs fock_dim >= 4")
        n = np.arange(fock_dim)
        a = np.diag(np.sqrt(n[1:].astype(float)), 1).astype(complex)
        H = np.diag(hbar * Omega * (n + 0.5)).astype(complex)
        q = np.sqrt(hbar / (2 * mass_M * Omega)) * (a + a.conj().T)
        p = 1j * np.sqrt(hbar * mass_M * Omega / 2) * (a.conj().T - a)
        return SystemModel(kind, float(Omega), float(mass_M), float(hbar), fock_dim, H, a, q, p)
    if kind == "two-level":
        sz = np.diag([1.0, -1.0]).astype(complex)
        sm = np.array([[0, 0], [1, 0]], dtype=complex)
        sx = np.array([[0, 1], [1, 0]], dtype=complex)
        sy = np.array([[0, -1j], [1j, 0]])
        return SystemModel(kind, float(Omega), float(mass_M), float(hbar), 2,
                           0.5 * hbar * Omega * sz, sm, sx, sy)
    raise InvalidParameterError(f"unknown system kind {kind!r}")


# --- batched stepping --------------------------------------------------------

@dataclass(frozen=True)
class LinearSse:
    """``d psi/dt = (-i H/hbar + A(t)) psi + s(t) B psi``.

    ``H_over_hbar`` is propagated exactly; ``A`` is either one matrix or a
    ``(n_points, d, d)`` series; the drive is ``(n_traj, n_points)`` for smooth
    drives or ``(n_traj, n_steps)`` for white noise.
    """

    H_over_hbar: np.ndarray
    A: np.ndarray
    B: np.ndarray
    white: bool = False

    def A_at(self, n):
        return self.A if self.A.ndim == 2 else self.A[n]


def _free_propagator(H_over_hbar, dt):
    E, V = np.linalg.eigh(H_over_hbar)
    return (V * np.exp(-1j * E * dt)[None, :]) @ V.conj().T


def _step_batch(sse: LinearSse, psi: np.ndarray, drive: np.ndarray, grid: TimeGrid,
                on_sample: Callable[[int, np.ndarray], None], sample_every: int = 1):
    """Integrating-factor Heun: the free rotation is exact, the rest second order."""
    dt = grid.dt
    BT = sse.B.T
    UT = _free_propagator(sse.H_over_hbar, dt).T
    on_sample(0, psi)
    for n in range(grid.n_steps):
        s0 = drive[:, n]
        s1 = drive[:, n] if sse.white else drive[:, n + 1]
        k1 = psi @ sse.A_at(n).T + s0[:, None] * (psi @ BT)
        pred = (psi + dt * k1) @ UT
        k2 = pred @ sse.A_at(n + 1).T + s1[:, None] * (pred @ BT)
        psi = (psi + 0.5 * dt * k1) @ UT + 0.5 * dt * k2
        if (n + 1) % sample_every == 0:
            on_sample((n + 1) // sample_every, psi)
    return psi


@dataclass(frozen=True)
class TrajectoryRecord:
    """One trajectory: unnormalized states on the sample grid."""

    t: np.ndarray
    states: np.ndarray
    seed: Optional[int]
    trajectory_index: Optional[int]
    tail_population: float
    truncation_flag: bool
    unstable: bool

    @property
    def norm2(self) -> np.ndarray:
        return np.sum(np.abs(self.states) ** 2, axis=1)


def _tail_fraction(psi):
    n2 = np.sum(np.abs(psi) ** 2, axis=-1)
    tail = np.sum(np.abs(psi[..., -2:]) ** 2, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(n2 > 0, tail / n2, 0.0)


def _single(sse: LinearSse, drive: np.ndarray, psi0, grid: TimeGrid, seed=None, index=None,
            tail_check: bool = True) -> TrajectoryRecord:
    states = np.zeros((grid.n_points, psi0.size), dtype=complex)

    def keep(k, psi):
        states[k] = psi[0]

    _step_batch(sse, np.asarray(psi0, dtype=complex)[None, :], drive[None, :], grid, keep)
    n2 = np.sum(np.abs(states) ** 2, axis=1)
    unstable = bool(not np.all(np.isfinite(states)) or np.max(n2) > GROWTH_LIMIT * n2[0])
    tail = float(np.max(_tail_fraction(states))) if tail_check else 0.0
    return TrajectoryRecord(grid.t, states, seed, index, tail, tail > EPS_TRUNC, unstable)


def _markov_sse(model, L, gamma):
    if gamma < 0:
        raise InvalidParameterError("gamma must be non-negative")
    A = -0.5 * gamma * (L.conj().T @ L)
    return LinearSse(model.H / model.hbar, A, np.asarray(L, dtype=complex), white=True)


def _convolutionless_sse(model, L, Obar_series):
    Obar = np.asarray(Obar_series, dtype=complex)
    A = -np.einsum("ij,...jk->...ik", L.conj().T, Obar)
    return LinearSse(model.H / model.hbar, A, np.asarray(L, dtype=complex))


def _qbm_sse(model, coeffs):
    M, Om, hb = model.mass_M, coeffs.Omega, model.hbar
    q2 = model.q @ model.q
    qp = model.q @ model.p
    A = -(M * Om * coeffs.F[:, None, None] * q2[None] + coeffs.G[:, None, None] * qp[None]) / hb
    return LinearSse(model.H / hb, A, model.q / hb)


def qbm_history_matrix(coeffs) -> np.ndarray:
    """``W[n, k]`` with ``i sum_k W[n, k] z*_k`` the trapezoid noise-history integral."""
    n_pts, dt = coeffs.grid.n_points, coeffs.grid.dt
    W = np.zeros((n_pts, n_pts), dtype=complex)
    for n in range(1, n_pts):
        W[n, :n + 1] = trapezoid_weights(n, dt) * coeffs.J_int[n, :n + 1]
    return W


def qbm_drive(coeffs, z_star: np.ndarray, history: Optional[np.ndarray] = None) -> np.ndarray:
    """``z*_t + i int_0^t J_int(t, s) z*_s ds`` for each row of ``z_star``."""
    W = qbm_history_matrix(coeffs) if history is None else history
    z_star = np.atleast_2d(z_star)
    return z_star + 1j * (z_star @ W.T)


def integrate_markov_qsd(model: SystemModel, L, gamma: float, psi0, grid: TimeGrid, seed: int,
                         index: int = 0) -> TrajectoryRecord:
    """Linear QSD with white noise ``M{z_t z*_s} = gamma delta(t - s)`` for one trajectory."""
    sse = _markov_sse(model, np.asarray(L, dtype=complex), gamma)
    dW = white_noise_increments(seed, index, grid.n_steps, grid.dt)
    return _single(sse, np.sqrt(gamma) * dW / grid.dt, psi0, grid, seed, index)


def integrate_convolutionless(model: SystemModel, L, Obar_series, noise: NoisePath, psi0,
                              grid: TimeGrid) -> TrajectoryRecord:
    """``d psi = (-iH/hbar + L z*_t - L^dagger Obar(t)) psi`` along one colored noise path."""
    sse = _convolutionless_sse(model, np.asarray(L, dtype=complex), Obar_series)
    return _single(sse, noise.z_star[:grid.n_points], psi0, grid, noise.seed,
                   noise.trajectory_index)


def integrate_qbm_sse(model: SystemModel, coeffs, noise: NoisePath, psi0,
                      grid: Optional[TimeGrid] = None) -> TrajectoryRecord:
    """QBM SSE with drift ``-M Omega F q^2 - G q p`` and the noise-history drive."""
    grid = coeffs.grid if grid is None else grid
    if grid.n_points != coeffs.grid.n_points:
        raise InvalidParameterError("coefficients and trajectory grid differ")
    drive = qbm_drive(coeffs, noise.z_star[:grid.n_points])[0]
    return _single(_qbm_sse(model, coeffs), drive, psi0, grid, noise.seed, noise.trajectory_index)


# --- ensembles ---------------------------------------------------------------

@dataclass
class EnsembleSums:
    """Additive partial sums over a block of trajectories at the sample times."""

    rho: np.ndarray
    obs: np.ndarray
    obs_sq: np.ndarray
    n_traj: int
    tail_max: float
    n_truncated: int
    n_unstable: int

    def __add__(self, other):
        return EnsembleSums(self.rho + other.rho, self.obs + other.obs,
                            self.obs_sq + other.obs_sq, self.n_traj + other.n_traj,
                            max(self.tail_max, other.tail_max),
                            self.n_truncated + other.n_truncated,
                            self.n_unstable + other.n_unstable)


def pairwise_sum(items: Sequence):
    """Sum in a fixed binary-tree order."""
    items = list(items)
    if not items:
        raise InvalidParameterError("nothing to sum")
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


@dataclass(frozen=True)
class EnsembleProblem:
    """Everything a worker needs to run a block of trajectories.

    ``drive_source`` is ``("white", gamma)``, ``("colored", sampler)`` or
    ``("qbm", sampler, history_matrix)``.
    """

    sse: LinearSse
    psi0: np.ndarray
    grid: TimeGrid
    seed: int
    drive_source: tuple
    observables: tuple = ()
    sample_every: int = 1

    def drives(self, indices):
        kind = self.drive_source[0]
        if kind == "white":
            gamma = self.drive_source[1]
            dW = np.stack([white_noise_increments(self.seed, i, self.grid.n_steps, self.grid.dt)
                           for i in indices])
            return np.sqrt(gamma) * dW / self.grid.dt
        sampler = self.drive_source[1]
        z_star = sampler.sample_array(self.seed, indices)[:, :self.grid.n_points]
        if kind == "colored":
            return z_star
        if kind == "qbm":
            return z_star + 1j * (z_star @ self.drive_source[2].T)
        raise InvalidParameterError(f"unknown drive source {kind!r}")


def run_block(problem: EnsembleProblem, indices: Sequence[int]) -> EnsembleSums:
    indices = list(indices)
    n_s = problem.grid.n_steps // problem.sample_every + 1
    d = problem.psi0.size
    ops = [np.asarray(o, dtype=complex) for o in problem.observables]
    rho = np.zeros((n_s, d, d), dtype=complex)
    obs = np.zeros((len(ops), n_s), dtype=complex)
    obs_sq = np.zeros((len(ops), n_s, 2))
    n0 = float(np.vdot(problem.psi0, problem.psi0).real)
    tail = np.zeros(len(indices))
    peak = np.zeros(len(indices))
    finite = np.ones(len(indices), dtype=bool)

    def accumulate(k, psi):
        rho[k] = np.einsum("bi,bj->ij", psi, psi.conj())
        for m, op in enumerate(ops):
            vals = np.einsum("bi,bi->b", psi.conj(), psi @ op.T)
            obs[m, k] = vals.sum()
            obs_sq[m, k, 0] = np.sum(vals.real ** 2)
            obs_sq[m, k, 1] = np.sum(vals.imag ** 2)
        np.maximum(tail, _tail_fraction(psi), out=tail)
        np.maximum(peak, np.sum(np.abs(psi) ** 2, axis=1), out=peak)
        finite[:] &= np.all(np.isfinite(psi), axis=1)

    psi = np.repeat(problem.psi0[None, :].astype(complex), len(indices), axis=0)
    _step_batch(problem.sse, psi, problem.drives(indices), problem.grid, accumulate,
                problem.sample_every)
    unstable = (~finite) | (peak > GROWTH_LIMIT * n0)
    return EnsembleSums(rho, obs, obs_sq, len(indices), float(np.max(tail)),
                        int(np.sum(tail > EPS_TRUNC)), int(np.sum(unstable)))


def _run_block_star(args):
    return run_block(*args)


@dataclass(frozen=True)
class EnsembleResult:
    """Ensemble means on the sample grid.

    ``rho_raw`` is the plain mean of ``|psi><psi|``; ``obs_mean`` and
    ``obs_se`` are means and complex standard errors of ``<psi|X|psi>``.
    """

    t: np.ndarray
    rho_raw: np.ndarray
    obs_mean: np.ndarray
    obs_se: np.ndarray
    n_traj: int
    tail_max: float
    n_truncated: int
    n_unstable: int

    def density(self, normalize: str = "trace-normalized") -> np.ndarray:
        return _normalize(self.rho_raw, normalize)

    @property
    def flagged(self) -> bool:
        return self.n_truncated > 0 or self.n_unstable > 0


def run_ensemble(problem: EnsembleProblem, n_traj: int, workers: int = 1,
                 chunk: int = DEFAULT_CHUNK, start_index: int = 0) -> EnsembleResult:
    if n_traj < 1:
        raise InvalidParameterError("n_traj must be >= 1")
    blocks = [range(start_index + lo, start_index + min(lo + chunk, n_traj))
              for lo in range(0, n_traj, chunk)]
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block_star, [(problem, b) for b in blocks]))
    else:
        parts = [run_block(problem, b) for b in blocks]
    total = pairwise_sum(parts)
    N = total.n_traj
    rho = total.rho / N
    rho = 0.5 * (rho + np.conj(np.swapaxes(rho, -1, -2)))
    mean = total.obs / N
    var_re = np.maximum(total.obs_sq[..., 0] / N - mean.real ** 2, 0.0)
    var_im = np.maximum(total.obs_sq[..., 1] / N - mean.imag ** 2, 0.0)
    se = np.sqrt((var_re + var_im) * N / max(N - 1, 1) / N)
    t = problem.grid.t[::problem.sample_every]
    return EnsembleResult(t, rho, mean, se, N, total.tail_max, total.n_truncated,
                          total.n_unstable)


def markov_problem(model, L, gamma, psi0, grid, seed, observables=(), sample_every=1):
    return EnsembleProblem(_markov_sse(model, np.asarray(L, dtype=complex), gamma),
                           np.asarray(psi0, dtype=complex), grid, int(seed), ("white", gamma),
                           tuple(observables), sample_every)


def convolutionless_problem(model, L, Obar_series, psi0, grid, seed, sampler, observables=(),
                            sample_every=1):
    return EnsembleProblem(_convolutionless_sse(model, np.asarray(L, dtype=complex),
                                                np.asarray(Obar_series)[:grid.n_points]),
                           np.asarray(psi0, dtype=complex), grid, int(seed),
                           ("colored", sampler), tuple(observables), sample_every)


def qbm_problem(model, coeffs, psi0, seed, sampler, observables=(), sample_every=1):
    return EnsembleProblem(_qbm_sse(model, coeffs), np.asarray(psi0, dtype=complex),
                           coeffs.grid, int(seed), ("qbm", sampler, qbm_history_matrix(coeffs)),
                           tuple(observables), sample_every)


def _normalize(rho, normalize):
    if normalize == "raw":
        return rho
    if normalize == "trace-normalized":
        tr = np.real(np.trace(rho, axis1=-2, axis2=-1))
        return rho / tr[..., None, None]
    raise InvalidParameterError("normalize must be 'raw' or 'trace-normalized'")


def ensemble_density(records: Sequence[TrajectoryRecord], normalize: str = "raw") -> np.ndarray:
    """Mean of ``|psi><psi|`` over records, summed pairwise in record order."""
    if not records:
        raise InvalidParameterError("need at least one record")
    shape = records[0].states.shape
    if any(r.states.shape != shape for r in records):
        raise InvalidParameterError("records must share a grid and dimension")
    outer = [np.einsum("ti,tj->tij", r.states, r.states.conj()) for r in records]
    rho = pairwise_sum(outer) / len(records)
    rho = 0.5 * (rho + np.conj(np.swapaxes(rho, -1, -2)))
    return _normalize(rho, normalize)


def write_observables_csv(path, t, rho_raw, model: SystemModel, meta=None):
    """``t, re_q, re_p, var_q, var_p, cov_qp, purity, trace_raw`` of a density series."""
    from nmqsd.master import observables
    tab = observables(rho_raw, model)
    write_csv(path, ["t", "re_q", "re_p", "var_q", "var_p", "cov_qp", "purity", "trace_raw"],
              [t, tab["q"], tab["p"], tab["var_q"], tab["var_p"], tab["cov_qp"],
               tab["purity"], tab["trace"]], meta=meta)
