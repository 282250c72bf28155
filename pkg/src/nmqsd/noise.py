"""Colored complex Gaussian noise with ``M{z_t z_s*} = alpha(t - s)`` and ``M{z_t z_s} = 0``.

Every path is keyed by ``(seed, trajectory_index)`` through a
:class:`numpy.random.SeedSequence` spawn key, so paths can be generated in any
order or in parallel and are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np

from nmqsd.errors import InvalidParameterError, KernelNotPSDError
from nmqsd.io import write_csv
from nmqsd.kernels import EPS_PSD, BathKernel, DiscreteBath, TimeGrid


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for trajectory ``index`` of run ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def circular_normal(rng: np.random.Generator, size) -> np.ndarray:
    """Standard circular complex Gaussians: ``E|xi|^2 = 1``, ``E xi^2 = 0``."""
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)


@dataclass(frozen=True)
class NoisePath:
    """One realization ``z*_t`` on the grid."""

    z_star: np.ndarray
    seed: int
    trajectory_index: int

    @property
    def z(self) -> np.ndarray:
        return np.conj(self.z_star)

    def to_csv(self, path, grid: TimeGrid, meta=None):
        write_csv(path, ["t", "re_z", "im_z"], [grid.t, self.z.real, self.z.imag], meta=meta)


@dataclass(frozen=True)
class NoiseStatistics:
    empirical_covariance: np.ndarray
    empirical_pseudo: np.ndarray
    n_samples: int


class CovarianceSampler:
    """Sample ``z = A xi`` with ``A A^dagger = C``, ``C_ij = alpha(t_i - t_j)``.

    Negative eigenvalues above ``-eps_psd * lambda_max`` are clipped to zero.
    """

    def __init__(self, kernel: BathKernel, grid: TimeGrid, eps_psd: float = EPS_PSD):
        if grid.n_points > kernel.grid.n_points or not np.isclose(grid.dt, kernel.grid.dt):
            raise InvalidParameterError("kernel grid must cover the sampling grid with the same dt")
        self.grid = grid
        cov = kernel.covariance_matrix(grid.n_points)
        evals, evecs = np.linalg.eigh(cov)
        top = evals[-1]
        if top <= 0:
            self.factor = np.zeros_like(cov)
            return
        if evals[0] < -eps_psd * top:
            raise KernelNotPSDError(
                f"covariance eigenvalue {evals[0]:.3e} below -eps_psd * {top:.3e}", evals[0], top)
        self.factor = evecs * np.sqrt(np.clip(evals, 0.0, None))[None, :]

    def path(self, seed: int, index: int) -> NoisePath:
        xi = circular_normal(trajectory_rng(seed, index), self.grid.n_points)
        return NoisePath(np.conj(self.factor @ xi), int(seed), int(index))

    def sample_array(self, seed: int, indices: Iterable[int]) -> np.ndarray:
        """``z*`` for each index, stacked as ``(n_paths, n_points)``."""
        xi = np.stack([circular_normal(trajectory_rng(seed, i), self.grid.n_points)
                       for i in indices])
        return np.conj(xi @ self.factor.T)


class ModeSumSampler:
    """Thermal mode-sum sampler.

    ``z_t = sum_l g_l [sqrt(n_l + 1) xi_l e^{-i w_l t} + sqrt(n_l) zeta_l e^{i w_l t}]``
    with independent circular ``xi``, ``zeta``.
    """

    def __init__(self, bath: DiscreteBath, grid: TimeGrid):
        self.grid = grid
        phase = np.exp(-1j * np.outer(grid.t, bath.omega))
        self._down = phase * (bath.g * np.sqrt(bath.nbar + 1.0))[None, :]
        self._up = np.conj(phase) * (bath.g * np.sqrt(bath.nbar))[None, :]
        self.n_modes = bath.n_modes

    def _draw(self, seed, index):
        rng = trajectory_rng(seed, index)
        return circular_normal(rng, self.n_modes), circular_normal(rng, self.n_modes)

    def path(self, seed: int, index: int) -> NoisePath:
        xi, zeta = self._draw(seed, index)
        z = self._down @ xi + self._up @ zeta
        return NoisePath(np.conj(z), int(seed), int(index))

    def sample_array(self, seed: int, indices: Iterable[int]) -> np.ndarray:
        draws = [self._draw(seed, i) for i in indices]
        xi = np.stack([d[0] for d in draws])
        zeta = np.stack([d[1] for d in draws])
        return np.conj(xi @ self._down.T + zeta @ self._up.T)


def sample_covariance_factorization(kernel: BathKernel, grid: TimeGrid, n_samples: int,
                                    seed: int, start_index: int = 0) -> List[NoisePath]:
    """Paths ``start_index .. start_index + n_samples - 1`` from the covariance factor."""
    sampler = CovarianceSampler(kernel, grid)
    zs = sampler.sample_array(seed, range(start_index, start_index + n_samples))
    return [NoisePath(z, int(seed), start_index + k) for k, z in enumerate(zs)]


def sample_mode_sum(bath: DiscreteBath, grid: TimeGrid, n_samples: int, seed: int,
                    start_index: int = 0) -> List[NoisePath]:
    sampler = ModeSumSampler(bath, grid)
    zs = sampler.sample_array(seed, range(start_index, start_index + n_samples))
    return [NoisePath(z, int(seed), start_index + k) for k, z in enumerate(zs)]


def white_noise_increments(seed: int, index: int, n_steps: int, dt: float) -> np.ndarray:
    """Complex Wiener increments ``dW*`` with ``E|dW|^2 = dt`` and ``E dW^2 = 0``."""
    return np.sqrt(dt) * np.conj(circular_normal(trajectory_rng(seed, index), n_steps))


def estimate_statistics(paths) -> NoiseStatistics:
    """Empirical ``C_ij = <z_i z_j*>`` and pseudo-covariance ``P_ij = <z_i z_j>``.

    ``paths`` is a sequence of :class:`NoisePath` or a 2-d array of ``z*`` values.
    """
    z = np.conj(_as_z_star_array(paths))
    n = z.shape[0]
    if n < 2:
        raise InvalidParameterError("need at least two paths")
    cov = (z.T @ np.conj(z)) / n
    cov = 0.5 * (cov + cov.conj().T)
    pseudo = (z.T @ z) / n
    return NoiseStatistics(cov, pseudo, n)


def _as_z_star_array(paths) -> np.ndarray:
    if isinstance(paths, np.ndarray):
        return np.atleast_2d(paths)
    return np.stack([p.z_star for p in paths])


def covariance_errors(stats: NoiseStatistics, kernel: BathKernel):
    """``(max |C_hat - C|, max |P_hat|)`` over the sampled grid."""
    n = stats.empirical_covariance.shape[0]
    target = kernel.covariance_matrix(n)
    return (float(np.max(np.abs(stats.empirical_covariance - target))),
            float(np.max(np.abs(stats.empirical_pseudo))))


def stack_paths(paths: Sequence[NoisePath]) -> np.ndarray:
    return np.stack([p.z_star for p in paths])
