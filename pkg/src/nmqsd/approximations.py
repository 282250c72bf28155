"""Noise-independent approximations of the drift operator ``Obar(t)``.

``weak_coupling_obar`` integrates the freely evolved coupling operator against
the kernel; used in the convolutionless master equation it gives the Redfield
equation with initial slip. ``post_markov_obar`` keeps the first two kernel
moments ``A_0`` and ``A_1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from nmqsd.errors import InvalidParameterError
from nmqsd.io import write_csv
from nmqsd.kernels import BathKernel, TimeGrid


@dataclass(frozen=True)
class ApproxObar:
    scheme: str
    grid: TimeGrid
    Obar_series: np.ndarray
    A0: np.ndarray
    A1: np.ndarray

    def to_csv(self, path, meta=None):
        write_csv(path, ["t", "re_A0", "im_A0", "re_A1", "im_A1"],
                  [self.grid.t, self.A0.real, self.A0.imag, self.A1.real, self.A1.imag],
                  meta=meta)


def kernel_moments(kernel: BathKernel, grid: TimeGrid):
    """``A_n(t) = int_0^t s^n alpha(s) ds`` for ``n = 0, 1`` by cumulative trapezoid."""
    alpha = kernel.alpha[:grid.n_points]
    t = grid.t
    A0 = cumulative_trapezoid(alpha, t, initial=0)
    A1 = cumulative_trapezoid(t * alpha, t, initial=0)
    return A0, A1


def weak_coupling_obar(H, L, kernel: BathKernel, grid: TimeGrid, hbar: float = 1.0) -> ApproxObar:
    """``Obar_0(t) = int_0^t alpha(s) e^{-iHs/hbar} L e^{iHs/hbar} ds``.

    Works in the eigenbasis of ``H`` where each matrix element picks up a
    single phase, then accumulates with the trapezoid rule.
    """
    H = np.asarray(H, dtype=complex)
    L = np.asarray(L, dtype=complex)
    E, V = np.linalg.eigh(H)
    L_eig = V.conj().T @ L @ V
    bohr = (E[:, None] - E[None, :]) / hbar
    alpha = kernel.alpha[:grid.n_points]
    integrand = alpha[:, None, None] * np.exp(-1j * bohr[None] * grid.t[:, None, None])
    weights = cumulative_trapezoid(integrand, grid.t, axis=0, initial=0)
    Obar = V @ (weights * L_eig[None]) @ V.conj().T
    A0, A1 = kernel_moments(kernel, grid)
    return ApproxObar("weak-coupling", grid, Obar, A0, A1)


def post_markov_obar(H, L, kernel: BathKernel, grid: TimeGrid, hbar: float = 1.0,
                     order: int = 1) -> ApproxObar:
    """``A_0 L + A_1 (-(i/hbar)[H, L] + A_0 [L, L^dagger] L)``; order 0 keeps only ``A_0 L``."""
    if order not in (0, 1):
        raise InvalidParameterError("order must be 0 or 1")
    H = np.asarray(H, dtype=complex)
    L = np.asarray(L, dtype=complex)
    A0, A1 = kernel_moments(kernel, grid)
    Obar = A0[:, None, None] * L[None]
    if order == 1:
        Ld = L.conj().T
        comm_HL = H @ L - L @ H
        comm_LLd_L = (L @ Ld - Ld @ L) @ L
        Obar = Obar + A1[:, None, None] * ((-1j / hbar) * comm_HL[None]
                                          + A0[:, None, None] * comm_LLd_L[None])
    return ApproxObar(f"post-markov-{order}", grid, Obar, A0, A1)
