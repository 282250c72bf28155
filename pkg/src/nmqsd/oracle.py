"""Brute-force reference: system plus a few truncated bath oscillators.

The total Hamiltonian is built as a sparse Kronecker sum with the system as
the leading tensor factor and propagated with ``scipy.sparse.linalg.expm_multiply``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from nmqsd.errors import InvalidParameterError, NumericalError
from nmqsd.kernels import DiscreteBath, TimeGrid

DEFAULT_CAP = 20000


@dataclass(frozen=True)
class FullModel:
    system: object
    bath: DiscreteBath
    bath_dims: tuple
    coupling: str
    H_tot: sp.csr_matrix

    @property
    def total_dim(self) -> int:
        return self.H_tot.shape[0]


def _ladder(d):
    return sp.diags(np.sqrt(np.arange(1, d, dtype=float)), 1, format="csr").astype(complex)


def _embed(op, k, dims):
    """``I x ... x op (slot k) x ... x I`` as a sparse matrix."""
    out = sp.identity(1, dtype=complex, format="csr")
    for j, d in enumerate(dims):
        out = sp.kron(out, op if j == k else sp.identity(d, dtype=complex, format="csr"),
                      format="csr")
    return out


def build_full_model(system, bath: DiscreteBath, bath_dims: Sequence[int],
                     coupling: str = "position", cap: int = DEFAULT_CAP) -> FullModel:
    """``H + hbar sum (g* L b^dagger + g L^dagger b) + sum hbar w b^dagger b``.

    ``coupling="position"`` uses ``L = q / hbar``; ``coupling="rwa"`` uses ``L = a``.
    No counterterm is added: the bare ``Omega`` is the one in ``H``.
    """
    bath_dims = tuple(int(d) for d in bath_dims)
    if len(bath_dims) != bath.n_modes:
        raise InvalidParameterError("need one truncation per bath mode")
    if any(d < 2 for d in bath_dims):
        raise InvalidParameterError("bath truncations must be >= 2")
    dims = (system.dim,) + bath_dims
    total = int(np.prod(dims))
    if total > cap:
        raise InvalidParameterError(f"total dimension {total} exceeds cap {cap}")
    hb = system.hbar
    if coupling == "position":
        L = sp.csr_matrix(system.q / hb)
    elif coupling == "rwa":
        L = sp.csr_matrix(system.a)
    else:
        raise InvalidParameterError(f"unknown coupling {coupling!r}")
    H = _embed(sp.csr_matrix(system.H), 0, dims)
    L_full = _embed(L, 0, dims)
    Ld_full = _embed(L.conj().T.tocsr(), 0, dims)
    for k, (g, w) in enumerate(zip(bath.g, bath.omega)):
        b = _ladder(bath_dims[k])
        bk = _embed(b, k + 1, dims)
        bdk = _embed(b.conj().T.tocsr(), k + 1, dims)
        H = H + hb * w * (bdk @ bk)
        H = H + hb * (np.conj(g) * (L_full @ bdk) + g * (Ld_full @ bk))
    H = sp.csr_matrix(H)
    if abs(H - H.conj().T).max() > 1e-12 * max(abs(H).max(), 1.0):
        raise NumericalError("assembled total Hamiltonian is not Hermitian")
    return FullModel(system, bath, bath_dims, coupling, H)


def product_state(psi_system, bath_dims: Sequence[int], bath_levels=None) -> np.ndarray:
    """System state times Fock states of the bath (vacuum by default)."""
    out = np.asarray(psi_system, dtype=complex)
    levels = [0] * len(bath_dims) if bath_levels is None else list(bath_levels)
    for d, n in zip(bath_dims, levels):
        e = np.zeros(d, dtype=complex)
        e[n] = 1.0
        out = np.kron(out, e)
    return out


@dataclass(frozen=True)
class TotalSeries:
    t: np.ndarray
    states: np.ndarray
    norm_drift: float
    energy_drift: float


def propagate_full(model: FullModel, psi_total_0, grid: TimeGrid) -> TotalSeries:
    """Exact propagation on the grid; reports relative norm and energy drift."""
    psi0 = np.asarray(psi_total_0, dtype=complex)
    if psi0.shape != (model.total_dim,):
        raise InvalidParameterError("initial state has the wrong dimension")
    n0 = np.linalg.norm(psi0)
    if abs(n0 - 1.0) > 1e-8:
        raise InvalidParameterError("initial total state must have unit norm")
    A = (-1j / model.system.hbar) * model.H_tot
    states = expm_multiply(A.tocsc(), psi0, start=0.0, stop=grid.t_max, num=grid.n_points,
                           endpoint=True)
    states = np.asarray(states)
    norms = np.linalg.norm(states, axis=1)
    energy = np.real(np.einsum("ti,ti->t", states.conj(), (model.H_tot @ states.T).T))
    e0 = energy[0]
    norm_drift = float(np.max(np.abs(norms - 1.0)))
    energy_drift = float(np.max(np.abs(energy - e0)) / max(abs(e0), 1e-300))
    return TotalSeries(grid.t.copy(), states, norm_drift, energy_drift)


def reduced_density(total, system_dim: int) -> np.ndarray:
    """Partial trace over everything after the first ``system_dim`` factor."""
    states = np.asarray(getattr(total, "states", total))
    if states.ndim == 1:
        states = states[None]
    n_t, n = states.shape
    if n % system_dim:
        raise InvalidParameterError("system dimension does not divide the total dimension")
    psi = states.reshape(n_t, system_dim, n // system_dim)
    rho = np.einsum("tib,tjb->tij", psi, psi.conj())
    return 0.5 * (rho + np.conj(np.swapaxes(rho, -1, -2)))
