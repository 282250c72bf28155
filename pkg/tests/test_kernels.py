import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmqsd.errors import InvalidParameterError
from nmqsd.io import read_csv
from nmqsd.kernels import (DiscreteBath, TimeGrid, classical_damping_kernel, discretize_bath,
                           exponential_kernel, kernel_from_bath, kernel_from_function, make_kernel,
                           make_spectral_density, spectral_integral, thermal_occupation)


def ohmic_exp_alpha(tau, gamma, Lam, M=1.0, hbar=1.0):
    return hbar * M * gamma * Lam ** 2 / (1 + 1j * Lam * tau) ** 2


def test_time_grid_basics():
    g = TimeGrid.from_t_max(1.0, 0.1)
    assert g.n_steps == 10 and g.n_points == 11
    assert g.t_max == pytest.approx(1.0)
    assert g.refined(2).n_steps == 20


@pytest.mark.parametrize("kind", ["ohmic-exp", "ohmic-lor"])
def test_spectral_density_rejects_bad_params(kind):
    with pytest.raises(InvalidParameterError):
        make_spectral_density(kind, -0.1, 1.0)
    with pytest.raises(InvalidParameterError):
        make_spectral_density(kind, 0.1, 0.0)


def test_spectral_integral_closed_forms():
    # int M gamma w e^{-w/L} = M gamma L^2 ; squared Lorentzian gives M gamma L^2 / 2
    assert spectral_integral(make_spectral_density("ohmic-exp", 0.1, 5.0)) == pytest.approx(2.5, rel=1e-9)
    lor = spectral_integral(make_spectral_density("ohmic-lor", 0.1, 5.0))
    assert lor == pytest.approx(1.25, rel=1e-4)


def test_zero_temperature_ohmic_exp_matches_closed_form():
    grid = TimeGrid.from_t_max(10.0, 0.05)
    K = make_kernel(make_spectral_density("ohmic-exp", 0.1, 5.0), 0.0, grid)
    exact = ohmic_exp_alpha(grid.t, 0.1, 5.0)
    assert np.max(np.abs(K.alpha - exact)) < 1e-9
    assert K.alpha[0] == pytest.approx(2.5)
    # frozen reference values of the closed form
    assert K.alpha[20].real == pytest.approx(2.5 * (1 - 25) / (1 + 25) ** 2, rel=1e-9)
    gcl_exact = 2 * 0.1 * 5.0 / (1 + 25.0 * grid.t ** 2)
    assert np.max(np.abs(K.gamma_cl - gcl_exact)) < 1e-9
    eta_exact = -0.1 * 25 * 2 * 5 * grid.t / (1 + 25 * grid.t ** 2) ** 2
    assert np.max(np.abs(K.eta - eta_exact)) < 1e-9


def test_kernel_symmetry_and_hbar_scaling():
    grid = TimeGrid.from_t_max(3.0, 0.05)
    J = make_spectral_density("ohmic-exp", 0.2, 2.0)
    K1 = make_kernel(J, 0.5, grid, hbar=1.0)
    K2 = make_kernel(J, 0.5, grid, hbar=2.0, kB=2.0)  # same hbar w / kB T
    full = K1.alpha_full
    assert np.allclose(full[::-1], np.conj(full))
    assert np.allclose(K2.nu, 2 * K1.nu, rtol=1e-7, atol=1e-12)
    assert np.allclose(K2.eta, K1.eta, rtol=1e-7, atol=1e-12)


def test_finite_temperature_raises_noise_kernel():
    grid = TimeGrid.from_t_max(2.0, 0.05)
    J = make_spectral_density("ohmic-exp", 0.1, 2.0)
    K0 = make_kernel(J, 0.0, grid)
    KT = make_kernel(J, 2.0, grid)
    assert KT.nu[0] > K0.nu[0]
    assert np.allclose(KT.eta, K0.eta, atol=1e-10)


def test_classical_damping_kernel_derivative_is_eta():
    grid = TimeGrid.from_t_max(3.0, 0.001)
    J = make_spectral_density("ohmic-lor", 0.1, 2.0)
    K = make_kernel(J, 0.0, grid)
    d_gcl = np.gradient(K.gamma_cl, grid.dt, edge_order=2)
    assert np.max(np.abs(d_gcl - 2 * K.eta)) < 1e-4 * np.max(np.abs(K.eta))
    assert np.allclose(classical_damping_kernel(J, 1.0, grid), K.gamma_cl)


def test_kernel_is_positive_semidefinite():
    grid = TimeGrid.from_t_max(10.0, 0.05)
    K = make_kernel(make_spectral_density("ohmic-exp", 0.1, 5.0), 0.0, grid)
    assert K.check_psd() > -1e-10


def test_zero_coupling_kernel_is_zero():
    grid = TimeGrid.from_t_max(1.0, 0.1)
    K = make_kernel(make_spectral_density("ohmic-exp", 0.0, 1.0), 0.3, grid)
    assert not np.any(K.alpha) and not np.any(K.gamma_cl)


def test_discrete_bath_approaches_continuum():
    grid = TimeGrid.from_t_max(5.0, 0.05)
    J = make_spectral_density("ohmic-exp", 0.1, 2.0)
    bath = discretize_bath(J, 0.0, 400, 40.0)
    Kb = kernel_from_bath(bath, grid)
    Kc = make_kernel(J, 0.0, grid)
    assert np.max(np.abs(Kb.alpha - Kc.alpha)) / abs(Kc.alpha[0]) < 1e-3
    assert not bath.coverage_warning


def test_discretization_coverage_warning():
    J = make_spectral_density("ohmic-exp", 0.1, 2.0)
    with pytest.warns(RuntimeWarning):
        bath = discretize_bath(J, 0.0, 4, 4.0)
    assert bath.coverage_warning


def test_discrete_bath_thermal_kernel():
    grid = TimeGrid.from_t_max(2.0, 0.1)
    bath = DiscreteBath.from_modes([0.3], [1.5], temperature_T=1.0)
    K = kernel_from_bath(bath, grid)
    n = thermal_occupation(1.5, 1.0)
    exact = 0.09 * ((n + 1) * np.exp(-1.5j * grid.t) + n * np.exp(1.5j * grid.t))
    assert np.allclose(K.alpha, exact)


def test_exponential_kernel_and_csv_round_trip(tmp_path):
    grid = TimeGrid.from_t_max(1.0, 0.1)
    K = exponential_kernel(0.4, 3.0, grid)
    assert K.alpha[0] == pytest.approx(0.6)
    path = tmp_path / "k.csv"
    K.to_csv(path, meta={"seed": 3})
    meta, cols = read_csv(path)
    assert meta["seed"] == "3"
    assert np.allclose(cols["re_alpha"][grid.n_steps:], K.alpha.real, rtol=0, atol=1e-15)
    assert np.all(np.isnan(cols["gamma_cl"]))


def test_kernel_from_function_finite_difference_eta_dot():
    grid = TimeGrid.from_t_max(2.0, 0.001)
    K = kernel_from_function(lambda t: ohmic_exp_alpha(t, 0.1, 1.0), grid)
    exact = -0.1 * 2 * (1 - 3 * grid.t ** 2) / (1 + grid.t ** 2) ** 3
    assert np.max(np.abs(K.eta_dot - exact)) < 1e-5


@settings(max_examples=15, deadline=None)
@given(gamma=st.floats(0.01, 1.0), lam=st.floats(0.5, 5.0))
def test_kernel_linear_in_gamma(gamma, lam):
    grid = TimeGrid.from_t_max(1.0, 0.1)
    K = make_kernel(make_spectral_density("ohmic-exp", gamma, lam), 0.0, grid)
    assert np.allclose(K.alpha, ohmic_exp_alpha(grid.t, gamma, lam), rtol=1e-8, atol=1e-12)


def test_tabulated_density_without_gamma_cl():
    w = np.linspace(0.0, 5.0, 51)
    J = make_spectral_density("tabulated", 1.0, 1.0, omega_samples=w, J_samples=0.1 + 0 * w)
    grid = TimeGrid.from_t_max(1.0, 0.1)
    K = make_kernel(J, 0.0, grid)
    assert K.gamma_cl is None
    assert K.alpha[0].real == pytest.approx(0.5, rel=1e-6)
    with pytest.raises(InvalidParameterError):
        classical_damping_kernel(J, 1.0, grid)
