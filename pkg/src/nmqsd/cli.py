"""Config-driven experiment runner.

Usage::

    nmqsd coeffs --config run.yaml --out results/
    nmqsd trajectories --config run.yaml --workers 4 --seed 3
    nmqsd compare results/a_density.csv results/b_density.csv --out results/

Exit codes: 0 success, 2 invalid config or input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from nmqsd import __version__
from nmqsd.errors import InvalidParameterError, NumericalError

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class InitialState(_Strict):
    beta_re: float = 1.0
    beta_im: float = 0.0


class ModelBlock(_Strict):
    kind: Literal["oscillator", "two-level"] = "oscillator"
    Omega: float = Field(1.0, gt=0)
    mass: float = Field(1.0, gt=0)
    hbar: float = Field(1.0, gt=0)
    fock_dim: int = Field(12, ge=2)
    coupling: Literal["position", "rwa"] = "position"
    initial: InitialState = InitialState()


class SpectralBlock(_Strict):
    kind: str = "ohmic-exp"
    gamma: float = Field(0.05, ge=0)
    Lambda: float = Field(2.0, gt=0)


class DiscretizeBlock(_Strict):
    n_modes: int = Field(4, ge=1)
    omega_max: float = Field(4.0, gt=0)
    scheme: Literal["uniform-midpoint", "gauss-legendre"] = "uniform-midpoint"


class ModesBlock(_Strict):
    g: List[float]
    omega: List[float]


class ExponentialBlock(_Strict):
    gamma: float = Field(ge=0)
    kappa: float = Field(gt=0)


class BathBlock(_Strict):
    kernel: Literal["continuum", "modes", "exponential"] = "continuum"
    spectral_density: SpectralBlock = SpectralBlock()
    temperature: float = Field(0.0, ge=0)
    discretize: Optional[DiscretizeBlock] = None
    modes: Optional[ModesBlock] = None
    exponential: Optional[ExponentialBlock] = None
    oracle_dims: Optional[List[int]] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.kernel == "exponential" and self.exponential is None:
            raise ValueError("kernel 'exponential' needs an 'exponential' block")
        if self.modes is not None and len(self.modes.g) != len(self.modes.omega):
            raise ValueError("modes.g and modes.omega must have equal length")
        return self


class GridBlock(_Strict):
    dt: float = Field(gt=0)
    t_max: float = Field(gt=0)


class RunBlock(_Strict):
    scheme: Literal["markov", "rwa-exact", "qbm-sse", "qbm-me", "redfield", "post-markov",
                    "oracle", "compare"] = "qbm-me"
    n_traj: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)
    chunk: int = Field(250, ge=1)
    sampler: Literal["covariance", "mode-sum"] = "covariance"
    markov_rate: float = Field(0.1, ge=0)
    post_markov_order: Literal[0, 1] = 1
    noise_steps: Optional[int] = Field(None, ge=1)


class OutputBlock(_Strict):
    directory: str = "results"
    dump: List[Literal["observables", "density", "coefficients", "kernel"]] = ["observables"]


class ExperimentConfig(_Strict):
    model: ModelBlock = ModelBlock()
    bath: BathBlock = BathBlock()
    grid: GridBlock
    run: RunBlock = RunBlock()
    output: OutputBlock = OutputBlock()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise InvalidParameterError("config must be a mapping")
    return ExperimentConfig.model_validate(raw)


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything that affects results; output location and worker count are left out."""
    data = cfg.model_dump(mode="json")
    data["output"].pop("directory")
    data["run"].pop("workers")
    blob = json.dumps(data, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --- building blocks ---------------------------------------------------------

class Experiment:
    """Lazily builds the objects a subcommand needs from a validated config."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        from nmqsd.kernels import TimeGrid
        from nmqsd.trajectories import build_system

        self.cfg = cfg
        self.command = command
        m = cfg.model
        self.grid = TimeGrid.from_t_max(cfg.grid.t_max, cfg.grid.dt)
        self.system = build_system(m.Omega, m.mass, m.hbar,
                                   2 if m.kind == "two-level" else m.fock_dim, m.kind)
        self.meta = {"config_hash": config_hash(cfg), "seed": cfg.run.seed,
                     "command": command, "scheme": cfg.run.scheme, "version": __version__}
        self._bath = None
        self._kernel = None

    @property
    def out(self) -> Path:
        return Path(self.cfg.output.directory)

    def spectral_density(self):
        from nmqsd.kernels import make_spectral_density
        s = self.cfg.bath.spectral_density
        return make_spectral_density(s.kind, s.gamma, s.Lambda, self.cfg.model.mass)

    def bath(self):
        from nmqsd.kernels import DiscreteBath, discretize_bath
        if self._bath is None:
            b, m = self.cfg.bath, self.cfg.model
            if b.modes is not None:
                self._bath = DiscreteBath.from_modes(b.modes.g, b.modes.omega, b.temperature,
                                                     m.hbar)
            else:
                d = b.discretize or DiscretizeBlock()
                self._bath = discretize_bath(self.spectral_density(), b.temperature, d.n_modes,
                                             d.omega_max, d.scheme, m.hbar)
        return self._bath

    def kernel(self):
        from nmqsd.kernels import exponential_kernel, kernel_from_bath, make_kernel
        if self._kernel is None:
            b, m = self.cfg.bath, self.cfg.model
            if b.kernel == "exponential":
                self._kernel = exponential_kernel(b.exponential.gamma, b.exponential.kappa,
                                                  self.grid, m.hbar)
            elif b.kernel == "modes":
                self._kernel = kernel_from_bath(self.bath(), self.grid, m.hbar, m.mass)
            else:
                self._kernel = make_kernel(self.spectral_density(), b.temperature, self.grid,
                                           m.hbar)
        return self._kernel

    def psi0(self):
        i = self.cfg.model.initial
        return self.system.coherent_state(complex(i.beta_re, i.beta_im))

    def rho0(self):
        psi = self.psi0()
        return np.outer(psi, psi.conj())

    def coupling_op(self):
        if self.cfg.model.coupling == "position":
            return self.system.q / self.system.hbar
        return self.system.a

    def amplitude(self):
        from nmqsd.memory import solve_amplitude
        return solve_amplitude(self.kernel(), self.cfg.model.Omega, self.grid)

    def classical(self):
        from nmqsd.memory import solve_classical_motion
        m = self.cfg.model
        return solve_classical_motion(self.kernel(), m.Omega, m.mass, self.grid)

    def me_coeffs(self, store_tables=False):
        from nmqsd.qbm import me_coefficients
        m = self.cfg.model
        return me_coefficients(self.kernel(), self.classical(), m.Omega, m.mass, self.grid,
                               m.hbar, store_tables=store_tables)

    def sse_coeffs(self):
        from nmqsd.qbm import evolve_sse_coeffs
        m = self.cfg.model
        return evolve_sse_coeffs(self.kernel(), m.Omega, m.mass, self.grid, m.hbar)

    def approx_obar(self):
        from nmqsd.approximations import post_markov_obar, weak_coupling_obar
        L = self.coupling_op()
        hb = self.system.hbar
        if self.cfg.run.scheme == "redfield":
            return weak_coupling_obar(self.system.H, L, self.kernel(), self.grid, hb)
        return post_markov_obar(self.system.H, L, self.kernel(), self.grid, hb,
                                self.cfg.run.post_markov_order)

    def sampler(self):
        from nmqsd.noise import CovarianceSampler, ModeSumSampler
        if self.cfg.run.sampler == "mode-sum":
            return ModeSumSampler(self.bath(), self.grid)
        return CovarianceSampler(self.kernel(), self.grid)

    def dump(self, what):
        return what in self.cfg.output.dump

    def write_series(self, stem, t, rho):
        from nmqsd.master import DensitySeries, write_observables
        series = rho if isinstance(rho, DensitySeries) else DensitySeries(
            t, rho, np.full(len(t), np.nan), 0.0, stem)
        if self.dump("observables"):
            write_observables(self.out / f"{stem}_observables.csv", series, self.system,
                              self.meta)
        if self.dump("density"):
            series.to_csv(self.out / f"{stem}_density.csv", self.meta)


def _require_qbm(exp: Experiment):
    if exp.cfg.model.kind != "oscillator" or exp.cfg.model.coupling != "position":
        raise InvalidParameterError("QBM schemes need an oscillator with position coupling")


def cmd_coeffs(exp: Experiment):
    scheme = exp.cfg.run.scheme
    if exp.dump("kernel"):
        exp.kernel().to_csv(exp.out / "kernel.csv", exp.meta)
    if scheme in ("qbm-me", "qbm-sse"):
        _require_qbm(exp)
        exp.classical().to_csv(exp.out / "classical.csv", exp.meta)
        exp.me_coeffs().to_csv(exp.out / "qbm_me_coeffs.csv", exp.meta)
        sse = exp.sse_coeffs()
        sse.to_csv(exp.out / "qbm_sse_coeffs.csv", exp.meta)
        if sse.unstable:
            raise NumericalError("SSE coefficient tables overflowed")
    elif scheme == "rwa-exact":
        resp = exp.amplitude()
        resp.to_csv(exp.out / "amplitude.csv", exp.meta)
        if resp.any_undefined:
            raise NumericalError("C(t) undefined where |c(t)| vanishes")
    elif scheme in ("redfield", "post-markov"):
        exp.approx_obar().to_csv(exp.out / "kernel_moments.csv", exp.meta)
    else:
        raise InvalidParameterError(f"coeffs does not apply to scheme {scheme!r}")


def cmd_noise_check(exp: Experiment):
    from nmqsd.io import write_csv
    from nmqsd.kernels import TimeGrid
    from nmqsd.noise import CovarianceSampler, ModeSumSampler, estimate_statistics

    n_steps = exp.cfg.run.noise_steps or exp.grid.n_steps
    grid = TimeGrid(exp.grid.dt, min(n_steps, exp.grid.n_steps))
    kernel = exp.kernel()
    if exp.cfg.run.sampler == "mode-sum":
        sampler = ModeSumSampler(exp.bath(), grid)
    else:
        sampler = CovarianceSampler(kernel, grid)
    z = sampler.sample_array(exp.cfg.run.seed, range(exp.cfg.run.n_traj))
    stats = estimate_statistics(z)
    target = kernel.covariance_matrix(grid.n_points)
    err_c = np.max(np.abs(stats.empirical_covariance - target), axis=1)
    err_p = np.max(np.abs(stats.empirical_pseudo), axis=1)
    bound = 5 * abs(kernel.alpha[0]) / np.sqrt(stats.n_samples)
    write_csv(exp.out / "noise_check.csv", ["t", "max_cov_error", "max_pseudo", "bound"],
              [grid.t, err_c, err_p, np.full(grid.n_points, bound)], exp.meta)
    print(f"max|C_hat - C| = {err_c.max():.4e}  max|P_hat| = {err_p.max():.4e}  "
          f"bound 5 alpha(0)/sqrt(N) = {bound:.4e}")


def cmd_trajectories(exp: Experiment):
    from nmqsd import trajectories as tr
    run, scheme = exp.cfg.run, exp.cfg.run.scheme
    model, psi0 = exp.system, exp.psi0()
    obs = (model.q, model.p, model.a)
    if scheme == "markov":
        problem = tr.markov_problem(model, exp.coupling_op(), run.markov_rate, psi0, exp.grid,
                                    run.seed, obs)
    elif scheme in ("qbm-sse", "qbm-me"):
        _require_qbm(exp)
        coeffs = exp.sse_coeffs()
        if coeffs.unstable:
            raise NumericalError("SSE coefficient tables overflowed")
        problem = tr.qbm_problem(model, coeffs, psi0, run.seed, exp.sampler(), obs)
    elif scheme == "rwa-exact":
        resp = exp.amplitude()
        if resp.any_undefined:
            raise NumericalError("C(t) undefined where |c(t)| vanishes")
        Obar = resp.big_C[:, None, None] * model.a[None]
        problem = tr.convolutionless_problem(model, model.a, Obar, psi0, exp.grid, run.seed,
                                             exp.sampler(), obs)
    elif scheme in ("redfield", "post-markov"):
        problem = tr.convolutionless_problem(model, exp.coupling_op(),
                                             exp.approx_obar().Obar_series, psi0, exp.grid,
                                             run.seed, exp.sampler(), obs)
    else:
        raise InvalidParameterError(f"trajectories does not apply to scheme {scheme!r}")
    res = tr.run_ensemble(problem, run.n_traj, workers=run.workers, chunk=run.chunk)
    exp.meta.update(n_traj=res.n_traj, tail_max=f"{res.tail_max:.3e}")
    exp.write_series("trajectories", res.t, res.rho_raw)
    if res.n_truncated:
        print(f"warning: {res.n_truncated} trajectories exceed the truncation threshold "
              f"(max tail population {res.tail_max:.3e})", file=sys.stderr)
    if res.n_unstable:
        raise NumericalError(f"{res.n_unstable} trajectories flagged unstable")


def cmd_master(exp: Experiment):
    from nmqsd import master
    run, scheme, model = exp.cfg.run, exp.cfg.run.scheme, exp.system
    rho0 = exp.rho0()
    if scheme == "markov":
        L = np.sqrt(run.markov_rate) * exp.coupling_op()
        series = master.integrate_lindblad(model.H, L, rho0, exp.grid, model.hbar)
    elif scheme in ("qbm-me", "qbm-sse"):
        _require_qbm(exp)
        coeffs = exp.me_coeffs()
        if exp.dump("coefficients"):
            coeffs.to_csv(exp.out / "qbm_me_coeffs.csv", exp.meta)
        series = master.integrate_qbm_me(model, coeffs, rho0, exp.grid)
    elif scheme == "rwa-exact":
        series = master.integrate_rwa_exact(exp.cfg.model.Omega, exp.amplitude(), rho0,
                                            exp.grid, model.a)
    elif scheme in ("redfield", "post-markov"):
        series = master.integrate_convolutionless_me(model.H, exp.coupling_op(),
                                                     exp.approx_obar().Obar_series, rho0,
                                                     exp.grid, model.hbar)
    else:
        raise InvalidParameterError(f"master does not apply to scheme {scheme!r}")
    exp.write_series("master", series.t, series)


def cmd_oracle(exp: Experiment):
    from nmqsd import oracle
    dims = exp.cfg.bath.oracle_dims or [5] * exp.bath().n_modes
    if exp.cfg.bath.temperature != 0:
        raise InvalidParameterError("the oracle supports T = 0 only")
    model = oracle.build_full_model(exp.system, exp.bath(), dims, exp.cfg.model.coupling)
    total = oracle.propagate_full(model, oracle.product_state(exp.psi0(), dims), exp.grid)
    exp.meta.update(norm_drift=f"{total.norm_drift:.3e}", energy_drift=f"{total.energy_drift:.3e}")
    rho = oracle.reduced_density(total, exp.system.dim)
    exp.write_series("oracle", exp.grid.t, rho)
    if total.norm_drift > 1e-8 * max(exp.grid.t_max, 1.0):
        raise NumericalError(f"oracle norm drift {total.norm_drift:.3e}")


def cmd_compare(path_a, path_b, out_dir, meta):
    from nmqsd.io import read_csv, write_csv
    from nmqsd.master import density_from_csv, trace_distance
    _, cols_a = read_csv(path_a)
    _, cols_b = read_csv(path_b)
    for cols, p in ((cols_a, path_a), (cols_b, path_b)):
        if not {"t", "row", "col", "re", "im"} <= cols.keys():
            raise InvalidParameterError(f"{p} is not a density CSV")
    A, B = density_from_csv(cols_a), density_from_csv(cols_b)
    if A.t.shape != B.t.shape or not np.allclose(A.t, B.t):
        raise InvalidParameterError("the two series are on different grids")
    d = trace_distance(A.rho, B.rho)
    path = write_csv(Path(out_dir) / "compare.csv", ["t", "trace_distance"], [A.t, d], meta)
    print(f"max trace distance {d.max():.6e}  ({path})")


COMMANDS = {
    "coeffs": cmd_coeffs,
    "noise-check": cmd_noise_check,
    "trajectories": cmd_trajectories,
    "master": cmd_master,
    "oracle": cmd_oracle,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="nmqsd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
    p = sub.add_parser("compare", help="trace distance between two density CSV files")
    p.add_argument("series_a")
    p.add_argument("series_b")
    p.add_argument("--out", default=".")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            cmd_compare(args.series_a, args.series_b, args.out,
                        {"command": "compare", "a": args.series_a, "b": args.series_b})
            return EXIT_OK
        cfg = load_config(args.config)
        updates = {}
        if args.seed is not None:
            updates["seed"] = args.seed
        if args.workers is not None:
            updates["workers"] = args.workers
        if updates:
            cfg = cfg.model_copy(update={"run": cfg.run.model_copy(update=updates)})
        if args.out is not None:
            cfg = cfg.model_copy(update={"output": cfg.output.model_copy(
                update={"directory": args.out})})
        cfg = ExperimentConfig.model_validate(cfg.model_dump())
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            COMMANDS[args.command](Experiment(cfg, args.command))
    except (ValidationError, InvalidParameterError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
