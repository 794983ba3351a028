import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from threadpoolctl import threadpool_limits
from tqdm import tqdm

from app.config import Config
from app.models.density import (Bandwidth, DiagnosticsReport, Grid, GridDensity, ParticleEnsemble,
                                diagnose, gaussian_density, interpolate_field, kde, kde_score,
                                sample_grid_density, target_density)
from app.models.potential import Potential
from app.models.proximal import (ProxBackend, ProxOperator, ProxParams, gaussian_prox_variance,
                                 prox_particle_score)
from app.models.theory import BoundInputs, kl_k_bound, max_stepsize
from app.utils.constants import (DEFAULT_GRID_POINTS, DEFAULT_GRID_RANGE, DIAGNOSTIC_SOURCES,
                                 MAX_GRID_DIM, METHODS)
from app.utils.errors import BoundEvaluationError, NumericalError, ParameterError

logger = logging.getLogger(__name__)

GRID_METHODS = ('brwp_kde', 'brwp_successive')


@dataclass
class SamplerConfig:
    method: str = 'brwp_successive'
    h: float = 0.05
    T: Optional[float] = None
    s: float = 1.0
    beta: float = 1.0
    n_particles: int = 500
    n_steps: int = 50
    seed: int = Config.DEFAULT_SEED
    backend: ProxBackend = ProxBackend.QUADRATURE
    kde_bandwidth: Bandwidth = 'auto'
    init_law: str = 'gaussian'
    init_mean: float = 0.0
    init_variance: float = 2.0
    init_scale: str = 'variance'
    grid: Optional[Grid] = None
    diagnostics_source: str = 'auto'
    record_wallclock: bool = False
    progress: bool = False
    threads: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown sampler method {self.method!r}; choose from {', '.join(METHODS)}")
        if not self.h > 0:
            raise ParameterError(f"stepsize h must be positive, got {self.h}")
        if self.T is None:
            self.T = self.s * self.h
        if not 0.0 < self.T <= self.h * (1.0 + 1e-12):
            raise ParameterError(f"T must lie in (0, h], got T={self.T} h={self.h}")
        self.s = self.T / self.h
        if not self.beta > 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")
        if self.n_particles < 2:
            raise ParameterError(f"need at least 2 particles, got {self.n_particles}")
        if self.n_steps < 0:
            raise ParameterError(f"n_steps must be nonnegative, got {self.n_steps}")
        self.backend = ProxBackend(self.backend)
        if self.method == 'brwp_particle':
            self.backend = ProxBackend.PARTICLE
        elif self.method in GRID_METHODS and self.backend is ProxBackend.PARTICLE:
            raise ParameterError(f"{self.method} needs a grid backend, not 'particle'")
        if self.diagnostics_source not in DIAGNOSTIC_SOURCES:
            raise ParameterError(f"unknown diagnostics source {self.diagnostics_source!r}")
        if self.init_law not in ('gaussian', 'target'):
            raise ParameterError(f"unknown initial law {self.init_law!r}")
        if self.init_scale not in ('variance', 'std') or not self.init_variance > 0:
            raise ParameterError("initial law needs a positive variance (init.scale = variance|std)")

    @property
    def prox_params(self) -> ProxParams:
        return ProxParams(T=self.T, beta=self.beta)

    @property
    def init_std(self) -> float:
        return float(np.sqrt(self.init_variance)) if self.init_scale == 'variance' else float(self.init_variance)


@dataclass
class DensityState:
    """Grid density carried along the successive proximal chain"""
    density: GridDensity
    operator: ProxOperator


@dataclass
class RunRecord:
    method: str
    backend: str
    seed: int
    rows: List[DiagnosticsReport] = field(default_factory=list)
    ensemble: Optional[ParticleEnsemble] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.as_row() for row in self.rows])


def target_grid(potential: Potential, dim: Optional[int] = None) -> Grid:
    """Default tensor grid for a catalog target"""
    dim = potential.dim if dim is None else dim
    lo, hi = DEFAULT_GRID_RANGE.get(potential.name, (Config.GRID_LO, Config.GRID_HI))
    return Grid.uniform(lo, hi, DEFAULT_GRID_POINTS.get(dim, 61), dim)


def init_ensemble(cfg: SamplerConfig, dim: int, rng: np.random.Generator,
                  target: Optional[Potential] = None, grid: Optional[Grid] = None) -> ParticleEnsemble:
    """Draw the initial particles from N(mean, std^2 I) or from the target on a grid"""
    if cfg.init_law == 'target':
        if target is None or grid is None:
            raise ParameterError("sampling the initial law from the target needs a grid")
        points = sample_grid_density(target_density(grid, target, cfg.beta), cfg.n_particles, rng)
    else:
        points = cfg.init_mean + cfg.init_std * rng.standard_normal((cfg.n_particles, dim))
    return ParticleEnsemble(points, step_index=0, seed=cfg.seed)


def initial_density(cfg: SamplerConfig, grid: Grid, target: Potential) -> GridDensity:
    if cfg.init_law == 'target':
        return target_density(grid, target, cfg.beta)
    return gaussian_density(grid, cfg.init_mean, cfg.init_std ** 2)


def _drift_update(ensemble: ParticleEnsemble, V: Potential, h: float, beta: float,
                  score: np.ndarray) -> ParticleEnsemble:
    x = ensemble.points
    return ensemble.advance(x - h * (V.grad(x) + score / beta))


def ula_step(ensemble: ParticleEnsemble, V: Potential, h: float, beta: float,
             rng: np.random.Generator, noise: Optional[np.ndarray] = None) -> ParticleEnsemble:
    """x - h grad V(x) + sqrt(2 h / beta) z"""
    if not h > 0:
        raise ParameterError(f"stepsize h must be positive, got {h}")
    x = ensemble.points
    z = rng.standard_normal(x.shape) if noise is None else np.asarray(noise, dtype=float).reshape(x.shape)
    return ensemble.advance(x - h * V.grad(x) + np.sqrt(2.0 * h / beta) * z)


def brwp_step(ensemble: ParticleEnsemble, V: Potential, cfg: SamplerConfig,
              density_state: Optional[DensityState] = None,
              operator: Optional[ProxOperator] = None) -> Tuple[ParticleEnsemble, Optional[DensityState]]:
    """Semi-implicit update with the score of the proximal density at t_k + T"""
    ensemble.require_pairs()
    if cfg.method == 'brwp_particle':
        score = prox_particle_score(ensemble, V, cfg.prox_params)
    elif cfg.method == 'brwp_kde':
        if operator is None:
            operator = ProxOperator(cfg.grid or target_grid(V), V, cfg.prox_params, cfg.backend)
        rho_k = kde(ensemble, cfg.kde_bandwidth, operator.grid)
        score = interpolate_field(operator.grid, operator.score(rho_k), ensemble.points)
    elif cfg.method == 'brwp_successive':
        if density_state is None:
            raise ParameterError("brwp_successive needs a density state")
        operator = density_state.operator
        score_field = operator.score(density_state.density)
        density_state = DensityState(operator.step(density_state.density), operator)
        score = interpolate_field(operator.grid, score_field, ensemble.points)
    else:
        raise ParameterError(f"{cfg.method} is not a BRWP method")
    return _drift_update(ensemble, V, cfg.h, cfg.beta, score), density_state


def explicit_flow_step(ensemble: ParticleEnsemble, V: Potential, cfg: SamplerConfig) -> ParticleEnsemble:
    """Explicit Euler step of the probability flow with the KDE score at t_k"""
    ensemble.require_pairs()
    score = kde_score(ensemble.points, ensemble.points, cfg.kde_bandwidth)
    return _drift_update(ensemble, V, cfg.h, cfg.beta, score)


class Sampler:
    """Particle sampler with its density state and diagnostics"""

    def __init__(self, cfg: SamplerConfig, target: Potential, grid: Optional[Grid] = None):
        self.cfg = cfg
        self.target = target
        self.dim = target.dim
        self.rng = np.random.default_rng(cfg.seed)
        self.grid = grid or cfg.grid
        self.operator: Optional[ProxOperator] = None
        self.state: Optional[DensityState] = None
        self.bound_inputs: Optional[BoundInputs] = None

        needs_grid = cfg.method in GRID_METHODS or cfg.init_law == 'target'
        if needs_grid and self.grid is None:
            if self.dim > MAX_GRID_DIM:
                raise ParameterError(f"{cfg.method} needs a tensor grid, which supports d <= {MAX_GRID_DIM}")
            self.grid = target_grid(target)

        if target.alpha is not None and cfg.method != 'ula' and cfg.h > max_stepsize(target.alpha):
            logger.warning(f"h={cfg.h} exceeds the maximum stable stepsize {max_stepsize(target.alpha):.4g}")

        self.ensemble = init_ensemble(cfg, self.dim, self.rng, target, self.grid)
        if cfg.method in GRID_METHODS:
            self.operator = ProxOperator(self.grid, target, cfg.prox_params, cfg.backend)
        if cfg.method == 'brwp_successive':
            self.state = DensityState(initial_density(cfg, self.grid, target), self.operator)

        marginal_axis = self.grid.axes[0] if self.grid is not None else target_grid(target, 1).axes[0]
        self.diag_grid = Grid((marginal_axis,))

    def advance(self) -> None:
        method = self.cfg.method
        if method == 'ula':
            self.ensemble = ula_step(self.ensemble, self.target, self.cfg.h, self.cfg.beta, self.rng)
        elif method == 'explicit_flow':
            self.ensemble = explicit_flow_step(self.ensemble, self.target, self.cfg)
        else:
            self.ensemble, self.state = brwp_step(self.ensemble, self.target, self.cfg,
                                                  self.state, self.operator)

    def _diagnostic_source(self) -> str:
        source = self.cfg.diagnostics_source
        if source == 'auto':
            return 'particles'
        if source == 'density' and self.state is None:
            raise ParameterError("density diagnostics are only available for brwp_successive")
        return source

    def _diagnostic_density(self) -> Tuple[Optional[GridDensity], Optional[Potential]]:
        if self._diagnostic_source() == 'density':
            return self.state.density, self.target
        if self.dim == 1:
            return kde(self.ensemble, 'auto', self.diag_grid), self.target
        if self.target.marginal is None:
            return None, None
        first = ParticleEnsemble(self.ensemble.points[:, :1])
        return kde(first, 'auto', self.diag_grid), self.target.marginal

    def diagnostics(self, iteration: int, started: float) -> DiagnosticsReport:
        elapsed = (time.perf_counter() - started) * 1000.0 if self.cfg.record_wallclock else 0.0
        density, reference = self._diagnostic_density()
        if density is None:
            logger.warning(f"No first-coordinate marginal for {self.target.name} in d={self.dim}; "
                           "diagnostics are NaN")
            return DiagnosticsReport(iter=iteration, wallclock_ms=elapsed)
        samples = self.ensemble.points[:, 0] if density.dim == 1 else None
        report = diagnose(density, reference, self.cfg.beta, iteration, samples, wallclock_ms=elapsed)
        if iteration == 0:
            self._prepare_bound(report)
        report.kl_bound = self._bound(iteration)
        return report

    def _prepare_bound(self, first: DiagnosticsReport) -> None:
        alpha = self.target.alpha
        if alpha is None or self.cfg.method == 'ula' or not np.isfinite(first.kl):
            return
        self.bound_inputs = BoundInputs(
            alpha=alpha, h=self.cfg.h, kl0=max(first.kl, 0.0),
            m0=max(first.m0, 0.0), s=self.cfg.s, beta=self.cfg.beta,
        )

    def _bound(self, iteration: int) -> float:
        if self.bound_inputs is None:
            return float('nan')
        try:
            return kl_k_bound(iteration, self.bound_inputs)
        except BoundEvaluationError as exc:
            logger.warning(f"KL bound unavailable: {exc}")
            return float('nan')

    def run(self, diag_every: int = 1) -> Iterator[DiagnosticsReport]:
        """Execute n_steps, yielding a diagnostics row every diag_every steps"""
        if diag_every < 1:
            raise ParameterError(f"diag_every must be at least 1, got {diag_every}")
        limits = threadpool_limits(limits=self.cfg.threads) if self.cfg.threads else nullcontext()
        started = time.perf_counter()
        with limits:
            yield self.diagnostics(0, started)
            steps = tqdm(range(1, self.cfg.n_steps + 1), desc=self.cfg.method,
                         disable=not self.cfg.progress, leave=False)
            for k in steps:
                try:
                    self.advance()
                    if k % diag_every == 0 or k == self.cfg.n_steps:
                        yield self.diagnostics(k, started)
                except NumericalError as exc:
                    exc.iteration = k
                    logger.error(f"{self.cfg.method} aborted: {exc}")
                    raise


def run(cfg: SamplerConfig, target: Potential, diag_every: int = 1,
        grid: Optional[Grid] = None) -> Iterator[DiagnosticsReport]:
    """Stream of diagnostics rows for one sampler run"""
    return Sampler(cfg, target, grid).run(diag_every)


def collect_run(cfg: SamplerConfig, target: Potential, diag_every: int = 1,
                grid: Optional[Grid] = None) -> RunRecord:
    sampler = Sampler(cfg, target, grid)
    record = RunRecord(cfg.method, cfg.backend.value, cfg.seed)
    record.rows.extend(sampler.run(diag_every))
    record.ensemble = sampler.ensemble
    return record


def ula_stationary_variance(alpha: float, beta: float, h: float) -> float:
    """Stationary variance of ULA for V = alpha x^2 / 2: (2h / beta) / (1 - (1 - h alpha)^2)"""
    if not 0.0 < h * alpha < 2.0:
        raise ParameterError("ULA is unstable unless 0 < h alpha < 2")
    return 2.0 * h / beta / (1.0 - (1.0 - h * alpha) ** 2)


def successive_variance_trajectory(particle_var0: float, density_var0: float, alpha: float,
                                   beta: float, h: float, T: float, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Particle and density variances of brwp_successive for a centered Gaussian in 1-D"""
    particles = [particle_var0]
    densities = [density_var0]
    for _ in range(n):
        densities.append(gaussian_prox_variance(densities[-1], alpha, beta, T))
        factor = 1.0 - h * alpha + h / (beta * densities[-1])
        particles.append(particles[-1] * factor ** 2)
    return np.array(particles), np.array(densities)


def brwp_stationary_variance(alpha: float, beta: float, h: float, T: float) -> float:
    """Fixed point of the particle variance when the score comes from the particles' own law"""
    target = 1.0 / (beta * alpha)
    return brentq(lambda v: gaussian_prox_variance(v, alpha, beta, T) - target,
                  1e-6 * target, 10.0 * target, xtol=1e-14)
