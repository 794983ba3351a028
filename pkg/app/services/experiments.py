import dataclasses
import logging
import math
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from app.models.density import (GridDensity, kl_divergence, l1_distance, mixing_time, target_density,
                                tv_distance)
from app.models.potential import Potential
from app.models.proximal import (ProxOperator, ProxParams, denominator_exact, denominator_laplace,
                                 first_order_expansion, prox_step)
from app.models.theory import kl_gaussian, max_stepsize, mixing_time_bound, optimal_stepsize
from app.services.artifact_store import ArtifactStore
from app.services.experiment_config import ExperimentConfig
from app.services.samplers import Sampler, initial_density, successive_variance_trajectory
from app.services.visualizer import Visualizer
from app.utils.errors import BoundEvaluationError, ConfigError, NumericalError, ParameterError
from app.utils.helpers import first_index_below, loglog_slope

logger = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    passed: bool
    summary: Dict[str, Any] = field(default_factory=dict)
    artifacts: List[str] = field(default_factory=list)


class ExperimentRunner:
    """Runs one configured experiment and persists its artifacts"""

    def __init__(self, config: ExperimentConfig, store: Optional[ArtifactStore] = None,
                 visualizer: Optional[Visualizer] = None):
        self.config = config
        self.store = store or ArtifactStore(config.output_dir)
        self.visualizer = visualizer or Visualizer()
        self.commands: Dict[str, Callable[[], ExperimentResult]] = {
            'prox_evolve': self.cmd_prox_evolve,
            'sample': self.cmd_sample,
            'order_check': self.cmd_order_check,
            'denominator_check': self.cmd_denominator_check,
            'decay_check': self.cmd_decay_check,
            'stepsize_sweep': self.cmd_stepsize_sweep,
        }

    def run(self) -> ExperimentResult:
        cfg = self.config
        command = self.commands.get(cfg.experiment)
        if command is None:
            raise ConfigError(f"unknown experiment {cfg.experiment!r}")

        self.store.write_manifest(cfg.to_manifest(), cfg.seed, cfg.backend.value, cfg.sampler.method)
        logger.info(f"Running {cfg.experiment} on {cfg.target.id} (d={cfg.target.dim})")
        limits = threadpool_limits(limits=cfg.threads) if cfg.threads else nullcontext()
        with limits:
            result = command()
        self.store.write_json('summary.json', {'passed': result.passed, **result.summary})
        result.artifacts = list(self.store.written)
        logger.info(f"{cfg.experiment} {'passed' if result.passed else 'FAILED'}: {result.summary}")
        return result

    def _plot(self, build: Callable, name: str, *args, **kwargs) -> None:
        if not self.config.plot:
            return
        path = self.visualizer.save(build(*args, **kwargs), self.store.path(name))
        self.store.written.append(path)

    def _potential(self) -> Potential:
        return self.config.target.build()

    def _require_alpha(self, target: Potential) -> float:
        if target.alpha is None:
            raise ConfigError(f"{self.config.experiment} needs a strongly log-concave target with known alpha")
        return target.alpha

    def _marginal_target(self, sampler: Sampler) -> Optional[GridDensity]:
        target = sampler.target if sampler.dim == 1 else sampler.target.marginal
        if target is None:
            return None
        return target_density(sampler.diag_grid, target, self.config.beta)

    # Pure proximal evolution of a grid density
    def cmd_prox_evolve(self) -> ExperimentResult:
        cfg = self.config
        V = self._potential()
        grid = cfg.resolve_grid(V)
        reference = target_density(grid, V, cfg.beta)
        operator = ProxOperator(grid, V, ProxParams(cfg.prox_T, cfg.beta), cfg.backend)

        rho = initial_density(cfg.sampler, grid, V)
        self.store.write_density('target.csv', reference)
        self.store.write_density('density_0000.csv', rho)
        rows = [self._prox_row(0, rho, V, reference)]
        for k in range(1, cfg.prox_iterations + 1):
            try:
                rho = operator.step(rho)
            except NumericalError as exc:
                exc.iteration = k
                raise
            rows.append(self._prox_row(k, rho, V, reference))
            if k % cfg.save_every == 0 or k == cfg.prox_iterations:
                self.store.write_density(f'density_{k:04d}.csv', rho)

        errors = pd.DataFrame(rows)
        self.store.write_frame('errors.csv', errors)
        final_name = f'density_{cfg.prox_iterations:04d}.csv'
        self._plot(self.visualizer.create_density_overlay, 'overlay.svg',
                   self.store.path(final_name), self.store.path('target.csv'),
                   title=f"{V.name}: T={cfg.prox_T}, {cfg.prox_iterations} iterations")
        self._plot(self.visualizer.create_error_curve, 'l1_error.svg', self.store.path('errors.csv'))

        summary = {
            'final_l1': float(errors['l1'].iloc[-1]),
            'final_kl': float(errors['kl'].iloc[-1]),
            'physical_time': cfg.prox_T * cfg.prox_iterations,
        }
        return ExperimentResult(passed=bool(np.isfinite(summary['final_l1'])), summary=summary)

    @staticmethod
    def _prox_row(k: int, rho: GridDensity, V: Potential, reference: GridDensity) -> Dict[str, float]:
        return {
            'iter': k,
            'l1': l1_distance(rho, reference),
            'kl': kl_divergence(rho, V, reference=reference),
            'tv': tv_distance(rho, V, reference=reference),
        }

    # Particle sampling run with diagnostics
    def cmd_sample(self) -> ExperimentResult:
        cfg = self.config
        V = self._potential()
        sampler = Sampler(cfg.sampler, V, cfg.grid)
        rows = [row.as_row() for row in sampler.run(cfg.diag_every)]

        self.store.write_run('run.csv', rows)
        self.store.write_ensemble('ensemble.csv', sampler.ensemble)
        reference = self._marginal_target(sampler)
        target_csv = None
        if reference is not None:
            self.store.write_density('target_marginal.csv', reference)
            target_csv = self.store.path('target_marginal.csv')
        self._plot(self.visualizer.create_histogram, 'histogram.svg', self.store.path('ensemble.csv'),
                   target_csv, method=cfg.sampler.method,
                   title=f"{cfg.sampler.method}: {cfg.sampler.n_particles} particles, "
                         f"{cfg.sampler.n_steps} steps")
        self._plot(self.visualizer.create_kl_chart, 'kl.svg', {cfg.sampler.method: self.store.path('run.csv')})

        first = sampler.ensemble.points[:, 0]
        summary = {
            'method': cfg.sampler.method,
            'mode_balance': float(np.mean(first > 0)),
            'mean_x0': float(np.mean(first)),
            'var_x0': float(np.var(first)),
            'final_kl': float(rows[-1]['kl']),
            **self._mixing(sampler, rows),
        }
        return ExperimentResult(passed=True, summary=summary)

    # Second-order agreement of one proximal step with its first-order expansion
    def cmd_order_check(self) -> ExperimentResult:
        cfg = self.config
        if len(cfg.T_list) < 3:
            raise ParameterError(f"order check needs at least 3 values in prox.T_list, got {len(cfg.T_list)}")
        V = self._potential()
        grid = cfg.resolve_grid(V)
        rho0 = initial_density(cfg.sampler, grid, V)

        rows = []
        for T in cfg.T_list:
            exact = prox_step(rho0, V, ProxParams(T, cfg.beta), cfg.backend)
            expansion = first_order_expansion(rho0, V, cfg.beta, T)
            rows.append({'T': T, 'error': float(np.max(np.abs(exact.values - expansion.values)))})
            logger.debug(f"order check T={T}: max error {rows[-1]['error']:.3e}")

        report = pd.DataFrame(rows)
        slope = loglog_slope(report['T'], report['error'])
        self.store.write_frame('order.csv', report)
        self.store.write_frame('slopes.csv', pd.DataFrame([{'series': 'prox_vs_expansion', 'slope': slope}]))
        self._plot(self.visualizer.create_slope_chart, 'order.svg', self.store.path('order.csv'),
                   'T', 'error', title=f"First-order expansion error, slope {slope:.3f}")
        return ExperimentResult(passed=slope >= cfg.min_slope, summary={'slope': slope})

    # Laplace denominator against quadrature
    def cmd_denominator_check(self) -> ExperimentResult:
        cfg = self.config
        if len(cfg.T_list) < 3:
            raise ParameterError(f"denominator check needs at least 3 values in prox.T_list, got {len(cfg.T_list)}")
        if not cfg.y_list:
            raise ParameterError("denominator check needs at least one point in prox.y_list")
        V = self._potential()
        if V.dim != 1:
            raise ConfigError("denominator check runs on 1-D targets")
        z_grid = cfg.resolve_grid(V)

        rows = []
        for y in cfg.y_list:
            for T in cfg.T_list:
                p = ProxParams(T, cfg.beta, z_grid=z_grid)
                exact = float(denominator_exact(y, V, p))
                laplace = float(denominator_laplace(y, V, p))
                rows.append({'y': y, 'T': T, 'exact': exact, 'laplace': laplace,
                             'error': abs(exact - laplace)})

        report = pd.DataFrame(rows)
        slopes = pd.DataFrame([
            {'y': y, 'slope': loglog_slope(part['T'], part['error'])}
            for y, part in report.groupby('y', sort=True)
        ])
        self.store.write_frame('denominator.csv', report)
        self.store.write_frame('slopes.csv', slopes)
        self._plot(self.visualizer.create_slope_chart, 'denominator.svg', self.store.path('denominator.csv'),
                   'T', 'error', group='y', title="Laplace denominator error")
        worst = float(slopes['slope'].min())
        return ExperimentResult(passed=worst >= cfg.min_slope,
                                summary={'min_slope': worst, 'slopes': slopes['slope'].tolist()})

    # Measured KL of a BRWP run against the closed-form decay bound
    def cmd_decay_check(self) -> ExperimentResult:
        cfg = self.config
        V = self._potential()
        alpha = self._require_alpha(V)
        sampler = Sampler(cfg.sampler, V, cfg.grid)
        rows = [row.as_row() for row in sampler.run(cfg.diag_every)]
        self.store.write_run('run.csv', rows)

        decay = pd.DataFrame(rows)[['iter', 'kl', 'kl_bound']]
        kl0 = float(decay['kl'].iloc[0])
        slack = 0.1 * kl0 * cfg.sampler.h
        decay['slack'] = slack
        decay['within_bound'] = (decay['kl'] <= decay['kl_bound'] + slack) | decay['kl_bound'].isna()
        if self._has_gaussian_oracle(V):
            # particle law of the successive scheme, exact for centered Gaussians
            variances, _ = successive_variance_trajectory(
                cfg.sampler.init_std ** 2, cfg.sampler.init_std ** 2, alpha, cfg.beta,
                cfg.sampler.h, cfg.sampler.T, cfg.sampler.n_steps,
            )
            target_variance = 1.0 / (cfg.beta * alpha)
            decay['oracle_kl'] = [kl_gaussian(variances[k], target_variance) for k in decay['iter']]
        self.store.write_frame('decay.csv', decay)
        self._plot(self.visualizer.create_kl_chart, 'decay.svg', {cfg.sampler.method: self.store.path('run.csv')},
                   title=f"KL vs bound, h={cfg.sampler.h}")

        terminal = float(decay['kl'].iloc[-1])
        within = bool(decay['within_bound'].all())
        bound_known = bool(decay['kl_bound'].notna().any())
        summary = {
            'kl0': kl0, 'terminal_kl': terminal, 'slack': slack,
            'within_bound': within, 'bound_available': bound_known,
            'violations': int((~decay['within_bound']).sum()),
            **self._mixing(sampler, rows),
        }
        passed = within and bound_known and terminal <= cfg.terminal_kl
        return ExperimentResult(passed=passed, summary=summary)

    def _mixing(self, sampler: Sampler, rows: List[Dict[str, float]]) -> Dict[str, Optional[int]]:
        """Measured TV mixing iteration and its closed-form bound at check.delta"""
        delta = self.config.delta
        # measured TV is the full L1 distance; the bound uses the Pinsker form sqrt(KL / 2)
        reached = mixing_time([row['tv'] for row in rows], delta)
        bound = None
        if sampler.bound_inputs is not None:
            try:
                bound = mixing_time_bound(delta, sampler.bound_inputs)
            except BoundEvaluationError as exc:
                logger.warning(f"Mixing time bound unavailable: {exc}")
        return {
            'mixing_time': None if reached is None else int(rows[reached]['iter']),
            'mixing_time_bound': bound,
        }

    def _has_gaussian_oracle(self, V: Potential) -> bool:
        s = self.config.sampler
        return (V.name == 'quadratic' and V.dim == 1 and s.method == 'brwp_successive'
                and s.init_law == 'gaussian' and s.init_mean == 0.0)

    # Convergence speed and stability across stepsizes
    def cmd_stepsize_sweep(self) -> ExperimentResult:
        cfg = self.config
        if not cfg.h_list:
            raise ParameterError("stepsize sweep needs at least one value in sampler.h_list")
        V = self._potential()
        alpha = self._require_alpha(V)
        h_max = max_stepsize(alpha)
        h_opt = optimal_stepsize(alpha)

        report, runs = [], {}
        for i, h in enumerate(cfg.h_list):
            sampler_cfg = dataclasses.replace(cfg.sampler, h=h, T=cfg.sampler.s * h)
            name = f'run_h{i}.csv'
            rows, diverged = [], False
            try:
                for row in Sampler(sampler_cfg, V, cfg.grid).run(cfg.diag_every):
                    rows.append(row.as_row())
            except NumericalError as exc:
                logger.warning(f"h={h} aborted: {exc}")
                diverged = True
            self.store.write_run(name, rows)
            runs[f'h={h:.4g}'] = self.store.path(name)

            kl = np.array([row['kl'] for row in rows])
            iters = [row['iter'] for row in rows]
            diverged = diverged or kl.size == 0 or not np.all(np.isfinite(kl))
            reached = first_index_below(kl, cfg.threshold)
            monotone = bool(np.all(np.diff(kl) <= 1e-12 * max(kl[0], 1.0))) if kl.size else False
            growing = not diverged and kl_growing(kl)
            report.append({
                'h': h,
                'steps_to_threshold': iters[reached] if reached is not None else float('nan'),
                'final_kl': float(kl[-1]) if kl.size else float('nan'),
                'kl_monotone': monotone,
                'beyond_max_stepsize': h > h_max,
                'diverged': diverged,
                'kl_growing': growing,
                'flagged_unstable': diverged or growing,
            })

        frame = pd.DataFrame(report)
        self.store.write_frame('sweep.csv', frame)
        self._plot(self.visualizer.create_kl_chart, 'sweep.svg', runs, show_bound=False,
                   title=f"KL by stepsize (threshold {cfg.threshold})")

        unstable_flagged = bool(frame.loc[frame['h'] > h_max, 'flagged_unstable'].all())
        stable_converged = bool((~frame.loc[frame['h'] <= h_max, 'flagged_unstable']).all())
        fast = frame.loc[frame['h'] <= h_opt * (1.0 + 1e-9)].sort_values('h')
        steps = fast['steps_to_threshold'].to_numpy(dtype=float)
        speedup = bool(np.all(np.isfinite(steps)) and np.all(np.diff(steps) <= 0))
        summary = {
            'max_stepsize': h_max, 'optimal_stepsize': h_opt,
            'steps_to_threshold': {f'{h:.4g}': (None if math.isnan(v) else int(v))
                                   for h, v in zip(frame['h'], frame['steps_to_threshold'])},
            'unstable_flagged': unstable_flagged, 'stable_converged': stable_converged,
            'larger_steps_faster': speedup,
        }
        return ExperimentResult(passed=unstable_flagged and stable_converged and speedup, summary=summary)


def kl_growing(kl: np.ndarray, tail: int = 10, tolerance: float = 0.05) -> bool:
    """KL ends above its start, or still rises over the last `tail` records"""
    if kl.size < 2:
        return False
    recent = kl[-min(tail, kl.size):]
    return bool(kl[-1] > kl[0] or recent[-1] > (1.0 + tolerance) * recent[0] + 1e-12)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    return ExperimentRunner(config).run()
