import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional, Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp, softmax

from app.config import Config
from app.models.density import Grid, GridDensity, ParticleEnsemble, weight_tensor
from app.models.potential import Potential
from app.utils.errors import (DegenerateDensityError, IsolatedParticleError, ParameterError,
                              StepsizeError, TruncationError)
from app.utils.helpers import as_points

logger = logging.getLogger(__name__)


class ProxBackend(str, Enum):
    QUADRATURE = 'quadrature'
    LAPLACE = 'laplace_denominator'
    PARTICLE = 'particle'


BackendLike = Union[ProxBackend, str]


@dataclass(frozen=True)
class ProxParams:
    """Proximal stepsize T, inverse temperature and optional quadrature grids"""
    T: float
    beta: float = 1.0
    z_grid: Optional[Grid] = None
    y_grid: Optional[Grid] = None

    def __post_init__(self):
        if not self.T > 0:
            raise ParameterError(f"proximal stepsize T must be positive, got {self.T}")
        if not self.beta > 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")

    @property
    def kernel_variance(self) -> float:
        """Variance of the heat kernel exp(-beta |x - y|^2 / 4T)"""
        return 2.0 * self.T / self.beta

    def gaussian_volume(self, dim: int) -> float:
        """(4 pi T / beta)^(d/2), the mass of the heat kernel"""
        return (4.0 * np.pi * self.T / self.beta) ** (dim / 2.0)


def _backend(backend: BackendLike) -> ProxBackend:
    try:
        return ProxBackend(backend)
    except ValueError as exc:
        raise ParameterError(f"unknown proximal backend {backend!r}") from exc


def denominator_exact(y, V: Potential, p: ProxParams) -> np.ndarray:
    """(beta / 4 pi T)^(d/2) int exp[-(beta/2)(V(z) + |z - y|^2 / 2T)] dz"""
    points, batch = as_points(y, V.dim)
    z_grid = p.z_grid or Grid.default(V.dim)
    if z_grid.dim != V.dim:
        raise ParameterError("z_grid dimension does not match the potential")
    nodes = z_grid.flat_points()
    log_weights = np.log(weight_tensor(z_grid).ravel())
    half_energy = 0.5 * p.beta * V.eval(nodes)
    logs = -half_energy[None, :] - p.beta * cdist(points, nodes, 'sqeuclidean') / (4.0 * p.T)

    # integrand on the boundary faces must be negligible against the peak
    boundary = ~_interior_mask(z_grid).ravel()
    excess = np.max(logs[:, boundary], axis=1) - np.max(logs, axis=1)
    if np.any(excess > np.log(Config.DENOMINATOR_TAIL)):
        raise TruncationError("denominator integrand is not negligible at the z-grid boundary")
    log_integral = logsumexp(logs + log_weights[None, :], axis=1)
    return np.exp(log_integral - np.log(p.gaussian_volume(V.dim))).reshape(batch)


def denominator_laplace(y, V: Potential, p: ProxParams) -> np.ndarray:
    """Closed-form denominator around s = y - T grad V(y)"""
    points, batch = as_points(y, V.dim)
    s_hat = points - p.T * V.grad(points)
    curvature = p.T * V.laplacian(s_hat)
    correction = 1.0 + 0.5 * curvature
    if np.any(correction <= Config.LAPLACE_GUARD):
        raise StepsizeError(
            f"Laplace correction factor {np.min(correction):.3g} <= {Config.LAPLACE_GUARD}; "
            f"reduce T={p.T}"
        )
    if np.any(np.abs(curvature) > Config.LAPLACE_WARN):
        logger.warning(f"|T * laplacian| exceeds {Config.LAPLACE_WARN} at T={p.T}; "
                       "Laplace denominator may be inaccurate")
    exponent = -0.5 * p.beta * (V.eval(s_hat) + np.sum((s_hat - points) ** 2, axis=1) / (2.0 * p.T))
    return (np.exp(exponent) / correction).reshape(batch)


def _interior_mask(grid: Grid) -> np.ndarray:
    mask = np.ones(grid.shape, dtype=bool)
    for i in range(grid.dim):
        index = [slice(None)] * grid.dim
        for edge in (0, -1):
            index[i] = edge
            mask[tuple(index)] = False
    return mask


class ProxOperator:
    """Kernel-formula proximal map on a fixed grid.

    rho_T = exp(-beta V / 2) * K[rho0 / D] with D = K[exp(-beta V / 2)],
    where K convolves with exp(-beta |x - y|^2 / 4T). K is separable, so
    every application is one dense matrix product per axis. Kernel
    matrices and the denominator table are built once and then only read.
    """

    def __init__(self, grid: Grid, potential: Potential, params: ProxParams,
                 backend: BackendLike = ProxBackend.QUADRATURE):
        self.grid = grid
        self.potential = potential
        self.params = params
        self.backend = _backend(backend)
        if self.backend is ProxBackend.PARTICLE:
            raise ParameterError("grid proximal steps need the quadrature or laplace_denominator "
                                 "backend; use prox_particle_score for ensembles")
        if potential.dim != grid.dim:
            raise ParameterError(f"potential dimension {potential.dim} does not match grid {grid.dim}")

        self.mesh = grid.mesh()
        self.kernels = []
        for axis in grid.axes:
            x = axis.points
            kernel = np.exp(-params.beta * (x[:, None] - x[None, :]) ** 2 / (4.0 * params.T))
            self.kernels.append(kernel * axis.weights[None, :])

        self.half_boltzmann = np.exp(-0.5 * params.beta * potential.eval(self.mesh))
        if self.backend is ProxBackend.QUADRATURE:
            self.denominator = self.apply_kernel(self.half_boltzmann)
        else:
            flat = denominator_laplace(grid.flat_points(), potential, params)
            self.denominator = flat.reshape(grid.shape) * params.gaussian_volume(grid.dim)
        if np.any(self.denominator <= 0) or not np.all(np.isfinite(self.denominator)):
            raise TruncationError("denominator table underflowed; narrow the grid or raise T")

    def apply_kernel(self, values: np.ndarray) -> np.ndarray:
        result = values
        for i, kernel in enumerate(self.kernels):
            result = np.moveaxis(np.tensordot(kernel, result, axes=([1], [i])), 0, i)
        return result

    def _check_density(self, rho0: GridDensity) -> None:
        if rho0.grid != self.grid:
            raise ParameterError("density grid does not match the proximal operator grid")

    def step(self, rho0: GridDensity) -> GridDensity:
        self._check_density(rho0)
        values = self.half_boltzmann * self.apply_kernel(rho0.values / self.denominator)
        factor = self.grid.integrate(values) / rho0.mass()
        logger.debug(f"prox step T={self.params.T}: renormalization factor {factor:.8f}")
        if not abs(factor - 1.0) <= Config.MASS_TOLERANCE:
            raise TruncationError(
                f"proximal step lost mass (factor {factor:.6f}); widen the grid or reduce T"
            )
        return GridDensity(self.grid, np.maximum(values, 0.0) / self.grid.integrate(values), rho0.log_floor)

    def score(self, rho0: GridDensity) -> np.ndarray:
        """grad log rho_T via the kernel-weighted conditional mean of y"""
        self._check_density(rho0)
        weights = rho0.values / self.denominator
        normalizer = self.apply_kernel(weights)
        beta, T = self.params.beta, self.params.T
        grad_v = self.potential.grad(self.mesh).reshape(self.mesh.shape)
        score = np.empty_like(self.mesh)
        for i in range(self.grid.dim):
            coord = self.mesh[..., i]
            first = self.apply_kernel(weights * coord)
            mean = np.divide(first, normalizer, out=coord.copy(), where=normalizer > 0)
            score[..., i] = -0.5 * beta * grad_v[..., i] + beta / (2.0 * T) * (mean - coord)
        return score


def prox_step(rho0: GridDensity, V: Potential, p: ProxParams,
              backend: BackendLike = ProxBackend.QUADRATURE,
              operator: Optional[ProxOperator] = None) -> GridDensity:
    """One application of the kernel formula, renormalized"""
    operator = operator or ProxOperator(rho0.grid, V, p, backend)
    return operator.step(rho0)


def prox_iterate(rho0: GridDensity, V: Potential, p: ProxParams, n: int,
                 backend: BackendLike = ProxBackend.QUADRATURE) -> Iterator[GridDensity]:
    """rho_{k+1} = Prox(rho_k), yielding rho_1 ... rho_n"""
    operator = ProxOperator(rho0.grid, V, p, backend)
    rho = rho0
    for _ in range(n):
        rho = operator.step(rho)
        yield rho


def prox_score(rho0: GridDensity, V: Potential, p: ProxParams,
               backend: BackendLike = ProxBackend.QUADRATURE,
               operator: Optional[ProxOperator] = None) -> np.ndarray:
    operator = operator or ProxOperator(rho0.grid, V, p, backend)
    return operator.score(rho0)


def prox_gradient(rho0: GridDensity, rhoT: GridDensity, V: Potential, p: ProxParams,
                  backend: BackendLike = ProxBackend.QUADRATURE,
                  operator: Optional[ProxOperator] = None) -> np.ndarray:
    """grad rho_T on the grid, shape (*shape, dim)"""
    return prox_score(rho0, V, p, backend, operator) * rhoT.values[..., None]


def prox_particle_score(ensemble: ParticleEnsemble, V: Potential, p: ProxParams,
                        query: Optional[np.ndarray] = None) -> np.ndarray:
    """Score of the kernel formula applied to the empirical measure of the ensemble"""
    ensemble.require_pairs()
    sources = ensemble.points
    targets = sources if query is None else np.asarray(query, dtype=float).reshape(-1, ensemble.dim)
    log_denominator = np.log(denominator_laplace(sources, V, p)) + np.log(p.gaussian_volume(ensemble.dim))
    logits = -p.beta * cdist(targets, sources, 'sqeuclidean') / (4.0 * p.T) - log_denominator[None, :]

    log_rho = -0.5 * p.beta * V.eval(targets) + logsumexp(logits, axis=1) - np.log(ensemble.size)
    isolated = log_rho < np.log(1e-300)
    if np.any(isolated):
        raise IsolatedParticleError(
            f"{int(np.sum(isolated))} query points have kernel density below 1e-300"
        )
    mean = softmax(logits, axis=1) @ sources
    return -0.5 * p.beta * V.grad(targets) + p.beta / (2.0 * p.T) * (mean - targets)


def _second_difference(values: np.ndarray, dx: float, axis: int) -> np.ndarray:
    moved = np.moveaxis(values, axis, 0)
    result = np.empty_like(moved)
    result[1:-1] = (moved[2:] - 2.0 * moved[1:-1] + moved[:-2]) / dx ** 2
    result[0], result[-1] = result[1], result[-2]
    return np.moveaxis(result, 0, axis)


def first_order_expansion(rho0: GridDensity, V: Potential, beta: float, T: float) -> GridDensity:
    """rho0 [1 - beta T grad(V - V0) . grad V0 + T lap(V - V0)], V0 = -log(rho0) / beta"""
    if T < 0:
        raise ParameterError(f"T must be nonnegative, got {T}")
    if T == 0:
        return GridDensity(rho0.grid, rho0.values.copy(), rho0.log_floor)
    if np.any(rho0.values[_interior_mask(rho0.grid)] <= 0):
        raise DegenerateDensityError("first-order expansion needs a strictly positive density")

    grid = rho0.grid
    logs = rho0.log_values()
    excess = V.eval(grid.mesh()) + logs / beta
    spacings = grid.spacings
    correction = np.zeros(grid.shape)
    for i, dx in enumerate(spacings):
        grad_excess = np.gradient(excess, dx, axis=i)
        grad_v0 = -np.gradient(logs, dx, axis=i) / beta
        correction += -beta * T * grad_excess * grad_v0 + T * _second_difference(excess, dx, i)
    return GridDensity(grid, rho0.values * (1.0 + correction), rho0.log_floor)


def gaussian_prox_variance(var0: float, alpha: float, beta: float, T: float) -> float:
    """Variance of Prox(N(0, var0)) for V = alpha x^2 / 2 in 1-D (alpha = 0 is the heat flow)"""
    if var0 <= 0 or T <= 0 or beta <= 0 or alpha < 0:
        raise ParameterError("gaussian_prox_variance needs var0, T, beta > 0 and alpha >= 0")
    precision = 1.0 / var0 - beta * alpha / (2.0 * (1.0 + alpha * T))
    spread = 1.0 + 2.0 * T * precision / beta
    if spread <= 0:
        raise ParameterError("kernel formula integral diverges for this Gaussian")
    return 1.0 / (precision / spread + beta * alpha / 2.0)


def gaussian_prox_denominator(y, alpha: float, beta: float, T: float) -> np.ndarray:
    """Scaled denominator for V = alpha x^2 / 2 in 1-D"""
    y = np.asarray(y, dtype=float)
    return (1.0 + alpha * T) ** -0.5 * np.exp(-beta * alpha * y ** 2 / (4.0 * (1.0 + alpha * T)))
