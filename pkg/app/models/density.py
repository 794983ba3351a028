import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial.distance import cdist
from scipy.special import softmax
from scipy.stats import norm
from sklearn.neighbors import KernelDensity

from app.config import Config
from app.models.potential import Potential
from app.utils.constants import DEFAULT_GRID_POINTS, MAX_GRID_DIM
from app.utils.errors import (ClampingError, DegenerateDensityError, ParameterError,
                              TruncationError)

logger = logging.getLogger(__name__)

Bandwidth = Union[float, str]


@dataclass(frozen=True)
class Axis:
    """Uniform 1-D grid [lo, hi] with n points"""
    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if self.n < 2 or not self.hi > self.lo:
            raise ParameterError(f"invalid axis lo={self.lo} hi={self.hi} n={self.n}")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid weights"""
        weights = np.full(self.n, self.spacing)
        weights[[0, -1]] *= 0.5
        return weights

    def to_dict(self) -> Dict[str, Any]:
        return {'lo': self.lo, 'hi': self.hi, 'n': self.n}


@dataclass(frozen=True)
class Grid:
    """Tensor product of uniform axes"""
    axes: Tuple[Axis, ...]

    def __post_init__(self):
        if not 1 <= len(self.axes) <= MAX_GRID_DIM:
            raise ParameterError(f"tensor grids support 1 to {MAX_GRID_DIM} dimensions")

    @classmethod
    def uniform(cls, lo: float, hi: float, n: int, dim: int = 1) -> 'Grid':
        return cls(tuple(Axis(float(lo), float(hi), int(n)) for _ in range(dim)))

    @classmethod
    def default(cls, dim: int = 1, lo: Optional[float] = None, hi: Optional[float] = None) -> 'Grid':
        lo = Config.GRID_LO if lo is None else lo
        hi = Config.GRID_HI if hi is None else hi
        n = Config.GRID_POINTS if dim == 1 else DEFAULT_GRID_POINTS.get(dim, 61)
        return cls.uniform(lo, hi, n, dim)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(axis.n for axis in self.axes)

    @property
    def points(self) -> List[np.ndarray]:
        return [axis.points for axis in self.axes]

    @property
    def spacings(self) -> List[float]:
        return [axis.spacing for axis in self.axes]

    def mesh(self) -> np.ndarray:
        """Grid nodes as an array of shape (*shape, dim)"""
        return np.stack(np.meshgrid(*self.points, indexing='ij'), axis=-1)

    def flat_points(self) -> np.ndarray:
        return self.mesh().reshape(-1, self.dim)

    def integrate(self, values: np.ndarray) -> float:
        """Trapezoid quadrature over every axis"""
        result = np.asarray(values, dtype=float)
        for axis in reversed(self.axes):
            result = trapezoid(result, dx=axis.spacing, axis=-1)
        return float(result)

    def drop(self, axis: int) -> Optional['Grid']:
        remaining = tuple(a for i, a in enumerate(self.axes) if i != axis)
        return Grid(remaining) if remaining else None

    def contains(self, points: np.ndarray) -> np.ndarray:
        inside = np.ones(points.shape[0], dtype=bool)
        for i, axis in enumerate(self.axes):
            inside &= (points[:, i] >= axis.lo) & (points[:, i] <= axis.hi)
        return inside

    def to_dict(self) -> Dict[str, Any]:
        return {'axes': [axis.to_dict() for axis in self.axes]}


@dataclass
class GridDensity:
    """Nonnegative density values on a tensor grid"""
    grid: Grid
    values: np.ndarray
    log_floor: float = Config.LOG_FLOOR

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ParameterError(f"values shape {self.values.shape} does not match grid {self.grid.shape}")

    @property
    def dim(self) -> int:
        return self.grid.dim

    def mass(self) -> float:
        return self.grid.integrate(self.values)

    def normalize(self) -> 'GridDensity':
        return normalize(self)

    def log_values(self) -> np.ndarray:
        return np.log(np.maximum(self.values, self.log_floor))

    def score(self) -> np.ndarray:
        """Central-difference grad log density, shape (*shape, dim)"""
        logs = self.log_values()
        if self.dim == 1:
            return np.gradient(logs, self.grid.spacings[0])[..., None]
        return np.stack(np.gradient(logs, *self.grid.spacings), axis=-1)

    def mean(self) -> np.ndarray:
        mesh = self.grid.mesh()
        return np.array([self.grid.integrate(self.values * mesh[..., i]) for i in range(self.dim)])

    def variance(self, axis: int = 0) -> float:
        coords = self.grid.mesh()[..., axis]
        center = self.grid.integrate(self.values * coords)
        return self.grid.integrate(self.values * (coords - center) ** 2)

    def to_frame(self) -> pd.DataFrame:
        data = {f'x{i}': self.grid.mesh()[..., i].ravel() for i in range(self.dim)}
        data['density'] = self.values.ravel()
        return pd.DataFrame(data)

    def sidecar(self) -> Dict[str, Any]:
        return {**self.grid.to_dict(), 'log_floor': self.log_floor}


@dataclass
class ParticleEnsemble:
    """N points in R^d with the seed they were drawn from"""
    points: np.ndarray
    step_index: int = 0
    seed: Optional[int] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[0] < 1:
            raise ParameterError(f"ensemble needs an (N, d) array, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ParameterError("ensemble contains non-finite coordinates")
        self.points = points

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def require_pairs(self) -> None:
        if self.size < 2:
            raise ParameterError(f"ensemble needs at least 2 particles, got {self.size}")

    def advance(self, points: np.ndarray) -> 'ParticleEnsemble':
        return ParticleEnsemble(points, self.step_index + 1, self.seed)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.points, columns=[f'x{i}' for i in range(self.dim)])


@dataclass
class DiagnosticsReport:
    """One row of the run CSV"""
    iter: int
    kl: float = float('nan')
    fisher: float = float('nan')
    m0: float = float('nan')
    tv: float = float('nan')
    w2: float = float('nan')
    kl_bound: float = float('nan')
    wallclock_ms: float = 0.0

    def as_row(self) -> Dict[str, float]:
        return {
            'iter': self.iter, 'kl': self.kl, 'fisher': self.fisher, 'm0': self.m0,
            'tv': self.tv, 'w2': self.w2, 'kl_bound': self.kl_bound,
            'wallclock_ms': self.wallclock_ms,
        }


def normalize(g: GridDensity) -> GridDensity:
    """Rescale to unit trapezoid mass"""
    if np.any(g.values < 0):
        raise DegenerateDensityError("density has negative values")
    mass = g.mass()
    if not np.isfinite(mass) or mass <= 0:
        raise DegenerateDensityError(f"cannot normalize density with mass {mass}")
    return GridDensity(g.grid, g.values / mass, g.log_floor)


def gaussian_density(grid: Grid, mean=0.0, variance: float = 1.0) -> GridDensity:
    """Isotropic N(mean, variance I) sampled on the grid and normalized"""
    if variance <= 0:
        raise ParameterError(f"variance must be positive, got {variance}")
    center = np.broadcast_to(np.asarray(mean, dtype=float), (grid.dim,))
    values = np.ones(grid.shape)
    for i, points in enumerate(grid.points):
        shape = [1] * grid.dim
        shape[i] = -1
        values = values * norm.pdf(points, loc=center[i], scale=np.sqrt(variance)).reshape(shape)
    return normalize(GridDensity(grid, values))


def _tail_mass(grid: Grid, values: np.ndarray) -> float:
    """Mass beyond the boundary faces from an exponential tail fit"""
    logs = np.log(np.maximum(values, np.finfo(float).tiny))
    total = 0.0
    for i, axis in enumerate(grid.axes):
        rest = grid.drop(i)
        for face, inner in ((0, 1), (-1, -2)):
            edge = np.take(values, face, axis=i)
            rate = (np.take(logs, inner, axis=i) - np.take(logs, face, axis=i)) / axis.spacing
            with np.errstate(divide='ignore', invalid='ignore'):
                tail = np.where(edge > 0, np.where(rate > 0, edge / rate, np.inf), 0.0)
            total += rest.integrate(tail) if rest is not None else float(tail)
    return total


def target_density(grid: Grid, potential: Potential, beta: Optional[float] = None,
                   check_truncation: bool = True) -> GridDensity:
    """rho* = exp(-beta V) / Z with Z from the same quadrature"""
    beta = potential.beta if beta is None else beta
    if potential.dim != grid.dim:
        raise ParameterError(f"potential dimension {potential.dim} does not match grid {grid.dim}")
    log_weights = -beta * potential.eval(grid.mesh())
    values = np.exp(log_weights - np.max(log_weights))
    density = normalize(GridDensity(grid, values))
    if check_truncation:
        outside = _tail_mass(grid, density.values)
        if outside > Config.TRUNCATION_TOLERANCE:
            raise TruncationError(
                f"target mass outside the grid is about {outside:.3g}; widen the grid"
            )
    return density


def _relative_score(g: GridDensity, target: Potential, beta: float) -> np.ndarray:
    return g.score() + beta * target.grad(g.grid.mesh()).reshape(g.grid.shape + (g.dim,))


def kl_divergence(g: GridDensity, target: Potential, beta: Optional[float] = None,
                  reference: Optional[GridDensity] = None) -> float:
    """KL(g || rho*) by trapezoid quadrature"""
    reference = reference or target_density(g.grid, target, beta)
    log_ratio = g.log_values() - reference.log_values()
    integrand = np.where(g.values > 0, g.values * log_ratio, 0.0)
    return g.grid.integrate(integrand)


def fisher_information(g: GridDensity, target: Potential, beta: Optional[float] = None,
                       reference: Optional[GridDensity] = None) -> float:
    """Relative Fisher information of g with respect to rho*"""
    beta = target.beta if beta is None else beta
    if reference is None:
        target_density(g.grid, target, beta)
    score = _relative_score(g, target, beta)
    return g.grid.integrate(np.sum(score ** 2, axis=-1) * g.values)


def fourth_moment_m0(g: GridDensity, target: Potential, beta: Optional[float] = None,
                     reference: Optional[GridDensity] = None) -> float:
    """beta^-2 E_g |grad log(g / rho*)|^4"""
    beta = target.beta if beta is None else beta
    if reference is None:
        target_density(g.grid, target, beta)
    score = _relative_score(g, target, beta)
    return g.grid.integrate(np.sum(score ** 2, axis=-1) ** 2 * g.values) / beta ** 2


def tv_distance(g: GridDensity, target: Potential, beta: Optional[float] = None,
                reference: Optional[GridDensity] = None) -> float:
    """Integral of |g - rho*| (range [0, 2])"""
    reference = reference or target_density(g.grid, target, beta)
    return g.grid.integrate(np.abs(g.values - reference.values))


def l1_distance(g: GridDensity, other: GridDensity) -> float:
    return g.grid.integrate(np.abs(g.values - other.values))


def w2_1d(samples_a: Sequence[float], samples_b: Sequence[float]) -> float:
    """Quantile-coupling W2 between two sorted 1-D samples of equal size"""
    a = np.asarray(samples_a, dtype=float).ravel()
    b = np.asarray(samples_b, dtype=float).ravel()
    if a.size != b.size or a.size == 0:
        raise ParameterError(f"w2_1d needs equal non-empty samples, got {a.size} and {b.size}")
    if np.any(np.diff(a) < 0) or np.any(np.diff(b) < 0):
        raise ParameterError("w2_1d needs sorted samples")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def target_quantiles(g: GridDensity, n: int) -> np.ndarray:
    """Quantiles of a 1-D grid density at (i - 1/2) / n"""
    if g.dim != 1:
        raise ParameterError("quantiles need a 1-D density")
    x = g.grid.points[0]
    cdf = cumulative_trapezoid(g.values, x, initial=0.0)
    cdf /= cdf[-1]
    levels = (np.arange(n) + 0.5) / n
    return np.interp(levels, cdf, x)


def marginal(g: GridDensity, axis: int = 0) -> GridDensity:
    """Marginal density along one axis"""
    if g.dim == 1:
        return g
    values = np.moveaxis(g.values, axis, 0)
    rest = g.grid.drop(axis)
    for spacing in reversed(rest.spacings):
        values = trapezoid(values, dx=spacing, axis=-1)
    return normalize(GridDensity(Grid((g.grid.axes[axis],)), np.maximum(values, 0.0), g.log_floor))


def fp_rhs(g: GridDensity, target: Potential, beta: Optional[float] = None) -> np.ndarray:
    """Fokker-Planck right-hand side div(rho grad V) + beta^-1 lap rho.

    Conservative flux form: face fluxes with averaged drift and two-point
    diffusion, zero flux through the outer faces.
    """
    beta = target.beta if beta is None else beta
    if min(g.grid.shape) < 5:
        raise ParameterError("fp_rhs needs at least 5 points per axis")
    grad = target.grad(g.grid.mesh()).reshape(g.grid.shape + (g.dim,))
    rhs = np.zeros(g.grid.shape)
    for i, dx in enumerate(g.grid.spacings):
        rho = np.moveaxis(g.values, i, 0)
        drift = rho * np.moveaxis(grad[..., i], i, 0)
        flux = 0.5 * (drift[1:] + drift[:-1]) + (rho[1:] - rho[:-1]) / (beta * dx)
        padded = np.concatenate([np.zeros_like(flux[:1]), flux, np.zeros_like(flux[:1])])
        rhs += np.moveaxis((padded[1:] - padded[:-1]) / dx, 0, i)
    return rhs


def silverman_bandwidth(points: np.ndarray) -> float:
    """(4 / ((d + 2) N))^(1 / (d + 4)) times the mean per-axis sample std"""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    n, d = points.shape
    if n < 2:
        raise ParameterError("bandwidth selection needs at least 2 points")
    spread = float(np.mean(np.std(points, axis=0, ddof=1)))
    if spread <= 0:
        raise ParameterError("bandwidth selection needs non-degenerate points")
    return (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4)) * spread


def resolve_bandwidth(points: np.ndarray, bandwidth: Bandwidth) -> float:
    if bandwidth is None or bandwidth == 'auto':
        return silverman_bandwidth(points)
    bandwidth = float(bandwidth)
    if not bandwidth > 0:
        raise ParameterError(f"bandwidth must be positive, got {bandwidth}")
    return bandwidth


def kde(ensemble: ParticleEnsemble, bandwidth: Bandwidth, query: Grid) -> GridDensity:
    """Gaussian kernel density estimate on a grid"""
    ensemble.require_pairs()
    if ensemble.dim != query.dim:
        raise ParameterError(f"ensemble dimension {ensemble.dim} does not match grid {query.dim}")
    width = resolve_bandwidth(ensemble.points, bandwidth)
    estimator = KernelDensity(kernel='gaussian', bandwidth=width).fit(ensemble.points)
    logs = estimator.score_samples(query.flat_points()).reshape(query.shape)
    return normalize(GridDensity(query, np.exp(logs - np.max(logs))))


def kde_score(points: np.ndarray, query: np.ndarray, bandwidth: Bandwidth) -> np.ndarray:
    """grad log of the Gaussian KDE built on `points`, evaluated at `query`"""
    points = np.asarray(points, dtype=float)
    query = np.asarray(query, dtype=float)
    if points.shape[0] < 2:
        raise ParameterError("KDE score needs at least 2 points")
    width = resolve_bandwidth(points, bandwidth)
    weights = softmax(-cdist(query, points, 'sqeuclidean') / (2.0 * width ** 2), axis=1)
    return (weights @ points - query) / width ** 2


def interpolate_field(grid: Grid, field: np.ndarray, points: np.ndarray,
                      abort_fraction: float = Config.CLAMP_ABORT_FRACTION) -> np.ndarray:
    """Multilinear interpolation of a grid field at points, clamped to the grid"""
    inside = grid.contains(points)
    outside = int(np.sum(~inside))
    if outside:
        fraction = outside / points.shape[0]
        if fraction > abort_fraction:
            raise ClampingError(f"{outside} of {points.shape[0]} particles left the grid")
        logger.warning(f"Clamping {outside} particles to the grid boundary")
        lows = np.array([axis.lo for axis in grid.axes])
        highs = np.array([axis.hi for axis in grid.axes])
        points = np.clip(points, lows, highs)
    interpolator = RegularGridInterpolator(grid.points, field, method='linear')
    return interpolator(points)


def sample_grid_density(g: GridDensity, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n points from a grid density (cell choice plus uniform jitter)"""
    probabilities = (g.values * weight_tensor(g.grid)).ravel()
    probabilities = probabilities / probabilities.sum()
    cells = rng.choice(probabilities.size, size=n, p=probabilities)
    mesh = g.grid.flat_points()[cells]
    jitter = rng.uniform(-0.5, 0.5, size=mesh.shape) * np.array(g.grid.spacings)
    return mesh + jitter


def weight_tensor(grid: Grid) -> np.ndarray:
    """Product of per-axis trapezoid weights"""
    weights = np.ones(grid.shape)
    for i, axis in enumerate(grid.axes):
        shape = [1] * grid.dim
        shape[i] = -1
        weights = weights * axis.weights.reshape(shape)
    return weights


def mixing_time(tv_series: Sequence[float], delta: float) -> Optional[int]:
    """First iteration index with TV <= delta"""
    for index, value in enumerate(tv_series):
        if value <= delta:
            return index
    return None


def diagnose(g: GridDensity, target: Potential, beta: Optional[float] = None,
             iteration: int = 0, samples: Optional[np.ndarray] = None,
             kl_bound: float = float('nan'), wallclock_ms: float = 0.0) -> DiagnosticsReport:
    """Assemble one diagnostics row for a grid density and optional 1-D samples"""
    reference = target_density(g.grid, target, beta)
    w2 = float('nan')
    if samples is not None and g.dim == 1:
        sample = np.sort(np.asarray(samples, dtype=float).ravel())
        w2 = w2_1d(sample, target_quantiles(reference, sample.size))
    report = DiagnosticsReport(
        iter=iteration,
        kl=kl_divergence(g, target, beta, reference),
        fisher=fisher_information(g, target, beta, reference),
        m0=fourth_moment_m0(g, target, beta, reference),
        tv=tv_distance(g, target, beta, reference),
        w2=w2, kl_bound=kl_bound, wallclock_ms=wallclock_ms,
    )
    logger.debug(f"iter {iteration}: kl={report.kl:.6g} fisher={report.fisher:.6g} tv={report.tv:.6g}")
    return report
