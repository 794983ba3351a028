import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional

import numpy as np
import pandas as pd
from scipy.special import logsumexp, softmax

from app.config import Config
from app.utils.errors import ParameterError
from app.utils.helpers import as_points, restore_vectors

logger = logging.getLogger(__name__)

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(eq=False)
class Potential:
    """Potential V with gradient, Laplacian and regularity metadata.

    All callables work on (n, dim) arrays. The public methods accept any
    (..., dim) layout; for dim == 1 scalars and flat arrays are points.
    The target density is exp(-beta * V) / Z.
    """
    dim: int
    value_fn: ArrayFn
    grad_fn: ArrayFn
    laplacian_fn: Optional[ArrayFn] = None
    alpha: Optional[float] = None
    lipschitz_grad: Optional[float] = None
    beta: float = 1.0
    name: str = 'custom'
    params: Dict[str, Any] = field(default_factory=dict)
    marginal: Optional['Potential'] = None
    log_normalizer: Optional[float] = None
    kinks: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ParameterError(f"dimension must be positive, got {self.dim}")
        if self.beta <= 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")

    @property
    def smooth(self) -> bool:
        return self.kinks is None

    def eval(self, x) -> np.ndarray:
        points, batch = as_points(x, self.dim)
        return self.value_fn(points).reshape(batch)

    def grad(self, x) -> np.ndarray:
        points, batch = as_points(x, self.dim)
        return restore_vectors(self.grad_fn(points), batch, self.dim, x)

    def laplacian(self, x) -> np.ndarray:
        points, batch = as_points(x, self.dim)
        if self.laplacian_fn is not None:
            values = self.laplacian_fn(points)
        else:
            values = self._fd_laplacian(points)
        return values.reshape(batch)

    def boltzmann(self, x) -> np.ndarray:
        """Unnormalized target density exp(-beta V)"""
        return np.exp(-self.beta * self.eval(x))

    def _fd_laplacian(self, points: np.ndarray) -> np.ndarray:
        # central differences of the gradient, stencil 1e-4 (1 + |x|)
        step = Config.FD_REL_STEP * (1.0 + np.linalg.norm(points, axis=1))
        total = np.zeros(points.shape[0])
        for axis in range(self.dim):
            shift = np.zeros_like(points)
            shift[:, axis] = step
            upper = self.grad_fn(points + shift)[:, axis]
            lower = self.grad_fn(points - shift)[:, axis]
            contribution = (upper - lower) / (2.0 * step)
            if self.kinks is not None:
                # stencils straddling a kink contribute 0
                gaps = np.abs(points[:, axis][:, None] - self.kinks[None, :, axis])
                straddles = np.any(gaps < step[:, None], axis=1)
                contribution = np.where(straddles, 0.0, contribution)
            total += contribution
        return total


def _check_positive(**values: float) -> None:
    for key, value in values.items():
        if value is None or not np.isfinite(value) or value <= 0:
            raise ParameterError(f"{key} must be positive, got {value}")


def make_quadratic(alpha: float, dim: int, beta: float = 1.0) -> Potential:
    """V(x) = (alpha / 2) |x|^2"""
    _check_positive(alpha=alpha, beta=beta)
    if dim < 1:
        raise ParameterError(f"dimension must be positive, got {dim}")

    def value(x):
        return 0.5 * alpha * np.sum(x * x, axis=1)

    def grad(x):
        return alpha * x

    def laplacian(x):
        return np.full(x.shape[0], alpha * dim)

    marginal = make_quadratic(alpha, 1, beta) if dim > 1 else None
    return Potential(
        dim=dim, value_fn=value, grad_fn=grad, laplacian_fn=laplacian,
        alpha=float(alpha), lipschitz_grad=float(alpha), beta=beta,
        name='quadratic', params={'alpha': alpha},
        marginal=marginal,
        log_normalizer=0.5 * dim * np.log(2.0 * np.pi / (beta * alpha)),
    )


def make_constant(value: float = 0.0, dim: int = 1, beta: float = 1.0) -> Potential:
    """V(x) = value (flat target, not normalizable on R^d)"""
    if dim < 1:
        raise ParameterError(f"dimension must be positive, got {dim}")

    return Potential(
        dim=dim,
        value_fn=lambda x: np.full(x.shape[0], float(value)),
        grad_fn=np.zeros_like,
        laplacian_fn=lambda x: np.zeros(x.shape[0]),
        lipschitz_grad=0.0, beta=beta, name='constant', params={'value': value},
    )


def mixture_center(dim: int, a: float = 2.0, along: str = 'e1') -> np.ndarray:
    """Mixture center a * e1 or a * (1, ..., 1)"""
    if along == 'e1':
        center = np.zeros(dim)
        center[0] = a
        return center
    if along == 'ones':
        return np.full(dim, float(a))
    raise ParameterError(f"unknown center direction {along!r}, use 'e1' or 'ones'")


def make_gaussian_mixture(a, sigma: float = 1.0, beta: float = 1.0) -> Potential:
    """Equal-weight mixture of N(a, sigma^2 I) and N(-a, sigma^2 I).

    V = -log(mixture) / beta, so exp(-beta V) is the normalized mixture.
    """
    _check_positive(sigma=sigma, beta=beta)
    center = np.atleast_1d(np.asarray(a, dtype=float))
    dim = center.size
    means = np.stack([center, -center])
    log_norm = np.log(0.5) - 0.5 * dim * np.log(2.0 * np.pi * sigma ** 2)

    def component_logs(x):
        sq = np.stack([np.sum((x - mean) ** 2, axis=1) for mean in means], axis=1)
        return -sq / (2.0 * sigma ** 2)

    def component_scores(x):
        # grad log of each component: (n, 2, d)
        return -(x[:, None, :] - means[None, :, :]) / sigma ** 2

    def value(x):
        return -(logsumexp(component_logs(x), axis=1) + log_norm) / beta

    def grad(x):
        weights = softmax(component_logs(x), axis=1)
        score = np.einsum('nk,nkd->nd', weights, component_scores(x))
        return -score / beta

    def laplacian(x):
        weights = softmax(component_logs(x), axis=1)
        scores = component_scores(x)
        mean_score = np.einsum('nk,nkd->nd', weights, scores)
        second = np.einsum('nk,nk->n', weights, np.sum(scores ** 2, axis=2))
        spread = second - np.sum(mean_score ** 2, axis=1)
        return -(-dim / sigma ** 2 + spread) / beta

    marginal = make_gaussian_mixture(center[:1], sigma, beta) if dim > 1 else None
    return Potential(
        dim=dim, value_fn=value, grad_fn=grad, laplacian_fn=laplacian,
        lipschitz_grad=(1.0 / sigma ** 2 + float(center @ center) / sigma ** 4) / beta,
        beta=beta, name='gaussian_mixture',
        params={'a': center.tolist(), 'sigma': sigma},
        marginal=marginal, log_normalizer=0.0,
    )


def l1_norm_and_subgradient(x: np.ndarray, offset: np.ndarray):
    """|x + offset|_1 and its sign subgradient (0 at kinks)"""
    shifted = x + offset
    return np.sum(np.abs(shifted), axis=1), np.sign(shifted)


def _mixture_of_energies(energies: Callable, beta: float):
    """Build V, grad V from weighted energies E_k via -log sum_k w_k exp(-E_k)"""

    def value(x):
        logs, _ = energies(x)
        return -logsumexp(logs, axis=1) / beta

    def grad(x):
        logs, grads = energies(x)
        weights = softmax(logs, axis=1)
        return np.einsum('nk,nkd->nd', weights, grads) / beta

    return value, grad


def make_l1_l12_mixture(dim: int, shift: float = 2.0, eps: Optional[float] = None,
                        beta: float = 1.0) -> Potential:
    """Target exp(-|x + 2e1|_1) + exp(-|x - 2e1|_{1/2}^2) / 2.

    |u|_{1/2}^2 = (sum_i |u_i|^{1/2})^4 with |t|^{1/2} regularized to
    (t^2 + eps^2)^{1/4}.
    """
    eps = Config.NONSMOOTH_EPS if eps is None else eps
    _check_positive(shift=shift, eps=eps, beta=beta)
    e1 = np.zeros(dim)
    e1[0] = shift

    def energies(x):
        l1, l1_grad = l1_norm_and_subgradient(x, e1)
        u = x - e1
        roots = (u ** 2 + eps ** 2) ** 0.25
        total = np.sum(roots, axis=1)
        quasi = total ** 4
        quasi_grad = 2.0 * total[:, None] ** 3 * u * (u ** 2 + eps ** 2) ** -0.75
        logs = np.stack([-l1, np.log(0.5) - quasi], axis=1)
        return logs, np.stack([l1_grad, quasi_grad], axis=1)

    value, grad = _mixture_of_energies(energies, beta)
    return Potential(
        dim=dim, value_fn=value, grad_fn=grad, beta=beta, name='l1_l12',
        params={'shift': shift, 'eps': eps},
        kinks=np.stack([-e1, e1]),
        log_normalizer=np.log(2.0 + 0.5 * np.sqrt(np.pi)) if dim == 1 else None,
    )


def make_gauss_laplace_mixture(dim: int, sigma: float = 1.0, b: float = 0.25,
                               shift: float = 2.0, weights=(1.0, 1.0),
                               beta: float = 1.0) -> Potential:
    """Target w_G exp(-|x - c|^2 / 2 sigma^2) + w_L exp(-|x + c|_1 / 2b), c = shift e1"""
    _check_positive(sigma=sigma, b=b, shift=shift, beta=beta)
    w_gauss, w_laplace = (float(w) for w in weights)
    _check_positive(w_gauss=w_gauss, w_laplace=w_laplace)
    center = np.zeros(dim)
    center[0] = shift

    def energies(x):
        diff = x - center
        gauss = np.sum(diff ** 2, axis=1) / (2.0 * sigma ** 2)
        l1, l1_grad = l1_norm_and_subgradient(x, center)
        logs = np.stack([np.log(w_gauss) - gauss, np.log(w_laplace) - l1 / (2.0 * b)], axis=1)
        return logs, np.stack([diff / sigma ** 2, l1_grad / (2.0 * b)], axis=1)

    value, grad = _mixture_of_energies(energies, beta)

    # first-coordinate marginal keeps the same shape with reweighted branches
    marginal = None
    if dim > 1:
        marginal = make_gauss_laplace_mixture(
            1, sigma, b, shift,
            weights=(w_gauss * (2.0 * np.pi * sigma ** 2) ** ((dim - 1) / 2.0),
                     w_laplace * (4.0 * b) ** (dim - 1)),
            beta=beta,
        )
    mass = w_gauss * (2.0 * np.pi * sigma ** 2) ** (dim / 2.0) + w_laplace * (4.0 * b) ** dim
    return Potential(
        dim=dim, value_fn=value, grad_fn=grad, beta=beta, name='gauss_laplace',
        params={'sigma': sigma, 'b': b, 'shift': shift, 'weights': [w_gauss, w_laplace]},
        marginal=marginal, kinks=-center[None, :], log_normalizer=float(np.log(mass)),
    )


def make_nonsmooth_mixture(kind: str, dim: int = 1, **params) -> Potential:
    """Dispatch to the L1/L1/2 or Gaussian-Laplace mixture"""
    if kind == 'l1_l12':
        return make_l1_l12_mixture(dim, **params)
    if kind == 'gauss_laplace':
        return make_gauss_laplace_mixture(dim, **params)
    raise ParameterError(f"unknown nonsmooth mixture {kind!r}")


def make_tabulated(x, values, beta: float = 1.0, name: str = 'tabulated') -> Potential:
    """1-D potential linearly interpolated from a table"""
    knots = np.asarray(x, dtype=float)
    table = np.asarray(values, dtype=float)
    if knots.ndim != 1 or knots.shape != table.shape or knots.size < 3:
        raise ParameterError("tabulated potential needs matching 1-D arrays with at least 3 entries")
    if np.any(np.diff(knots) <= 0):
        raise ParameterError("tabulated knots must be strictly increasing")
    if not np.all(np.isfinite(table)):
        raise ParameterError("tabulated values must be finite")
    slope = np.gradient(table, knots)
    curvature = np.gradient(slope, knots)

    def value(points):
        return np.interp(points[:, 0], knots, table)

    def grad(points):
        return np.interp(points[:, 0], knots, slope)[:, None]

    def laplacian(points):
        return np.interp(points[:, 0], knots, curvature)

    return Potential(
        dim=1, value_fn=value, grad_fn=grad, laplacian_fn=laplacian,
        beta=beta, name=name, params={'knots': int(knots.size)},
    )


def load_tabulated(path: str, beta: float = 1.0) -> Potential:
    """Read a two-column `x,V` CSV into a tabulated potential"""
    try:
        frame = pd.read_csv(path)
    except (OSError, ValueError) as exc:
        raise ParameterError(f"cannot read tabulated potential {path!r}: {exc}") from exc
    if not {'x', 'V'}.issubset(frame.columns):
        raise ParameterError(f"tabulated potential {path!r} needs columns x and V")
    frame = frame.sort_values('x')
    logger.info(f"Loaded tabulated potential with {len(frame)} knots from {path}")
    return make_tabulated(frame['x'].to_numpy(), frame['V'].to_numpy(), beta=beta)


def catalog_potential(target_id: str, dim: int = 1, **params) -> Potential:
    """Resolve a catalog id plus parameter sub-keys to a Potential"""
    beta = float(params.get('beta', 1.0))
    if target_id == 'quadratic':
        return make_quadratic(float(params.get('alpha', 1.0)), dim, beta=beta)
    if target_id == 'gaussian_mixture':
        center = mixture_center(dim, float(params.get('a', 2.0)), params.get('a_along', 'e1'))
        return make_gaussian_mixture(center, float(params.get('sigma', 1.0)), beta=beta)
    if target_id == 'l1_l12':
        return make_l1_l12_mixture(dim, shift=float(params.get('shift', 2.0)), beta=beta)
    if target_id == 'gauss_laplace':
        return make_gauss_laplace_mixture(
            dim, sigma=float(params.get('sigma', 1.0)), b=float(params.get('b', 0.25)),
            shift=float(params.get('shift', 2.0)), beta=beta,
        )
    if target_id == 'tabulated':
        if dim != 1:
            raise ParameterError("tabulated potentials are 1-D only")
        path = params.get('path')
        if not path:
            raise ParameterError("tabulated potential needs target.path")
        return load_tabulated(path, beta=beta)
    raise ParameterError(f"unknown target {target_id!r}")
