import math
from dataclasses import dataclass
from typing import Optional

from app.utils.errors import BoundEvaluationError, ParameterError


@dataclass(frozen=True)
class BoundInputs:
    """Symbols of the KL decay bound for T = s h"""
    alpha: float
    h: float
    kl0: float
    m0: float = 0.0
    s: float = 1.0
    beta: float = 1.0
    delta: Optional[float] = None

    def __post_init__(self):
        for key in ('alpha', 'h', 'beta'):
            if not getattr(self, key) > 0:
                raise ParameterError(f"{key} must be positive, got {getattr(self, key)}")
        if self.kl0 < 0 or self.m0 < 0:
            raise ParameterError("kl0 and m0 must be nonnegative")
        if not 0.0 <= self.s <= 1.0:
            raise ParameterError(f"s must lie in [0, 1], got {self.s}")
        if self.delta is not None and not self.delta > 0:
            raise ParameterError(f"delta must be positive, got {self.delta}")


def contraction_factor(alpha: float, h: float, s: float = 1.0) -> float:
    """1 - 2 alpha h + (1 + 2s) alpha^2 h^2"""
    return 1.0 - 2.0 * alpha * h + (1.0 + 2.0 * s) * alpha ** 2 * h ** 2


def _bias_coefficient(inp: BoundInputs) -> float:
    return 0.5 * inp.h ** 2 * inp.s * inp.m0


def kl_one_step_bound(kl_k: float, k: int, inp: BoundInputs) -> float:
    """One-step KL recursion with the O(h^3) remainder dropped"""
    factor = contraction_factor(inp.alpha, inp.h, inp.s)
    return factor * kl_k + _bias_coefficient(inp) * math.exp(-4.0 * inp.alpha * inp.h * k)


def _sequence_bound(k: int, rate: float, q: float, r: float, bias: float, a0: float) -> float:
    # a_{k+1} = q a_k + bias r^k solves to q^k a0 + bias (r^k - q^k) / (r - q);
    # the second term is at most bias max(r, q)^k / |r - q|
    gap = r - q
    if abs(gap) < 1e-12:
        raise BoundEvaluationError(f"degenerate bound denominator {gap:.3g}")
    return math.exp(-rate * k) * a0 + bias * max(r, abs(q)) ** k / abs(gap)


def kl_k_bound(k: int, inp: BoundInputs) -> float:
    """Closed-form KL bound after k steps"""
    if k < 0:
        raise ParameterError(f"k must be nonnegative, got {k}")
    rate = inp.alpha * inp.h * (2.0 - (1.0 + 2.0 * inp.s) * inp.alpha * inp.h)
    q = contraction_factor(inp.alpha, inp.h, inp.s)
    r = math.exp(-4.0 * inp.alpha * inp.h)
    return _sequence_bound(k, rate, q, r, _bias_coefficient(inp), inp.kl0)


def w2_k_bound(k: int, inp: BoundInputs) -> float:
    return talagrand_w2_bound(kl_k_bound(k, inp), inp.alpha)


def tv_k_bound(k: int, inp: BoundInputs) -> float:
    return pinsker_tv_bound(kl_k_bound(k, inp))


def mixing_time_bound(delta: float, inp: BoundInputs, k_max: int = 100_000) -> Optional[int]:
    """First k whose Pinsker TV bound is <= delta, None if the bias floor is above delta"""
    if not delta > 0:
        raise ParameterError(f"delta must be positive, got {delta}")
    for k in range(k_max + 1):
        if tv_k_bound(k, inp) <= delta:
            return k
    return None


def optimal_stepsize(alpha: float) -> float:
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    return 1.0 / (3.0 * alpha)


def max_stepsize(alpha: float) -> float:
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    return 2.0 / (3.0 * alpha)


def sampling_complexity(delta: float, alpha: float) -> int:
    """ceil(|ln delta| / (2 alpha sqrt(delta))) with h = sqrt(delta)"""
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if not math.sqrt(delta) < max_stepsize(alpha):
        raise ParameterError(f"sqrt(delta) must be below the maximum stepsize {max_stepsize(alpha):.4g}")
    return math.ceil(abs(math.log(delta)) / (2.0 * alpha * math.sqrt(delta)))


def sequence_bound_check(c1: float, c2: float, c3: float, h: float, a0: float, k_max: int) -> bool:
    """Iterate a_{k+1} = (1 - c1 h) a_k + h^2 c2 exp(-c3 k h) and compare with the closed-form bound"""
    if not 0.0 < c1 * h < 1.0:
        raise ParameterError(f"need 0 < c1 h < 1, got {c1 * h}")
    if c2 < 0 or a0 < 0 or k_max < 0:
        raise ParameterError("c2, a0 and k_max must be nonnegative")
    q = 1.0 - c1 * h
    r = math.exp(-c3 * h)
    if abs(r - q) < 1e-12:
        raise ParameterError("exp(-c3 h) must differ from 1 - c1 h")

    bias = h ** 2 * c2
    a = a0
    for k in range(k_max + 1):
        bound = q ** k * a0 + bias * max(r, q) ** k / abs(r - q)
        if a > bound * (1.0 + 1e-12) + 1e-300:
            return False
        a = q * a + bias * math.exp(-c3 * k * h)
    return True


def pinsker_tv_bound(kl: float) -> float:
    if kl < 0:
        raise ParameterError(f"KL must be nonnegative, got {kl}")
    return math.sqrt(kl / 2.0)


def talagrand_w2_bound(kl: float, alpha: float) -> float:
    if kl < 0:
        raise ParameterError(f"KL must be nonnegative, got {kl}")
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    return math.sqrt(2.0 * kl / alpha)


def kl_gaussian(variance: float, target_variance: float = 1.0) -> float:
    """KL(N(0, v) || N(0, v*)) in 1-D"""
    ratio = variance / target_variance
    return 0.5 * (ratio - 1.0 - math.log(ratio))
