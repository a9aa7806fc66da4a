"""Confidence bounds, normal quantiles and certified radii."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

log = logging.getLogger(__name__)

INFINITE_RADIUS = math.inf
_PROB_EPS = 1e-12

# ---------------------------------------------------------------------------
# binomial tail and Clopper-Pearson


def _log_binom_coeffs(N: int, js: np.ndarray) -> np.ndarray:
    return gammaln(N + 1.0) - gammaln(js + 1.0) - gammaln(N - js + 1.0)


def binomial_upper_tail(k: int, N: int, p: float) -> float:
    """P[Bin(N, p) >= k], summing whichever side has fewer terms."""
    if k <= 0:
        return 1.0
    if k > N:
        return 0.0
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    lp, lq = math.log(p), math.log1p(-p)
    if N - k + 1 <= k:
        js = np.arange(k, N + 1, dtype=np.float64)
        return float(np.exp(logsumexp(_log_binom_coeffs(N, js) + js * lp + (N - js) * lq)))
    js = np.arange(0, k, dtype=np.float64)
    lower = float(np.exp(logsumexp(_log_binom_coeffs(N, js) + js * lp + (N - js) * lq)))
    return max(0.0, 1.0 - lower)


def clopper_pearson_lower(k: int, N: int, alpha: float) -> float:
    """Exact one-sided lower confidence bound on a binomial proportion.

    Returns the ``p`` with ``P[Bin(N, p) >= k] = alpha``, found by
    bisection on the exact tail.
    """
    if N < 1 or not 0 <= k <= N:
        raise ValueError(f"need 0 <= k <= N and N >= 1, got k={k}, N={N}")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if k == 0:
        return 0.0
    if k == N:
        return alpha ** (1.0 / N)
    js_up = N - k + 1 <= k
    js = np.arange(k, N + 1, dtype=np.float64) if js_up else np.arange(0, k, dtype=np.float64)
    coeffs = _log_binom_coeffs(N, js)

    def tail(p):
        terms = coeffs + js * math.log(p) + (N - js) * math.log1p(-p)
        s = float(np.exp(logsumexp(terms)))
        return s if js_up else 1.0 - s

    lo, hi = 0.0, k / N
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if tail(mid) < alpha:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class ConfidencePair:
    pA_lower: float
    pB_upper: float
    alpha: float
    N: int
    count_A: int


def confidence_pair(count_A: int, N: int, alpha: float) -> ConfidencePair:
    """Single-bound certification: the runner-up gets ``1 - pA_lower``."""
    pa = clopper_pearson_lower(count_A, N, alpha)
    return ConfidencePair(pa, 1.0 - pa, alpha, N, count_A)


# ---------------------------------------------------------------------------
# normal distribution

# Acklam's rational approximation, refined by one Halley step.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _acklam_lower(q: float) -> float:
    # valid for 0 < q <= 0.5
    if q < _P_LOW:
        t = math.sqrt(-2.0 * math.log(q))
        num = ((((_C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5]
        den = (((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1.0
        return num / den
    u = q - 0.5
    r = u * u
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * u
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    return num / den


def inverse_normal_cdf(q: float) -> float:
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")
    if q > 0.5:
        # 1 - q is exact here, so the result is exactly antisymmetric
        return -inverse_normal_cdf(1.0 - q)
    if q == 0.5:
        return 0.0
    x = _acklam_lower(q)
    for _ in range(2):
        if 0.5 * x * x > 700.0:
            break  # density underflows; the raw tail formula is already relative-accurate
        e = normal_cdf(x) - q
        u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
        x = x - u / (1.0 + 0.5 * x * u)
    return x


# ---------------------------------------------------------------------------
# certified radii


def _check_pair(pA, pB):
    if not (0.0 <= pB <= pA <= 1.0):
        raise ValueError(f"need 0 <= pB <= pA <= 1, got pA={pA}, pB={pB}")
    if pA + pB > 1.0 + 1e-12:
        raise ValueError(f"pA + pB = {pA + pB} exceeds 1")


def rad_substitution(pA: float, pB: float, epsilon: float) -> float:
    """l1 radius (in staircase steps) for synonym substitution."""
    _check_pair(pA, pB)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if pA == pB:
        return 0.0
    rest = 1.0 - pA + pB
    second = INFINITE_RADIUS if rest <= 0.0 else -math.log(rest) / epsilon
    if pB == 0.0:
        return second
    first = (math.log(pA) - math.log(pB)) / (2.0 * epsilon)
    return max(0.0, first, second)


def rad_substitution_binary(pA: float, epsilon: float) -> float:
    if pA <= 0.5:
        return 0.0
    if pA >= 1.0:
        return INFINITE_RADIUS
    return max(0.0, -math.log(2.0 * (1.0 - pA)) / epsilon)


def rad_reorder(pA: float, pB: float, lam: float) -> float:
    _check_pair(pA, pB)
    if lam < 1:
        raise ValueError("lambda must be >= 1")
    return lam * (pA - pB)


def rad_insertion(pA: float, pB: float, sigma: float) -> float:
    _check_pair(pA, pB)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if pA == pB or sigma == 0:
        return 0.0
    if pA > 1.0 - _PROB_EPS:
        log.warning("pA=%r clamped to 1 - %g", pA, _PROB_EPS)
        pA = 1.0 - _PROB_EPS
    if pB < _PROB_EPS:
        log.warning("pB=%r clamped to %g", pB, _PROB_EPS)
        pB = _PROB_EPS
    return max(0.0, 0.5 * sigma * (inverse_normal_cdf(pA) - inverse_normal_cdf(pB)))


def _binom_pmf(n: int, p: float) -> list[float]:
    return [math.comb(n, z) * p**z * (1.0 - p) ** (n - z) for z in range(n + 1)]


def binomial_recipe_deletion_radius(pA: float, pB: float, n: int, p: float) -> int:
    """Deletion radius from the binomial-coefficient recipe, read literally.

    ``z_max`` is the largest count whose Bin(n, p) pmf is <= pB; the
    radius is the longest run of ``delta`` with ``C(z_max, delta) <= pA / pB``.
    This recipe can exceed the exact Neyman-Pearson radius; use
    :func:`rad_deletion`.
    """
    _check_pair(pA, pB)
    if pA == pB or pB == 0.0:
        return 0
    pmf = _binom_pmf(n, p)
    feasible = [z for z in range(n + 1) if pmf[z] <= pB]
    if not feasible:
        return 0
    z_max = feasible[-1]
    ratio = pA / pB
    delta = 0
    while delta + 1 <= z_max and math.comb(z_max, delta + 1) <= ratio:
        delta += 1
    return delta


def bernoulli_np_radius(pA: float, pB: float, n: int, p: float) -> int:
    """Tight deletion radius against an arbitrary base classifier.

    Deleting ``delta`` words forces those bits to zero; the likelihood
    ratio is ``p**-delta`` on outcomes that already dropped them and 0
    elsewhere, so the Neyman-Pearson sets certify iff
    ``p**delta > 1 - pA + pB``.
    """
    _check_pair(pA, pB)
    rest = 1.0 - pA + pB
    delta = 0
    while delta + 1 <= n and p ** (delta + 1) > rest:
        delta += 1
    return delta


def rad_deletion(pA: float, pB: float, n: int, p: float) -> int:
    """Number of word deletions certified for ``n`` words under drop rate ``p``.

    This is the Neyman-Pearson radius of :func:`bernoulli_np_radius`; the
    binomial-coefficient recipe stays available as
    :func:`binomial_recipe_deletion_radius` for comparison.
    """
    _check_pair(pA, pB)
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    return bernoulli_np_radius(pA, pB, n, p)


def combined_certificate(rad_R: float, rad_T: float, norm_R: float, norm_T: float, *, lam: float, n: int) -> bool:
    """Joint (position, embedding) certificate; needs a full shuffle."""
    if lam < n / 2.0:
        raise ValueError(f"lambda={lam} < n/2: positions are not fully shuffled")
    return norm_R < rad_R and norm_T < rad_T
