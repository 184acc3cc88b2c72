"""Independent reference computations used to derive expected values."""

import math

from scipy import integrate


def normal_cdf_by_quadrature(x: float) -> float:
    density = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)  # noqa: E731
    area, _ = integrate.quad(density, 0.0, abs(x), epsabs=1e-14, epsrel=1e-14)
    return 0.5 + area if x >= 0 else 0.5 - area


def quantile_by_bisection(p: float, lo: float = -10.0, hi: float = 10.0) -> float:
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if normal_cdf_by_quadrature(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_stddev(values):
    m = sum(values) / len(values)
    return math.sqrt(sum((v - m) ** 2 for v in values) / (len(values) - 1))
