"""Summary statistics, normal quantiles and minimal detectable change.

The minimal detectable relative change for ``n`` loop starts comes in two
flavours:

``TABLE_CONSISTENT``
    ``delta = sqrt(n / 2) * sigma``.  This is the relation behind the
    published MooBench result table (e.g. sigma 1.97 % -> 4.41 % at n = 10).
``TWO_SAMPLE_POWER``
    ``delta = (z(1 - alpha/2) + z(1 - beta)) / sqrt(n / 2) * sigma``, the
    textbook two-sample power calculation.

Both are linear in sigma, so sigma and delta may be given either as
fractions or as percentages.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats as _scipy_stats

from .errors import ComparabilityError, ConfigError, InsufficientDataError

__all__ = [
    "SampleBasis",
    "StatsSummary",
    "RunSummary",
    "MdeMode",
    "MdeConfig",
    "ChangeDecision",
    "remove_warmup",
    "summarize",
    "summarize_run",
    "normal_cdf",
    "normal_quantile",
    "minimal_detectable_change",
    "detect_change",
    "compare_runs",
]


class SampleBasis(enum.Enum):
    PER_CALL = "per-call"
    PER_LOOP_MEAN = "per-loop-mean"


@dataclass(frozen=True)
class StatsSummary:
    mean_ns: float
    stddev_ns: float
    rel_stddev: float
    basis: SampleBasis
    count: int

    @property
    def rel_stddev_pct(self) -> float:
        return 100.0 * self.rel_stddev


def remove_warmup(values: Sequence[float], warmup_fraction: float) -> Sequence[float]:
    """Drop the leading ``floor(len * warmup_fraction)`` values."""
    if not 0.0 <= warmup_fraction < 1.0:
        raise ConfigError(f"warmup_fraction must be in [0, 1), got {warmup_fraction}")
    return values[int(len(values) * warmup_fraction):]


def summarize(
    durations: Sequence[float],
    warmup_fraction: float = 0.0,
    basis: SampleBasis = SampleBasis.PER_CALL,
) -> StatsSummary:
    """Mean and sample standard deviation of the retained values.

    For ``PER_LOOP_MEAN`` the input is already the sequence of per-loop means.
    """
    retained = np.asarray(remove_warmup(durations, warmup_fraction), dtype=np.float64)
    if retained.size < 2:
        raise InsufficientDataError(
            f"need at least 2 values after warmup removal, have {retained.size}"
        )
    mean = float(retained.mean())
    stddev = float(retained.std(ddof=1))
    if mean > 0:
        rel = stddev / mean
    else:
        rel = 0.0 if stddev == 0 else math.inf
    return StatsSummary(mean, stddev, rel, basis, int(retained.size))


@dataclass(frozen=True)
class RunSummary:
    per_call: StatsSummary
    per_loop: StatsSummary
    loop_means: tuple[float, ...]


def loop_means(loops: Iterable[Sequence[float]], warmup_fraction: float) -> list[float]:
    means = []
    for durations in loops:
        retained = remove_warmup(durations, warmup_fraction)
        if len(retained) == 0:
            raise InsufficientDataError("a loop start has no samples after warmup removal")
        means.append(float(np.mean(retained)))
    return means


def summarize_run(run) -> RunSummary:
    """Both summaries of a :class:`~overbench.runner.BenchmarkRun`.

    Warmup is removed per loop start; the per-call summary pools the
    retained samples of all loops.
    """
    warmup = run.config.warmup_fraction
    loops = [lr.durations for lr in run.loop_results]
    pooled = np.concatenate([np.asarray(remove_warmup(d, warmup)) for d in loops])
    means = loop_means(loops, warmup)
    return RunSummary(
        per_call=summarize(pooled, 0.0, SampleBasis.PER_CALL),
        per_loop=summarize(means, 0.0, SampleBasis.PER_LOOP_MEAN),
        loop_means=tuple(means),
    )


# -- normal distribution -------------------------------------------------

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)

# rational approximation coefficients (P. J. Acklam), rel. error < 1.2e-9
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
    return 0.5 * math.erfc(-x / _SQRT2)


def _initial_quantile(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log1p(-p))
        return -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF.

    Rational approximation refined by one Halley step on the erfc-based CDF.

    >>> round(normal_quantile(0.995), 6)
    2.575829
    """
    if not 0.0 < p < 1.0:
        raise ConfigError(f"probability must be in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    # work in the lower tail so erfc keeps full relative precision
    if p > 0.5:
        return -normal_quantile(1.0 - p)
    x = _initial_quantile(p)
    e = normal_cdf(x) - p
    u = e * _SQRT2PI * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


# -- minimal detectable change ------------------------------------------

class MdeMode(enum.Enum):
    TABLE_CONSISTENT = "table"
    TWO_SAMPLE_POWER = "power"


@dataclass(frozen=True)
class MdeConfig:
    n: int = 10
    alpha: float = 0.01
    beta: float = 0.01
    mode: MdeMode = MdeMode.TABLE_CONSISTENT

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ConfigError("n must be >= 2")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must be in (0, 1)")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("beta must be in (0, 1)")

    def factor(self) -> float:
        """Delta / sigma for this configuration."""
        half_n = math.sqrt(self.n / 2.0)
        if self.mode is MdeMode.TABLE_CONSISTENT:
            return half_n
        z_alpha = normal_quantile(1.0 - self.alpha / 2.0)
        z_beta = normal_quantile(1.0 - self.beta)
        return (z_alpha + z_beta) / half_n


def minimal_detectable_change(sigma: float, cfg: Optional[MdeConfig] = None) -> float:
    if sigma < 0:
        raise ConfigError("relative standard deviation must be >= 0")
    return (cfg or MdeConfig()).factor() * sigma


# -- change detection ----------------------------------------------------

@dataclass(frozen=True)
class ChangeDecision:
    changed: bool
    relative_change: float
    p_value: float


def detect_change(
    a_means: Sequence[float], b_means: Sequence[float], alpha: float = 0.01
) -> ChangeDecision:
    """Welch's two-sample t-test on per-loop means of two runs."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must be in (0, 1)")
    a = np.asarray(a_means, dtype=np.float64)
    b = np.asarray(b_means, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InsufficientDataError("each side needs at least 2 loop-start means")
    mean_a = float(a.mean())
    rel = (float(b.mean()) - mean_a) / mean_a
    if a.var(ddof=1) == 0 and b.var(ddof=1) == 0:
        p = 1.0 if rel == 0 else 0.0
    else:
        p = float(_scipy_stats.ttest_ind(a, b, equal_var=False).pvalue)
    return ChangeDecision(p < alpha, rel, p)


def compare_runs(run_a, run_b, alpha: float = 0.01) -> ChangeDecision:
    """:func:`detect_change` for two runs measured under the same config."""
    if run_a.config.comparable_key() != run_b.config.comparable_key():
        raise ComparabilityError("runs were measured with different configurations")
    return detect_change(
        summarize_run(run_a).loop_means, summarize_run(run_b).loop_means, alpha
    )
