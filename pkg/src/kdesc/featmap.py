"""Explicit Fourier feature maps of the Von Mises kernel.

The target kernel on an angular difference ``d`` is ``exp(kappa*(cos d - 1))``.
Its Fourier expansion has coefficients ``I_0(kappa)`` and ``2*I_n(kappa)``;
keeping the first ``N`` frequencies and renormalizing gives a kernel

    k(d) = sum_{n=0..N} c_n cos(n d),   sum c_n = 1,

which is reproduced exactly by the inner product of

    psi(v) = [sqrt(c_0), sqrt(c_1) cos v, sqrt(c_1) sin v, ..., sqrt(c_N) sin N v].
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError, RangeError

MAX_ORDER = 64
MAX_KAPPA = 128.0
HALF_TOL = 1e-9


class Domain(enum.Enum):
    FULL_CIRCLE = "full"
    HALF_INTERVAL = "half"


def bessel_i(n: int, kappa: float) -> float:
    """Modified Bessel function of the first kind ``I_n(kappa)``.

    Ascending power series ``sum_m (kappa/2)^(2m+n) / (m! (m+n)!)``, stopped
    once a term drops below 1e-16 of the partial sum. Supported range is
    ``0 <= n <= 64`` and ``0 < kappa <= 128``.
    """
    if int(n) != n or not 0 <= n <= MAX_ORDER:
        raise RangeError(f"bessel order must be an integer in [0, {MAX_ORDER}], got {n}")
    if not (0.0 < kappa <= MAX_KAPPA):
        raise RangeError(f"kappa must lie in (0, {MAX_KAPPA}], got {kappa}")
    n = int(n)
    half = kappa / 2.0
    # (kappa/2)^n / n! built incrementally to avoid overflow of n!
    term = 1.0
    for k in range(1, n + 1):
        term *= half / k
    if term == 0.0:
        return 0.0
    q = half * half
    total = term
    m = 0
    while True:
        m += 1
        term *= q / (m * (m + n))
        total += term
        if term < 1e-16 * total:
            return total


@dataclass(frozen=True)
class KernelConfig:
    kappa: float
    n_freq: int
    domain: Domain = Domain.FULL_CIRCLE

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")
        if int(self.n_freq) != self.n_freq or self.n_freq < 0:
            raise ValueError(f"n_freq must be a nonnegative integer, got {self.n_freq}")
        object.__setattr__(self, "n_freq", int(self.n_freq))
        object.__setattr__(self, "domain", Domain(self.domain))


@dataclass(frozen=True)
class FeatureMap:
    config: KernelConfig
    coeffs: np.ndarray = field(repr=False)

    @property
    def n_freq(self) -> int:
        return self.config.n_freq

    @property
    def dim(self) -> int:
        return 2 * self.config.n_freq + 1

    def __call__(self, value):
        return eval_map(self, value)


def build_feature_map(config: KernelConfig) -> FeatureMap:
    raw = [bessel_i(0, config.kappa)]
    raw += [2.0 * bessel_i(n, config.kappa) for n in range(1, config.n_freq + 1)]
    raw = np.array(raw)
    coeffs = raw / math.fsum(raw)
    coeffs.setflags(write=False)
    return FeatureMap(config, coeffs)


def _check_domain(fm: FeatureMap, value) -> np.ndarray:
    v = np.asarray(value, dtype=np.float64)
    if fm.config.domain is Domain.HALF_INTERVAL:
        if np.any(v < -HALF_TOL) or np.any(v > np.pi + HALF_TOL) or np.any(np.isnan(v)):
            raise DomainError("half-interval attribute must lie in [0, pi]")
    elif not np.all(np.isfinite(v)):
        raise DomainError("attribute values must be finite")
    return v


def eval_map(fm: FeatureMap, value) -> np.ndarray:
    """Evaluate ``psi`` at a scalar or an array of values.

    Output shape is ``value.shape + (2N+1,)``.
    """
    v = _check_domain(fm, value)
    root = np.sqrt(fm.coeffs)
    out = np.empty(v.shape + (fm.dim,))
    out[..., 0] = root[0]
    for n in range(1, fm.n_freq + 1):
        nv = n * v
        out[..., 2 * n - 1] = root[n] * np.cos(nv)
        out[..., 2 * n] = root[n] * np.sin(nv)
    return out


def eval_kernel(fm: FeatureMap, a, b):
    """Truncated kernel ``sum_n c_n cos(n (a - b))`` (broadcasts over arrays)."""
    d = _check_domain(fm, a) - _check_domain(fm, b)
    out = np.zeros(d.shape)
    for n in range(fm.n_freq + 1):
        out = out + fm.coeffs[n] * np.cos(n * d)
    return out if out.ndim else float(out)


def map_to_half_interval(value, lo: float, hi: float):
    """Linear map of ``[lo, hi]`` onto ``[0, pi]``."""
    if not lo < hi:
        raise ValueError(f"need lo < hi, got {lo}, {hi}")
    v = np.asarray(value, dtype=np.float64)
    if np.any(v < lo - HALF_TOL) or np.any(v > hi + HALF_TOL) or np.any(np.isnan(v)):
        raise DomainError(f"value outside [{lo}, {hi}]")
    out = np.clip((v - lo) / (hi - lo) * np.pi, 0.0, np.pi)
    return out if out.ndim else float(out)
