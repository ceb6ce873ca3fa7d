"""Kernelized patch descriptors.

A descriptor is the weighted sum over pixels of Kronecker products of scalar
feature maps, so that the dot product of two descriptors equals the pixel
pairwise match kernel

    M(P, Q) = sum_p sum_q g_p g_q sqrt(m_p m_q) prod_i k_i(p_i, q_i).

Two parametrizations are provided: polar (phi x rho x relative gradient angle)
and Cartesian (x x y x absolute gradient angle).
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import DegenerateInputError
from .featmap import Domain, KernelConfig, build_feature_map, eval_kernel, map_to_half_interval
from .patch import Patch, PixelAttributes, extract_attributes

ORACLE_MAX_WIDTH = 16
UNIT_TOL = 1e-9


class Kind(enum.IntEnum):
    POLAR = 0
    CARTESIAN = 1
    COMBINED = 2
    POSTPROCESSED = 3


class NormState(enum.Enum):
    RAW = "raw"
    UNIT = "unit"


@dataclass(frozen=True)
class DescriptorConfig:
    """Kernel parameters per attribute. Defaults give 175 polar / 63 Cartesian dims."""

    phi: KernelConfig = KernelConfig(8.0, 2, Domain.FULL_CIRCLE)
    rho: KernelConfig = KernelConfig(8.0, 2, Domain.HALF_INTERVAL)
    theta_rel: KernelConfig = KernelConfig(8.0, 3, Domain.FULL_CIRCLE)
    x: KernelConfig = KernelConfig(1.0, 1, Domain.HALF_INTERVAL)
    y: KernelConfig = KernelConfig(1.0, 1, Domain.HALF_INTERVAL)
    theta: KernelConfig = KernelConfig(8.0, 3, Domain.FULL_CIRCLE)
    maps: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = ("phi", "rho", "theta_rel", "x", "y", "theta")
        object.__setattr__(self, "maps", {n: build_feature_map(getattr(self, n)) for n in names})

    @property
    def polar_dim(self) -> int:
        return self.maps["phi"].dim * self.maps["rho"].dim * self.maps["theta_rel"].dim

    @property
    def cartesian_dim(self) -> int:
        return self.maps["x"].dim * self.maps["y"].dim * self.maps["theta"].dim

    @property
    def combined_dim(self) -> int:
        return self.polar_dim + self.cartesian_dim

    def dim(self, kind: Kind) -> int:
        return {Kind.POLAR: self.polar_dim, Kind.CARTESIAN: self.cartesian_dim,
                Kind.COMBINED: self.combined_dim}[Kind(kind)]


DEFAULT_CONFIG = DescriptorConfig()


@dataclass(frozen=True)
class Descriptor:
    values: np.ndarray
    kind: Kind
    norm_state: NormState = NormState.RAW

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.norm_state is NormState.UNIT and abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
            raise ValueError("descriptor flagged unit-norm but its norm differs from 1")

    @property
    def dim(self) -> int:
        return self.values.size

    def __matmul__(self, other: "Descriptor") -> float:
        return float(self.values @ other.values)


def kron(a, b) -> np.ndarray:
    """Kronecker product of two vectors: ``out[i*len(b) + j] = a[i] * b[j]``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("kron needs nonempty vectors")
    return np.kron(a, b)


def kron_rows(*factors: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product of ``(n, d_i)`` matrices -> ``(n, prod d_i)``."""
    out = factors[0]
    for f in factors[1:]:
        out = (out[:, :, None] * f[:, None, :]).reshape(out.shape[0], -1)
    return out


def pixel_weights(attrs: PixelAttributes) -> np.ndarray:
    return attrs.g * np.sqrt(attrs.m)


def _aggregate(weights: np.ndarray, *factors: np.ndarray) -> np.ndarray:
    """``sum_p weights[p] * kron(factors[0][p], ..., factors[-1][p])``.

    The last factor is contracted by one matrix product instead of
    materializing the full per-pixel Kronecker rows.
    """
    head = kron_rows(*factors[:-1]) if len(factors) > 2 else factors[0]
    return ((weights[:, None] * head).T @ factors[-1]).ravel()


def _polar_factors(attrs: PixelAttributes, cfg: DescriptorConfig):
    rho_hat = map_to_half_interval(attrs.rho, 0.0, 1.0)
    return (cfg.maps["phi"](attrs.phi), cfg.maps["rho"](rho_hat),
            cfg.maps["theta_rel"](attrs.theta_rel))


def _cartesian_factors(attrs: PixelAttributes, cfg: DescriptorConfig):
    w = float(attrs.width)
    return (cfg.maps["x"](map_to_half_interval(attrs.x, 1.0, w)),
            cfg.maps["y"](map_to_half_interval(attrs.y, 1.0, w)),
            cfg.maps["theta"](attrs.theta))


def polar_features(attrs: PixelAttributes, cfg: DescriptorConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Per-pixel polar feature vectors (unweighted), shape ``(n_pixels, polar_dim)``."""
    return kron_rows(*_polar_factors(attrs, cfg))


def cartesian_features(attrs: PixelAttributes, cfg: DescriptorConfig = DEFAULT_CONFIG) -> np.ndarray:
    return kron_rows(*_cartesian_factors(attrs, cfg))


def polar_descriptor(attrs: PixelAttributes, cfg: DescriptorConfig = DEFAULT_CONFIG) -> Descriptor:
    return Descriptor(_aggregate(pixel_weights(attrs), *_polar_factors(attrs, cfg)), Kind.POLAR)


def cartesian_descriptor(attrs: PixelAttributes, cfg: DescriptorConfig = DEFAULT_CONFIG) -> Descriptor:
    return Descriptor(_aggregate(pixel_weights(attrs), *_cartesian_factors(attrs, cfg)), Kind.CARTESIAN)


def l2_normalize(d: Descriptor) -> Descriptor:
    norm = np.sqrt(d.values @ d.values)
    if not norm > 0:
        raise DegenerateInputError(f"cannot normalize a zero {d.kind.name.lower()} descriptor")
    return Descriptor(d.values / norm, d.kind, NormState.UNIT)


def combined_descriptor(attrs: PixelAttributes, cfg: DescriptorConfig = DEFAULT_CONFIG) -> Descriptor:
    """Equal-weight concatenation of the normalized polar and Cartesian descriptors."""
    polar = l2_normalize(polar_descriptor(attrs, cfg))
    cart = l2_normalize(cartesian_descriptor(attrs, cfg))
    return combine(polar.values, cart.values)


def combine(polar_unit: np.ndarray, cart_unit: np.ndarray) -> Descriptor:
    v = np.concatenate([polar_unit, cart_unit])
    return l2_normalize(Descriptor(v, Kind.COMBINED))


def describe(patch: Patch, kind: Kind = Kind.COMBINED, cfg: DescriptorConfig = DEFAULT_CONFIG) -> Descriptor:
    """Unit-normalized descriptor of one patch."""
    attrs = extract_attributes(patch)
    kind = Kind(kind)
    if kind is Kind.POLAR:
        return l2_normalize(polar_descriptor(attrs, cfg))
    if kind is Kind.CARTESIAN:
        return l2_normalize(cartesian_descriptor(attrs, cfg))
    if kind is Kind.COMBINED:
        return combined_descriptor(attrs, cfg)
    raise ValueError(f"cannot extract descriptors of kind {kind.name}")


def default_threads() -> int:
    env = os.environ.get("KP_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def extract_batch(patches: Sequence[Patch], kind: Kind = Kind.COMBINED,
                  cfg: DescriptorConfig = DEFAULT_CONFIG, threads: int | None = None) -> np.ndarray:
    """Unit descriptors for many patches as an ``(n, dim)`` array.

    Patches are processed independently (in parallel when ``threads > 1``);
    a constant patch raises :class:`DegenerateInputError` naming its index.
    """
    kind = Kind(kind)
    out = np.empty((len(patches), cfg.dim(kind)))

    def work(i):
        try:
            out[i] = describe(patches[i], kind, cfg).values
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"patch {i}: {exc}") from None

    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(patches) < 2:
        for i in range(len(patches)):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(patches))))
    return out


def extract_polar_cartesian(patches: Sequence[Patch], cfg: DescriptorConfig = DEFAULT_CONFIG,
                            threads: int | None = None) -> dict[Kind, np.ndarray]:
    """Unit polar, Cartesian and combined descriptors, sharing one attribute pass."""
    n = len(patches)
    polar = np.empty((n, cfg.polar_dim))
    cart = np.empty((n, cfg.cartesian_dim))

    def work(i):
        attrs = extract_attributes(patches[i])
        try:
            polar[i] = l2_normalize(polar_descriptor(attrs, cfg)).values
            cart[i] = l2_normalize(cartesian_descriptor(attrs, cfg)).values
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"patch {i}: {exc}") from None

    threads = default_threads() if threads is None else threads
    if threads <= 1 or n < 2:
        for i in range(n):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(n)))
    combined = np.empty((n, cfg.combined_dim))
    for i in range(n):
        combined[i] = combine(polar[i], cart[i]).values
    return {Kind.POLAR: polar, Kind.CARTESIAN: cart, Kind.COMBINED: combined}


def brute_force_match_kernel(P: Patch, Q: Patch, variant: Kind | str,
                             cfg: DescriptorConfig = DEFAULT_CONFIG) -> float:
    """Explicit double sum over pixel pairs of the match kernel.

    Evaluates the truncated scalar kernels directly (no feature maps), so it
    serves as an independent check of descriptor dot products. Restricted to
    patches of width <= 16.
    """
    if P.width > ORACLE_MAX_WIDTH or Q.width > ORACLE_MAX_WIDTH:
        raise ValueError(f"brute-force oracle limited to width <= {ORACLE_MAX_WIDTH}")
    variant = Kind[variant.upper()] if isinstance(variant, str) else Kind(variant)
    a, b = extract_attributes(P), extract_attributes(Q)

    def pair_kernel(name, va, vb):
        return eval_kernel(cfg.maps[name], va[:, None], vb[None, :])

    if variant is Kind.POLAR:
        k = (pair_kernel("phi", a.phi, b.phi)
             * pair_kernel("rho", map_to_half_interval(a.rho, 0.0, 1.0), map_to_half_interval(b.rho, 0.0, 1.0))
             * pair_kernel("theta_rel", a.theta_rel, b.theta_rel))
    elif variant is Kind.CARTESIAN:
        k = (pair_kernel("x", map_to_half_interval(a.x, 1.0, a.width), map_to_half_interval(b.x, 1.0, b.width))
             * pair_kernel("y", map_to_half_interval(a.y, 1.0, a.width), map_to_half_interval(b.y, 1.0, b.width))
             * pair_kernel("theta", a.theta, b.theta))
    else:
        raise ValueError("oracle supports polar and cartesian variants only")
    wa = a.g * np.sqrt(a.m)
    wb = b.g * np.sqrt(b.m)
    total = 0.0
    for i in range(len(wa)):
        total += float(np.sum(wa[i] * wb * k[i]))
    return total
