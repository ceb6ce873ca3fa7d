"""Grayscale patches and per-pixel attributes.

Pixel coordinates are 1-based: ``x`` is the column index and ``y`` the row
index, both in ``{1..W}``. Attribute arrays are flattened in row-major order,
so pixel ``i`` sits at row ``i // W`` and column ``i % W``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Patch:
    """Square grayscale patch with intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"patch must be square 2-D, got shape {arr.shape}")
        if arr.shape[0] < 3:
            raise ValueError(f"patch width must be >= 3, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("patch intensities must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("patch intensities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_uint8(cls, data) -> "Patch":
        return cls(np.asarray(data, dtype=np.float64) / 255.0)


class Pixel(NamedTuple):
    x: float
    y: float
    rho: float
    phi: float
    theta: float
    theta_rel: float
    m: float
    g: float


@dataclass(frozen=True)
class PixelAttributes:
    """Per-pixel attributes of one patch stored as parallel arrays."""

    width: int
    x: np.ndarray
    y: np.ndarray
    rho: np.ndarray
    phi: np.ndarray
    theta: np.ndarray
    theta_rel: np.ndarray
    m: np.ndarray
    g: np.ndarray

    def __len__(self):
        return len(self.x)

    def __getitem__(self, i) -> Pixel:
        return Pixel(
            float(self.x[i]), float(self.y[i]), float(self.rho[i]),
            float(self.phi[i]), float(self.theta[i]), float(self.theta_rel[i]),
            float(self.m[i]), float(self.g[i]),
        )

    def rotated(self, alpha: float) -> "PixelAttributes":
        """Analytic rotation: shift both polar and gradient angles by ``alpha``.

        Positions ``x``, ``y`` are left untouched; only the angular attributes
        change, which is what the rotation-robustness checks need.
        """
        phi = wrap_angle(self.phi + alpha)
        theta = wrap_angle(self.theta + alpha)
        return PixelAttributes(
            self.width, self.x, self.y, self.rho, phi, theta,
            relative_angle(theta, phi), self.m, self.g,
        )


def compute_gradients(patch: Patch) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with clamped indices at the border.

    Returns ``(gx, gy)`` grids; ``gx`` differentiates along columns (x) and
    ``gy`` along rows (y).
    """
    img = patch.pixels
    padded = np.pad(img, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return gx, gy


def wrap_angle(a):
    """Reduce angles to [0, 2*pi); guards the rounding case mod() == 2*pi."""
    a = np.mod(np.asarray(a, dtype=np.float64), TWO_PI)
    return np.where(a >= TWO_PI, 0.0, a)


def relative_angle(theta, phi):
    return wrap_angle(np.asarray(theta) - np.asarray(phi))


def center_weight(rho):
    return np.exp(-np.asarray(rho) ** 2)


def polar_coordinates(x, y, width: int):
    """Normalized center distance and polar angle of 1-based positions.

    The center is ((W+1)/2, (W+1)/2) and the radius normalizer W/2; distances
    beyond it (patch corners) clamp to 1. The angle at the exact center is 0.
    """
    c = (width + 1) / 2.0
    dx = np.asarray(x, dtype=np.float64) - c
    dy = np.asarray(y, dtype=np.float64) - c
    rho = np.minimum(1.0, np.hypot(dx, dy) / (width / 2.0))
    phi = wrap_angle(np.arctan2(dy, dx))
    return rho, phi


def pixel_grid(width: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major flattened 1-based (x, y) coordinates of a W x W grid."""
    ys, xs = np.meshgrid(np.arange(1, width + 1), np.arange(1, width + 1), indexing="ij")
    return xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)


def extract_attributes(patch: Patch) -> PixelAttributes:
    w = patch.width
    gx, gy = compute_gradients(patch)
    gx, gy = gx.ravel(), gy.ravel()
    m = np.hypot(gx, gy)
    theta = np.where(m > 0, wrap_angle(np.arctan2(gy, gx)), 0.0)
    x, y = pixel_grid(w)
    rho, phi = polar_coordinates(x, y, w)
    return PixelAttributes(
        width=w, x=x, y=y, rho=rho, phi=phi, theta=theta,
        theta_rel=relative_angle(theta, phi), m=m, g=center_weight(rho),
    )
