"""Patch maps: pixel similarity M(p, q) of one fixed pixel p against every grid pixel q.

Magnitude and center weights are fixed to 1, so a map shows the geometry of
the kernel product alone. Every q carries the same gradient angle ``q_theta``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptor import DEFAULT_CONFIG, DescriptorConfig, kron_rows
from .featmap import map_to_half_interval
from .patch import pixel_grid, polar_coordinates, relative_angle, wrap_angle
from .postprocess import WhiteningModel

VARIANTS = ("phirhothetarel", "phirhotheta", "xytheta", "xythetarel", "combined")
N_CONTOURS = 10


@dataclass(frozen=True)
class PatchMapSpec:
    variant: str = "phirhothetarel"
    width: int = 65
    p: tuple = (20, 20)
    p_theta: float = 0.0
    q_theta: float = 0.0
    transform: WhiteningModel | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown patch-map variant {self.variant!r}; choose from {VARIANTS}")
        if self.width < 3:
            raise ValueError("map width must be >= 3")
        x, y = self.p
        if not (1 <= x <= self.width and 1 <= y <= self.width):
            raise ValueError(f"pixel {self.p} outside the {self.width}x{self.width} grid")
        object.__setattr__(self, "p_theta", float(wrap_angle(self.p_theta)))
        object.__setattr__(self, "q_theta", float(wrap_angle(self.q_theta)))

    @classmethod
    def from_delta(cls, variant, width, p, dtheta, p_theta=0.0, transform=None):
        """Spec with ``q_theta = p_theta - dtheta``."""
        return cls(variant, width, tuple(p), p_theta, p_theta - dtheta, transform)


def pixel_features(variant: str, x, y, theta, width: int,
                   cfg: DescriptorConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Feature vectors ``psi(q)`` of pixels at 1-based (x, y) with gradient angle theta."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    theta = np.broadcast_to(wrap_angle(theta), x.shape)
    rho, phi = polar_coordinates(x, y, width)
    theta_rel = relative_angle(theta, phi)
    maps = cfg.maps
    if variant == "combined":
        return np.concatenate([pixel_features("phirhothetarel", x, y, theta, width, cfg),
                               pixel_features("xytheta", x, y, theta, width, cfg)], axis=1) / np.sqrt(2.0)
    if variant.startswith("phirho"):
        pos = [maps["phi"](phi), maps["rho"](map_to_half_interval(rho, 0.0, 1.0))]
    else:
        pos = [maps["x"](map_to_half_interval(x, 1.0, width)),
               maps["y"](map_to_half_interval(y, 1.0, width))]
    ang = maps["theta_rel"](theta_rel) if variant.endswith("rel") else maps["theta"](theta)
    return kron_rows(*pos, ang)


def _features(spec: PatchMapSpec, cfg: DescriptorConfig):
    xs, ys = pixel_grid(spec.width)
    fq = pixel_features(spec.variant, xs, ys, spec.q_theta, spec.width, cfg)
    fp = pixel_features(spec.variant, spec.p[0], spec.p[1], spec.p_theta, spec.width, cfg)[0]
    return fp, fq


def compute_patch_map(spec: PatchMapSpec, cfg: DescriptorConfig = DEFAULT_CONFIG) -> np.ndarray:
    """W x W grid of ``psi(p)^T psi(q)``, or the transformed similarity if the spec has a transform."""
    if spec.transform is not None:
        return compute_transformed_patch_map(spec, cfg)
    fp, fq = _features(spec, cfg)
    return (fq @ fp).reshape(spec.width, spec.width)


def compute_transformed_patch_map(spec: PatchMapSpec, cfg: DescriptorConfig = DEFAULT_CONFIG,
                                  form: str = "direct") -> np.ndarray:
    """Similarity after a linear descriptor transform.

    ``form="direct"`` evaluates ``(A^T(psi(p)-mu))^T (A^T(psi(q)-mu))``;
    ``form="expanded"`` sums the four terms of its expansion, including the
    constant ``mu^T A A^T mu``. Both agree up to rounding.
    """
    model = spec.transform
    if model is None:
        raise ValueError("spec has no transform")
    fp, fq = _features(spec, cfg)
    if fp.size != model.d_in:
        raise ValueError(f"variant {spec.variant} has dim {fp.size}, transform expects {model.d_in}")
    A, mu = model.A, model.mu
    if form == "direct":
        vals = ((fq - mu) @ A) @ (A.T @ (fp - mu))
    elif form == "expanded":
        AAt_p = A @ (A.T @ fp)
        AAt_mu = A @ (A.T @ mu)
        vals = fq @ AAt_p - fp @ AAt_mu - fq @ AAt_mu + mu @ AAt_mu
    else:
        raise ValueError(f"unknown form {form!r}")
    return vals.reshape(spec.width, spec.width)


# -- rendering -------------------------------------------------------------

def contour_levels(grid: np.ndarray, n: int = N_CONTOURS) -> np.ndarray:
    lo, hi = float(grid.min()), float(grid.max())
    if hi <= lo:
        return np.array([])
    return lo + (hi - lo) * np.arange(1, n + 1) / (n + 1)


def contour_mask(grid: np.ndarray, levels) -> np.ndarray:
    """Pixels at or above a level with a 4-neighbour strictly below it."""
    mask = np.zeros(grid.shape, dtype=bool)
    padded = np.pad(grid, 1, mode="edge")
    neighbours = [padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:]]
    low = np.minimum.reduce(neighbours)
    for lev in levels:
        mask |= (grid >= lev) & (low < lev)
    return mask


def to_gray(grid: np.ndarray, lo_val: int = 0) -> np.ndarray:
    """Min-max scale to 8-bit in [lo_val, 255]; a constant grid maps to mid-gray."""
    lo, hi = float(grid.min()), float(grid.max())
    if hi <= lo:
        return np.full(grid.shape, 128, dtype=np.uint8)
    scaled = lo_val + (255 - lo_val) * (grid - lo) / (hi - lo)
    return np.rint(scaled).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def render_buffer(grid: np.ndarray, mode: str) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if not np.all(np.isfinite(grid)):
        raise ValueError("patch map contains non-finite values")
    if mode == "grayscale-pgm":
        return to_gray(grid)
    if mode == "isocontour-pgm":
        # shading kept above 96 so that black marks contours only
        img = to_gray(grid, lo_val=96)
        img[contour_mask(grid, contour_levels(grid))] = 0
        return img
    raise ValueError(f"unknown render mode {mode!r}")


def render_map(grid: np.ndarray, out, mode: str = "grayscale-pgm") -> Path:
    out = Path(out)
    if mode == "csv":
        grid = np.asarray(grid, dtype=np.float64)
        if not np.all(np.isfinite(grid)):
            raise ValueError("patch map contains non-finite values")
        np.savetxt(out, grid, fmt="%.17g", delimiter=",")
    else:
        write_pgm(out, render_buffer(grid, mode))
    return out


def map_filename(variant: str, p, dtheta: float, suffix: str = "", ext: str = "pgm") -> str:
    tag = f"_{suffix}" if suffix else ""
    return f"{variant}_p_{int(p[0])}_{int(p[1])}_d_{dtheta:g}{tag}.{ext}"
