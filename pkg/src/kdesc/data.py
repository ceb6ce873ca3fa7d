"""Patch dataset loading/writing, synthetic patch sets and descriptor files.

Phototourism layout (one directory per set)::

    patches0000.bmp ...   1024x1024 grids of 16x16 patches of 64x64 pixels,
                          read in lexicographic file order, row-major per grid
    info.txt              one line per patch, first token = 3D point id
    m50_*.txt             optional pair files, 6 integers per line:
                          patch1 point1 _ patch2 point2 _

HPatches-like layout: ``<root>/<sequence>/<view>.png`` where each image is a
vertical stack of ``patch_size`` x ``patch_size`` patches; patch ``i`` of every
view of a sequence shows the same physical point.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .descriptor import Kind
from .exceptions import FormatError, LoadError
from .patch import Patch
from .postprocess import PairList

log = logging.getLogger(__name__)

PT_GRID = 1024
PT_PATCH = 64
PT_PER_ROW = PT_GRID // PT_PATCH
PT_PER_IMAGE = PT_PER_ROW * PT_PER_ROW
IMAGE_SUFFIXES = (".bmp", ".png", ".pgm")

DESC_MAGIC = b"KPDS"
DESC_VERSION = 1
_DESC_HEADER = struct.Struct("<4sIQIB")


@dataclass
class LabeledPatchSet:
    patches: list
    labels: np.ndarray
    pairs: PairList | None = None
    sequences: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.patches):
            raise ValueError("patches and labels differ in length")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        if self.sequences is not None and len(self.sequences) != len(self.patches):
            raise ValueError("sequence grouping and patches differ in length")

    def __len__(self):
        return len(self.patches)


# -- image helpers ---------------------------------------------------------

def read_gray8(path) -> np.ndarray:
    """8-bit image as float array in [0, 255]; colour is averaged (r+g+b)/3."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
            elif im.mode in ("RGB", "RGBA", "P", "LA"):
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
                arr = rgb.sum(axis=2) / 3.0
            else:
                raise LoadError(f"{path}: unsupported image mode {im.mode} (8-bit only)")
    except LoadError:
        raise
    except Exception as exc:
        raise LoadError(f"{path}: cannot read image ({exc})") from exc
    return arr


def write_gray8(path, arr: np.ndarray) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)


def to_uint8(patch: Patch) -> np.ndarray:
    return np.rint(patch.pixels * 255.0).astype(np.uint8)


# -- Phototourism ----------------------------------------------------------

def parse_pair_file(path, n_patches: int) -> PairList:
    pos, neg = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            tok = line.split()
            if not tok:
                continue
            if len(tok) != 6:
                raise LoadError(f"{path}:{lineno}: expected 6 integers")
            i, pid_i, _, j, pid_j, _ = (int(t) for t in tok)
            if not (0 <= i < n_patches and 0 <= j < n_patches):
                raise LoadError(f"{path}:{lineno}: patch index out of range")
            (pos if pid_i == pid_j else neg).append((i, j))
    return PairList(np.array(pos, dtype=np.int64).reshape(-1, 2),
                    np.array(neg, dtype=np.int64).reshape(-1, 2))


def load_pt_set(directory, pair_file=None) -> LabeledPatchSet:
    """Load a Phototourism-style set.

    ``pair_file`` selects the pair list; by default the largest ``m50_*.txt``
    in the directory is used (none present -> ``pairs`` is None).
    """
    d = Path(directory)
    info = d / "info.txt"
    if not info.is_file():
        raise LoadError(f"{info}: missing info file")
    labels = []
    with open(info) as f:
        for lineno, line in enumerate(f, 1):
            tok = line.split()
            if tok:
                try:
                    labels.append(int(tok[0]))
                except ValueError:
                    raise LoadError(f"{info}:{lineno}: bad point id {tok[0]!r}") from None
    images = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    n = len(labels)
    if n > len(images) * PT_PER_IMAGE or n <= (len(images) - 1) * PT_PER_IMAGE:
        raise LoadError(f"{info}: {n} patches listed but {len(images)} grid image(s) found")
    patches = []
    for img_path in images:
        grid = read_gray8(img_path)
        if grid.shape != (PT_GRID, PT_GRID):
            raise LoadError(f"{img_path}: grid must be {PT_GRID}x{PT_GRID}, got {grid.shape}")
        for k in range(min(PT_PER_IMAGE, n - len(patches))):
            r, c = divmod(k, PT_PER_ROW)
            cell = grid[r * PT_PATCH:(r + 1) * PT_PATCH, c * PT_PATCH:(c + 1) * PT_PATCH]
            patches.append(Patch(cell / 255.0))
    if pair_file is None:
        candidates = sorted(d.glob("m50_*.txt"), key=lambda p: (p.stat().st_size, p.name))
        pair_file = candidates[-1] if candidates else None
    pairs = parse_pair_file(pair_file, n) if pair_file is not None else None
    return LabeledPatchSet(patches, labels, pairs, meta={"name": d.name})


def write_pt_set(data: LabeledPatchSet, directory, pair_name: str = "m50_pairs.txt") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for p in data.patches:
        if p.width != PT_PATCH:
            raise ValueError(f"Phototourism layout needs {PT_PATCH}x{PT_PATCH} patches")
    for img_idx in range(0, max(1, -(-len(data) // PT_PER_IMAGE))):
        grid = np.zeros((PT_GRID, PT_GRID), dtype=np.uint8)
        chunk = data.patches[img_idx * PT_PER_IMAGE:(img_idx + 1) * PT_PER_IMAGE]
        for k, p in enumerate(chunk):
            r, c = divmod(k, PT_PER_ROW)
            grid[r * PT_PATCH:(r + 1) * PT_PATCH, c * PT_PATCH:(c + 1) * PT_PATCH] = to_uint8(p)
        write_gray8(d / f"patches{img_idx:04d}.bmp", grid)
    with open(d / "info.txt", "w") as f:
        for lab in data.labels:
            f.write(f"{lab} 0\n")
    if data.pairs is not None:
        with open(d / pair_name, "w") as f:
            for i, j in np.concatenate([data.pairs.positives, data.pairs.negatives]):
                f.write(f"{i} {data.labels[i]} 0 {j} {data.labels[j]} 0\n")
    return d


# -- patch stacks / HPatches-like ------------------------------------------

def load_patch_stack(path, patch_size: int) -> list[Patch]:
    img = read_gray8(path)
    h, w = img.shape
    if w != patch_size or h % patch_size:
        raise LoadError(f"{path}: {w}x{h} image is not a stack of {patch_size}px patches")
    return [Patch(img[k:k + patch_size] / 255.0) for k in range(0, h, patch_size)]


def write_patch_stack(path, patches: Sequence[Patch]) -> None:
    write_gray8(path, np.concatenate([to_uint8(p) for p in patches], axis=0))


def _view_order(paths):
    # reference view first, then the rest alphabetically
    return sorted(paths, key=lambda p: (p.stem != "ref", p.stem))


def load_hp_set(root, patch_size: int = 65) -> LabeledPatchSet:
    root = Path(root)
    seq_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not seq_dirs:
        raise LoadError(f"{root}: no sequence directories")
    patches, labels, groups = [], [], []
    offset = 0
    for seq in seq_dirs:
        views = _view_order([p for p in seq.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES])
        count = None
        for v in views:
            stack = load_patch_stack(v, patch_size)
            if count is None:
                count = len(stack)
            elif len(stack) != count:
                raise LoadError(f"{v}: {len(stack)} patches, reference view has {count}")
            patches.extend(stack)
            labels.extend(range(offset, offset + len(stack)))
            groups.extend((seq.name, v.stem) for _ in stack)
        offset += count or 0
    return LabeledPatchSet(patches, labels, sequences=groups, meta={"name": root.name})


def write_hp_set(data: LabeledPatchSet, root) -> Path:
    if data.sequences is None:
        raise ValueError("HPatches layout needs sequence grouping")
    root = Path(root)
    order: dict = {}
    for idx, key in enumerate(data.sequences):
        order.setdefault(key, []).append(idx)
    for (seq, view), idxs in order.items():
        (root / str(seq)).mkdir(parents=True, exist_ok=True)
        write_patch_stack(root / str(seq) / f"{view}.png", [data.patches[i] for i in idxs])
    return root


# -- synthetic data --------------------------------------------------------

@dataclass(frozen=True)
class Nuisance:
    rotation: float = 0.0
    translation: float = 0.0
    noise: float = 0.0

    def __post_init__(self):
        if min(self.rotation, self.translation, self.noise) < 0:
            raise ValueError("nuisance standard deviations must be >= 0")


def _base_pattern(rng: np.random.Generator, width: int) -> np.ndarray:
    """Seeded mixture of 3-6 oriented anisotropic Gaussian blobs, scaled to [0.1, 0.9].

    Blobs are large relative to the patch and may be centered outside it, so
    most patches show smooth, partly directional intensity ramps.
    """
    c = (width + 1) / 2.0
    ys, xs = np.mgrid[1:width + 1, 1:width + 1].astype(np.float64)
    img = np.zeros((width, width))
    for _ in range(rng.integers(3, 7)):
        r = rng.uniform(0.0, 1.8) * width / 2.0
        a = rng.uniform(0.0, 2 * np.pi)
        cx, cy = c + r * np.cos(a), c + r * np.sin(a)
        s_major = rng.uniform(0.2, 0.5) * width
        s_minor = rng.uniform(0.1, 0.3) * width
        ori = rng.uniform(0.0, np.pi)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 1.0)
        u = (xs - cx) * np.cos(ori) + (ys - cy) * np.sin(ori)
        v = -(xs - cx) * np.sin(ori) + (ys - cy) * np.cos(ori)
        img += amp * np.exp(-0.5 * ((u / s_major) ** 2 + (v / s_minor) ** 2))
    lo, hi = img.min(), img.max()
    return 0.1 + 0.8 * (img - lo) / (hi - lo)


def warp_bilinear(img: np.ndarray, angle: float, shift: tuple[float, float]) -> np.ndarray:
    """Rotate content by ``angle`` about the patch center, then translate by ``shift``.

    Output pixel q samples the input at ``c + R(-angle)(q - shift - c)`` with
    bilinear interpolation and clamped (edge-replicated) borders.
    """
    w = img.shape[0]
    c = (w - 1) / 2.0
    ys, xs = np.mgrid[0:w, 0:w].astype(np.float64)
    dx, dy = xs - shift[0] - c, ys - shift[1] - c
    ca, sa = np.cos(angle), np.sin(angle)
    sx = c + ca * dx + sa * dy
    sy = c - sa * dx + ca * dy
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, w - 1.0)
    x0 = np.minimum(np.floor(sx).astype(int), w - 2)
    y0 = np.minimum(np.floor(sy).astype(int), w - 2)
    fx, fy = sx - x0, sy - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x0 + 1] * fx
    bot = img[y0 + 1, x0] * (1 - fx) + img[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def generate_synthetic_set(seed: int, n_classes: int, views_per_class: int, width: int = 65,
                           nuisance: Nuisance = Nuisance()) -> LabeledPatchSet:
    """Labeled patches: one base pattern per class, views under random nuisances.

    Every view (including the first) receives independent rotation, translation
    and pixel noise draws. The applied rotations/translations are stored in
    ``meta``. Views of class ``k`` are grouped as sequence ``k``.
    """
    if n_classes < 1 or views_per_class < 1:
        raise ValueError("need at least one class and one view")
    if width < 3:
        raise ValueError("width must be >= 3")
    rng = np.random.default_rng(seed)
    patches, labels, groups, rots, shifts = [], [], [], [], []
    for k in range(n_classes):
        base = _base_pattern(rng, width)
        for v in range(views_per_class):
            alpha = rng.normal(0.0, nuisance.rotation) if nuisance.rotation else 0.0
            t = tuple(rng.normal(0.0, nuisance.translation, 2)) if nuisance.translation else (0.0, 0.0)
            img = base if alpha == 0.0 and t == (0.0, 0.0) else warp_bilinear(base, alpha, t)
            if nuisance.noise:
                img = np.clip(img + rng.normal(0.0, nuisance.noise, img.shape), 0.0, 1.0)
            patches.append(Patch(img))
            labels.append(k)
            groups.append((f"c{k:05d}", "ref" if v == 0 else f"v{v}"))
            rots.append(alpha)
            shifts.append(t)
    meta = {"seed": seed, "rotations": np.array(rots), "translations": np.array(shifts),
            "nuisance": nuisance}
    return LabeledPatchSet(patches, labels, sequences=groups, meta=meta)


def make_eval_pairs(labels, n_pairs: int, seed: int) -> PairList:
    """Balanced seeded pair list: ``n_pairs`` positives and ``n_pairs`` negatives.

    Positives are drawn from within-class pairs, negatives uniformly from
    cross-class pairs; both without repetition when enough pairs exist.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least two classes to form pairs")
    pos = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if len(idx) > 1:
            i, j = np.triu_indices(len(idx), 1)
            pos.append(np.stack([idx[i], idx[j]], axis=1))
    if not pos:
        raise ValueError("no class has two or more members")
    pos = np.concatenate(pos)
    pos = pos[rng.permutation(len(pos))[:n_pairs]]
    seen = set()
    neg = []
    n = len(labels)
    attempts = 0
    while len(neg) < len(pos) and attempts < 100 * n_pairs + 1000:
        attempts += 1
        i, j = (int(v) for v in rng.integers(0, n, 2))
        key = (min(i, j), max(i, j))
        if labels[i] != labels[j] and key not in seen:
            seen.add(key)
            neg.append(key)
    return PairList(pos, np.array(neg, dtype=np.int64).reshape(-1, 2))


# -- descriptor files ------------------------------------------------------

def write_descriptors(path, X, kind: Kind) -> None:
    """Header ``"KPDS", version u32, count u64, dim u32, kind u8``; f32 row-major payload."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.size == 0:
        X = X.reshape(0, X.shape[1] if X.ndim == 2 else 0)
    if not np.all(np.isfinite(X)):
        raise ValueError("descriptors must be finite")
    with open(path, "wb") as f:
        f.write(_DESC_HEADER.pack(DESC_MAGIC, DESC_VERSION, X.shape[0], X.shape[1], int(kind)))
        f.write(X.astype("<f4").tobytes(order="C"))


def read_descriptors(path) -> tuple[np.ndarray, Kind]:
    data = Path(path).read_bytes()
    if len(data) < _DESC_HEADER.size:
        raise FormatError(f"{path}: truncated descriptor header")
    magic, version, count, dim, kind = _DESC_HEADER.unpack_from(data)
    if magic != DESC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DESC_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise FormatError(f"{path}: unknown descriptor kind {kind}") from None
    expected = _DESC_HEADER.size + 4 * count * dim
    if len(data) != expected:
        raise FormatError(f"{path}: payload holds {len(data) - _DESC_HEADER.size} bytes, "
                          f"header implies {expected - _DESC_HEADER.size}")
    X = np.frombuffer(data, "<f4", count * dim, _DESC_HEADER.size).reshape(count, dim)
    if not np.all(np.isfinite(X)):
        raise FormatError(f"{path}: non-finite descriptor values")
    return X.astype(np.float64), kind
