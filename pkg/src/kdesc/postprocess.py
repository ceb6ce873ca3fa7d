"""Descriptor post-processing: centering + linear projection, then l2.

Two ways of learning the mean ``mu`` and projection ``A`` are provided:

* PCA on a descriptor sample, followed at apply time by signed square-rooting
  (power law with ``alpha``);
* learned whitening (LW): whiten with the covariance of matching-pair
  differences, then rotate onto the leading principal directions of the
  non-matching-pair differences measured in the whitened space.
"""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .descriptor import Descriptor, Kind, NormState
from .exceptions import DegenerateInputError, FormatError

log = logging.getLogger(__name__)

MODEL_MAGIC = b"KPWM"
MODEL_VERSION = 1
EIG_FLOOR = 1e-9
RANK_TOL = 1e-12
MAX_NEGATIVES = 1_000_000
PAIR_CHUNK = 50_000


class Variant(enum.IntEnum):
    PCA = 0
    LW = 1


@dataclass(frozen=True)
class PairList:
    """Index pairs into a descriptor set."""

    positives: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    negatives: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        for name in ("positives", "negatives"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 2)
            if np.any(arr[:, 0] == arr[:, 1]):
                raise ValueError(f"{name} contains a self pair")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def validate(self, labels) -> None:
        labels = np.asarray(labels)
        n = len(labels)
        for name in ("positives", "negatives"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ValueError(f"{name} index out of range for {n} items")
        p, q = self.positives.T, self.negatives.T
        if np.any(labels[p[0]] != labels[p[1]]):
            raise ValueError("positive pair with differing labels")
        if np.any(labels[q[0]] == labels[q[1]]):
            raise ValueError("negative pair with equal labels")

    def scored(self, X: np.ndarray):
        """Dot-product scores of all pairs and a parallel boolean label array."""
        pairs = np.concatenate([self.positives, self.negatives])
        scores = np.einsum("ij,ij->i", X[pairs[:, 0]], X[pairs[:, 1]])
        labels = np.zeros(len(pairs), dtype=bool)
        labels[: len(self.positives)] = True
        return scores, labels


@dataclass(frozen=True)
class WhiteningModel:
    mu: np.ndarray
    A: np.ndarray
    variant: Variant
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).ravel()
        A = np.asarray(self.A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != mu.size:
            raise ValueError(f"projection shape {A.shape} does not match mean of size {mu.size}")
        if A.shape[1] > A.shape[0]:
            raise ValueError("d_out must not exceed d_in")
        if not np.all(np.isfinite(A)) or not np.all(np.isfinite(mu)):
            raise ValueError("model parameters must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "variant", Variant(self.variant))

    @property
    def d_in(self) -> int:
        return self.A.shape[0]

    @property
    def d_out(self) -> int:
        return self.A.shape[1]


def power_law(v, alpha: float):
    """Elementwise ``sign(v) * |v|**alpha``."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.abs(v) ** alpha


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def _top_eigvecs(C: np.ndarray, d_out: int, what: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh((C + C.T) / 2.0)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    usable = int(np.sum(vals > RANK_TOL * max(vals[0], 0.0))) if vals[0] > 0 else 0
    if usable < d_out:
        raise DegenerateInputError(f"{what}: only {usable} usable eigen-directions, need {d_out}")
    return vals[:d_out], _fix_signs(vecs[:, :d_out])


def fit_pca(X, d_out: int, alpha: float = 0.5) -> WhiteningModel:
    X = np.asarray(X, dtype=np.float64)
    n, d_in = X.shape
    if d_out > d_in:
        raise ValueError(f"d_out={d_out} exceeds input dimension {d_in}")
    if n <= d_in:
        raise ValueError(f"PCA needs more samples than dimensions ({n} <= {d_in})")
    mu = X.mean(axis=0)
    Xc = X - mu
    C = Xc.T @ Xc / n
    _, A = _top_eigvecs(C, d_out, "PCA")
    return WhiteningModel(mu, A, Variant.PCA, alpha=alpha)


# -- pair scatter matrices -------------------------------------------------

def _scatter_all_pairs(X: np.ndarray) -> tuple[np.ndarray, int]:
    """Sum of d d^T over all unordered pairs, via n*sum(x x^T) - s s^T."""
    n = len(X)
    s = X.sum(axis=0)
    return n * (X.T @ X) - np.outer(s, s), n * (n - 1) // 2


def _within_class_scatter(X: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, int]:
    S = np.zeros((X.shape[1], X.shape[1]))
    count = 0
    for c in np.unique(labels):
        Sc, k = _scatter_all_pairs(X[labels == c])
        S += Sc
        count += k
    return S, count


def pair_scatter(X: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Sum of (x_i - x_j)(x_i - x_j)^T over an explicit pair array."""
    S = np.zeros((X.shape[1], X.shape[1]))
    for start in range(0, len(pairs), PAIR_CHUNK):
        chunk = pairs[start:start + PAIR_CHUNK]
        D = X[chunk[:, 0]] - X[chunk[:, 1]]
        S += D.T @ D
    return S


def sample_negative_pairs(labels: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Uniform random cross-class pairs (with replacement) from a seeded generator."""
    rng = np.random.default_rng(seed)
    n = len(labels)
    out = []
    got = 0
    while got < count:
        i = rng.integers(0, n, size=2 * (count - got) + 16)
        j = rng.integers(0, n, size=i.size)
        keep = labels[i] != labels[j]
        cand = np.stack([i[keep], j[keep]], axis=1)[: count - got]
        out.append(cand)
        got += len(cand)
    return np.concatenate(out)


def _whitening_matrix(C: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((C + C.T) / 2.0)
    floor = EIG_FLOOR * vals.max()
    clamped = np.maximum(vals, floor)
    if np.any(vals < floor):
        log.info("whitening: %d eigenvalues clamped to the floor", int(np.sum(vals < floor)))
    return (vecs / np.sqrt(clamped)) @ vecs.T


def fit_lw(X, labels, d_out: int, pairs: PairList | None = None, seed: int = 0,
           max_negatives: int = MAX_NEGATIVES) -> WhiteningModel:
    """Learned whitening from class labels (or an explicit pair list).

    With no ``pairs`` every within-class pair is a positive, and every
    cross-class pair is a negative unless there are more than
    ``max_negatives`` of them, in which case that many are sampled with
    ``seed``. The returned model maps ``x -> U^T W (x - mu)``.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    n, d_in = X.shape
    if len(labels) != n:
        raise ValueError("labels and descriptors differ in length")
    if len(np.unique(labels)) < 2:
        raise ValueError("learned whitening needs at least two classes")
    if d_out > d_in:
        raise ValueError(f"d_out={d_out} exceeds input dimension {d_in}")
    mu = X.mean(axis=0)

    if pairs is not None:
        pairs.validate(labels)
        if not len(pairs.positives) or not len(pairs.negatives):
            raise ValueError("pair list needs positives and negatives")
        S_pos, n_pos = pair_scatter(X, pairs.positives), len(pairs.positives)
        S_neg, n_neg = pair_scatter(X, pairs.negatives), len(pairs.negatives)
    else:
        S_pos, n_pos = _within_class_scatter(X, labels)
        S_all, n_all = _scatter_all_pairs(X)
        n_neg = n_all - n_pos
        if n_neg <= max_negatives:
            S_neg = S_all - S_pos
        else:
            S_neg = pair_scatter(X, sample_negative_pairs(labels, max_negatives, seed))
            n_neg = max_negatives
    if n_pos == 0:
        raise ValueError("no matching pairs available")
    if n_pos < d_in:
        log.warning("learned whitening: %d matching pairs for %d dimensions", n_pos, d_in)

    W = _whitening_matrix(S_pos / n_pos)
    C_D = W @ (S_neg / n_neg) @ W
    _, U = _top_eigvecs(C_D, d_out, "learned whitening")
    return WhiteningModel(mu, W @ U, Variant.LW, alpha=1.0, seed=seed)


def project(model: WhiteningModel, X) -> np.ndarray:
    """Affine part only: ``A^T (x - mu)`` for one vector or rows of a matrix."""
    return (np.asarray(X, dtype=np.float64) - model.mu) @ model.A


def apply_batch(model: WhiteningModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.d_in:
        raise ValueError(f"descriptor dim {X.shape[1]} does not match model input {model.d_in}")
    Y = project(model, X)
    if model.variant is Variant.PCA:
        Y = power_law(Y, model.alpha)
    norms = np.sqrt(np.einsum("ij,ij->i", Y, Y))
    bad = np.flatnonzero(~(norms > 0))
    if bad.size:
        raise DegenerateInputError(f"descriptor {bad[0]} projects to zero")
    return Y / norms[:, None]


def apply_transform(model: WhiteningModel, d: Descriptor) -> Descriptor:
    if d.dim != model.d_in:
        raise ValueError(f"descriptor dim {d.dim} does not match model input {model.d_in}")
    y = apply_batch(model, d.values)[0]
    return Descriptor(y, Kind.POSTPROCESSED, NormState.UNIT)


# -- model file ------------------------------------------------------------

_HEADER = struct.Struct("<4sIBIId")


def save_model(model: WhiteningModel, path) -> None:
    """Little-endian: magic, version, variant, d_in, d_out, alpha, mu, A (column-major), seed."""
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, int(model.variant),
                             model.d_in, model.d_out, float(model.alpha)))
        f.write(model.mu.astype("<f8").tobytes())
        f.write(model.A.astype("<f8").tobytes(order="F"))
        f.write(struct.pack("<Q", int(model.seed)))


def load_model(path) -> WhiteningModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated model header")
    magic, version, variant, d_in, d_out, alpha = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    if variant not in (0, 1):
        raise FormatError(f"{path}: unknown variant {variant}")
    expected = _HEADER.size + 8 * (d_in + d_in * d_out) + 8
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    off = _HEADER.size
    mu = np.frombuffer(data, "<f8", d_in, off).astype(np.float64)
    off += 8 * d_in
    A = np.frombuffer(data, "<f8", d_in * d_out, off).reshape((d_in, d_out), order="F").astype(np.float64)
    off += 8 * d_in * d_out
    (seed,) = struct.unpack_from("<Q", data, off)
    return WhiteningModel(mu, A, Variant(variant), alpha=alpha, seed=seed)
