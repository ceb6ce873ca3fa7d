"""Patch benchmark metrics and protocols.

Rankings sort by descending score; tied scores put positives first. Scores
are dot products of final unit descriptors.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import LabeledPatchSet, make_eval_pairs
from .descriptor import DEFAULT_CONFIG, DescriptorConfig, Kind, extract_polar_cartesian
from .postprocess import PairList, apply_batch, fit_lw, fit_pca

log = logging.getLogger(__name__)

RECALL_PCT = 95


def ranking(scores, labels) -> np.ndarray:
    """Labels reordered by descending score, positives first among ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    order = np.lexsort((~labels, -scores))
    return labels[order]


def fpr95(scores, labels) -> float:
    """False positive rate at the first rank reaching 95% recall.

    The cut is placed at the ``ceil(0.95 * n_pos)``-th positive of the
    ranking; the result is the fraction of negatives ranked above it.
    """
    ranked = ranking(scores, labels)
    n_pos = int(ranked.sum())
    n_neg = ranked.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("fpr95 needs at least one positive and one negative")
    k = (RECALL_PCT * n_pos + 99) // 100
    pos_idx = np.flatnonzero(ranked)[k - 1]
    negatives_above = pos_idx - (k - 1)
    return negatives_above / n_neg


def average_precision(scores, labels) -> float:
    ranked = ranking(scores, labels)
    n_pos = int(ranked.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    hits = np.flatnonzero(ranked)
    precision = np.arange(1, n_pos + 1) / (hits + 1)
    # correctly rounded sum, independent of summation order
    return math.fsum(precision) / n_pos


# -- pipelines -------------------------------------------------------------

_POST_NAMES = {"none": "", "pca": "+PCA", "lw": "+LW"}
_KIND_NAMES = {Kind.POLAR: "polar", Kind.CARTESIAN: "cartes", Kind.COMBINED: "polar+cartes"}


@dataclass(frozen=True)
class Pipeline:
    descriptor: Kind = Kind.COMBINED
    post: str = "lw"
    d_out: int = 128

    def __post_init__(self):
        object.__setattr__(self, "descriptor", Kind(self.descriptor))
        if self.post not in _POST_NAMES:
            raise ValueError(f"unknown post-processing {self.post!r}")
        if self.descriptor not in _KIND_NAMES:
            raise ValueError("pipelines start from polar, cartesian or combined descriptors")

    @property
    def name(self) -> str:
        return _KIND_NAMES[self.descriptor] + _POST_NAMES[self.post]

    def output_dim(self, cfg: DescriptorConfig = DEFAULT_CONFIG) -> int:
        d = cfg.dim(self.descriptor)
        return d if self.post == "none" else min(self.d_out, d)


# Row order of the ablation tables.
TABLE_PIPELINES = (
    Pipeline(Kind.POLAR, "none"),
    Pipeline(Kind.CARTESIAN, "none"),
    Pipeline(Kind.COMBINED, "none"),
    Pipeline(Kind.POLAR, "pca"),
    Pipeline(Kind.POLAR, "lw"),
    Pipeline(Kind.CARTESIAN, "lw"),
    Pipeline(Kind.COMBINED, "lw"),
)


class DescriptorCache:
    """Unit descriptors per patch set, computed once for all three kinds."""

    def __init__(self, cfg: DescriptorConfig = DEFAULT_CONFIG, threads: int | None = None):
        self.cfg = cfg
        self.threads = threads
        self._store: dict = {}

    def get(self, data: LabeledPatchSet, kind: Kind) -> np.ndarray:
        key = id(data)
        if key not in self._store:
            self._store[key] = (data, extract_polar_cartesian(data.patches, self.cfg, self.threads))
        return self._store[key][1][Kind(kind)]


def fit_pipeline(pipeline: Pipeline, X: np.ndarray, labels, seed: int = 0):
    d = min(pipeline.d_out, X.shape[1])
    if pipeline.post == "pca":
        return fit_pca(X, d)
    if pipeline.post == "lw":
        return fit_lw(X, labels, d, seed=seed)
    return None


def transform(model, X: np.ndarray) -> np.ndarray:
    return X if model is None else apply_batch(model, X)


@dataclass
class ProtocolReport:
    name: str
    metric: str
    splits: dict
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.splits.values()))) if self.splits else float("nan")

    def to_text(self) -> str:
        lines = [f"name={self.name}", f"metric={self.metric}"]
        lines += [f"{k}={v:.6f}" for k, v in self.splits.items()]
        lines.append(f"mean={self.mean:.6f}")
        lines += [f"{k}={v}" for k, v in sorted(self.meta.items())]
        return "\n".join(lines) + "\n"


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _eval_pairs(data: LabeledPatchSet, seed: int, n_pairs: int) -> PairList:
    if data.pairs is not None:
        return data.pairs
    counts = np.unique(data.labels, return_counts=True)[1]
    if len(counts) < 2 or counts.max() < 2:
        raise ValueError(f"set {data.meta.get('name', '?')} has no pair definitions")
    return make_eval_pairs(data.labels, n_pairs, seed)


def run_pt_protocol(train: LabeledPatchSet, tests: Sequence[LabeledPatchSet], pipeline: Pipeline,
                    cfg: DescriptorConfig = DEFAULT_CONFIG, seed: int = 0, n_pairs: int = 5000,
                    cache: DescriptorCache | None = None) -> ProtocolReport:
    """Fit post-processing on ``train`` and report FPR95 on each test set.

    Test sets without a pair file get ``n_pairs`` seeded positive and negative
    pairs derived from their labels.
    """
    cache = cache or DescriptorCache(cfg)
    model = fit_pipeline(pipeline, cache.get(train, pipeline.descriptor), train.labels, seed)
    train_name = train.meta.get("name", "train")
    splits = {}
    for i, test in enumerate(tests):
        pairs = _eval_pairs(test, seed, n_pairs)
        X = transform(model, cache.get(test, pipeline.descriptor))
        scores, labels = pairs.scored(X)
        splits[f"{test.meta.get('name', f'test{i}')}<-{train_name}"] = fpr95(scores, labels)
    meta = {"dim": pipeline.output_dim(cfg), "seed": seed,
            "config_hash": config_hash([asdict(pipeline), repr(cfg), seed, n_pairs])}
    return ProtocolReport(pipeline.name, "fpr95", splits, meta)


def run_pt_sixway(sets: Mapping[str, LabeledPatchSet], pipelines: Sequence[Pipeline] = TABLE_PIPELINES,
                  cfg: DescriptorConfig = DEFAULT_CONFIG, seed: int = 0, n_pairs: int = 5000,
                  threads: int | None = None) -> list[ProtocolReport]:
    """Train on each set, test on every other one, for every pipeline."""
    cache = DescriptorCache(cfg, threads)
    for name, s in sets.items():
        s.meta.setdefault("name", name)
    reports = []
    for pipe in pipelines:
        splits = {}
        meta = {}
        for test_name, test in sets.items():
            for train_name, train in sets.items():
                if train_name == test_name:
                    continue
                r = run_pt_protocol(train, [test], pipe, cfg, seed, n_pairs, cache)
                splits[f"{test_name}<-{train_name}"] = next(iter(r.splits.values()))
                meta = r.meta
        reports.append(ProtocolReport(pipe.name, "fpr95", splits, meta))
    return reports


def table_csv(reports: Sequence[ProtocolReport], scale: float = 100.0) -> str:
    """Ablation-table layout: one row per pipeline, columns D, Mean, then splits."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(reports[0].splits) if reports else []
    w.writerow(["method", "D", "mean"] + keys)
    for r in reports:
        w.writerow([r.name, r.meta.get("dim", "")] + [f"{scale * v:.2f}" for v in [r.mean] + [r.splits[k] for k in keys]])
    return buf.getvalue()


# -- simplified HPatches tasks ---------------------------------------------

def _group_views(data: LabeledPatchSet) -> dict:
    if data.sequences is None:
        raise ValueError("HPatches tasks need sequence grouping")
    groups: dict = {}
    for idx, (seq, view) in enumerate(data.sequences):
        groups.setdefault(seq, {}).setdefault(view, []).append(idx)
    usable = {}
    for seq, views in groups.items():
        if len(views) < 2:
            log.warning("sequence %s has fewer than 2 views; skipped", seq)
            continue
        usable[seq] = {v: np.array(ix) for v, ix in views.items()}
    return usable


def _ref_first(views: dict) -> list:
    return sorted(views, key=lambda v: (v != "ref", v))


def hp_scores(X: np.ndarray, data: LabeledPatchSet, seed: int = 0, n_pairs: int = 10000,
              n_distractors: int = 100) -> dict:
    """Verification, matching and retrieval mAP for unit descriptors ``X``."""
    groups = _group_views(data)
    if not groups:
        raise ValueError("no sequence with two or more views")
    labels = data.labels
    keep = np.concatenate([ix for views in groups.values() for ix in views.values()])

    # verification: balanced seeded pairs
    sub = make_eval_pairs(labels[keep], n_pairs, seed)
    pairs = PairList(keep[sub.positives], keep[sub.negatives])
    s, l = pairs.scored(X)
    verification = average_precision(s, l)

    # matching: each reference patch ranked against all patches of a target view
    aps = []
    for views in groups.values():
        order = _ref_first(views)
        ref = views[order[0]]
        for tgt_view in order[1:]:
            tgt = views[tgt_view]
            S = X[ref] @ X[tgt].T
            for r, i in enumerate(ref):
                pos = labels[tgt] == labels[i]
                if pos.any():
                    aps.append(average_precision(S[r], pos))
    matching = float(np.mean(aps))

    # retrieval: true correspondences + seeded distractors from other points
    rng = np.random.default_rng(seed + 1)
    aps = []
    for views in groups.values():
        order = _ref_first(views)
        for i in views[order[0]]:
            positives = keep[(labels[keep] == labels[i]) & (keep != i)]
            others = keep[labels[keep] != labels[i]]
            k = min(n_distractors, len(others))
            distract = rng.choice(others, size=k, replace=False)
            pool = np.concatenate([positives, distract])
            pos = np.zeros(len(pool), dtype=bool)
            pos[: len(positives)] = True
            aps.append(average_precision(X[pool] @ X[i], pos))
    retrieval = float(np.mean(aps))
    return {"verification": verification, "matching": matching, "retrieval": retrieval}


def run_hp_tasks(data: LabeledPatchSet, pipeline: Pipeline, train: LabeledPatchSet | None = None,
                 cfg: DescriptorConfig = DEFAULT_CONFIG, seed: int = 0, n_pairs: int = 10000,
                 n_distractors: int = 100, cache: DescriptorCache | None = None) -> ProtocolReport:
    cache = cache or DescriptorCache(cfg)
    model = None
    if pipeline.post != "none":
        if train is None:
            raise ValueError(f"pipeline {pipeline.name} needs a training set")
        model = fit_pipeline(pipeline, cache.get(train, pipeline.descriptor), train.labels, seed)
    X = transform(model, cache.get(data, pipeline.descriptor))
    splits = hp_scores(X, data, seed, n_pairs, n_distractors)
    meta = {"dim": X.shape[1], "seed": seed, "verification_seed": seed, "retrieval_seed": seed + 1,
            "n_pairs": n_pairs, "n_distractors": n_distractors,
            "config_hash": config_hash([asdict(pipeline), repr(cfg), seed, n_pairs, n_distractors])}
    return ProtocolReport(pipeline.name, "mAP", splits, meta)
