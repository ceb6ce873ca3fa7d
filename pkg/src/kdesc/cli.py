"""Command-line interface.

Configuration is layered: built-in defaults < ``--config`` key=value file <
command-line flags. The resolved configuration is printed on every run.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data as dio
from .descriptor import DescriptorConfig, Kind, extract_batch
from .evaluation import (TABLE_PIPELINES, DescriptorCache, Pipeline, ProtocolReport, config_hash,
                         run_hp_tasks, run_pt_sixway, table_csv)
from .exceptions import KDescError
from .featmap import KernelConfig
from .patchmap import PatchMapSpec, compute_patch_map, map_filename, render_map
from .postprocess import apply_batch, fit_lw, fit_pca, load_model, save_model

log = logging.getLogger("kdesc")

KERNEL_NAMES = ("phi", "rho", "theta_rel", "x", "y", "theta")
DESCRIPTOR_KINDS = {"polar": Kind.POLAR, "cartesian": Kind.CARTESIAN, "combined": Kind.COMBINED}
RENDER_MODES = ("grayscale-pgm", "isocontour-pgm", "csv")

DEFAULTS = {
    "seed": 0,
    "descriptor": "combined",
    "post": "lw",
    "d_out": 128,
    "patch_size": 65,
    "n_pairs": 5000,
    "n_distractors": 100,
    "pipelines": "all",
    # synth
    "classes": 100,
    "views": 4,
    "width": 65,
    "rotation": 0.0,
    "translation": 0.0,
    "noise": 0.0,
    "layout": "hp",
    # patchmap
    "variant": "phirhothetarel",
    "p": "20,20",
    "dtheta": 0.0,
    "p_theta": 0.0,
    "modes": "grayscale-pgm,isocontour-pgm,csv",
}
for _name, _cfg in zip(KERNEL_NAMES, (DescriptorConfig().phi, DescriptorConfig().rho, DescriptorConfig().theta_rel,
                                      DescriptorConfig().x, DescriptorConfig().y, DescriptorConfig().theta)):
    DEFAULTS[f"kernel_{_name}"] = f"{_cfg.kappa:g},{_cfg.n_freq}"


class UsageError(Exception):
    pass


@contextlib.contextmanager
def stage(module: str):
    """Prefix errors raised inside the block with the owning module name."""
    try:
        yield
    except (KDescError, ValueError, OSError) as exc:
        raise KDescError(f"{module}: {exc}") from exc


def read_config_file(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def resolve(args: argparse.Namespace) -> tuple[dict, set]:
    """Merge defaults, config file and flags; also return the explicitly set keys."""
    resolved = dict(DEFAULTS)
    explicit = set()
    if args.config:
        from_file = read_config_file(args.config)
        resolved.update(from_file)
        explicit |= set(from_file)
    for key, value in vars(args).items():
        if key in ("command", "func", "config", "kernel") or value is None:
            continue
        resolved[key] = value
        explicit.add(key)
    for item in args.kernel or []:
        name, _, spec = item.partition("=")
        if name not in KERNEL_NAMES or not spec:
            raise UsageError(f"--kernel expects NAME=KAPPA,N with NAME in {KERNEL_NAMES}")
        resolved[f"kernel_{name}"] = spec
        explicit.add(f"kernel_{name}")
    resolved["command"] = args.command
    return resolved, explicit


def descriptor_config(conf: dict) -> DescriptorConfig:
    base = DescriptorConfig()
    kw = {}
    for name in KERNEL_NAMES:
        try:
            kappa, n = str(conf[f"kernel_{name}"]).split(",")
            kw[name] = KernelConfig(float(kappa), int(n), getattr(base, name).domain)
        except ValueError as exc:
            raise UsageError(f"kernel_{name}: expected KAPPA,N ({exc})") from None
    return DescriptorConfig(**kw)


def print_config(conf: dict) -> str:
    h = config_hash({k: str(v) for k, v in conf.items()})
    print("# resolved configuration")
    for key in sorted(conf):
        print(f"{key}={conf[key]}")
    print(f"config_hash={h}")
    return h


def load_dataset(path, patch_size: int) -> dio.LabeledPatchSet:
    path = Path(path)
    if path.is_file():
        patches = dio.load_patch_stack(path, patch_size)
        return dio.LabeledPatchSet(patches, np.arange(len(patches)), meta={"name": path.stem})
    if (path / "info.txt").is_file():
        return dio.load_pt_set(path)
    if path.is_dir():
        return dio.load_hp_set(path, patch_size)
    raise KDescError(f"{path}: no such dataset")


def _kind(conf) -> Kind:
    try:
        return DESCRIPTOR_KINDS[conf["descriptor"]]
    except KeyError:
        raise UsageError(f"descriptor must be one of {sorted(DESCRIPTOR_KINDS)}") from None


def _d_out(conf, explicit, d_in: int) -> int:
    d = int(conf["d_out"])
    if d > d_in:
        if "d_out" in explicit:
            raise UsageError(f"d_out={d} exceeds input dimension {d_in}")
        d = d_in
    return d


def _write_validated_descriptors(path, X, kind):
    dio.write_descriptors(path, X, kind)
    Y, k = dio.read_descriptors(path)
    if Y.shape != X.shape or k != kind:
        raise KDescError(f"{path}: validation after write failed")


# -- commands --------------------------------------------------------------

def cmd_extract(conf, explicit):
    cfg = descriptor_config(conf)
    kind = _kind(conf)
    with stage("data-io"):
        ds = load_dataset(conf["input"], int(conf["patch_size"]))
    t0 = time.perf_counter()
    with stage("descriptor"):
        X = extract_batch(ds.patches, kind, cfg)
    dt = time.perf_counter() - t0
    with stage("data-io"):
        _write_validated_descriptors(conf["output"], X, kind)
    rate = len(X) / dt if dt > 0 else float("inf")
    log.info("extracted count=%d dim=%d wall=%.3fs rate=%.1f patches/s", X.shape[0], X.shape[1], dt, rate)


def cmd_fit(conf, explicit):
    cfg = descriptor_config(conf)
    with stage("data-io"):
        ds = load_dataset(conf["dataset"], int(conf["patch_size"]))
        if conf.get("descriptors"):
            X, _ = dio.read_descriptors(conf["descriptors"])
            if len(X) != len(ds):
                raise KDescError(f"{len(X)} descriptors but {len(ds)} labelled patches")
    if not conf.get("descriptors"):
        with stage("descriptor"):
            X = extract_batch(ds.patches, _kind(conf), cfg)
    d = _d_out(conf, explicit, X.shape[1])
    seed = int(conf["seed"])
    with stage("postprocess"):
        if conf["post"] == "pca":
            model = fit_pca(X, d)
        elif conf["post"] == "lw":
            model = fit_lw(X, ds.labels, d, seed=seed)
        else:
            raise UsageError("post must be 'pca' or 'lw'")
        save_model(model, conf["output"])
        check = load_model(conf["output"])
        if (check.d_in, check.d_out) != (model.d_in, model.d_out):
            raise KDescError("model validation after write failed")
    log.info("fitted %s model d_in=%d d_out=%d", model.variant.name, model.d_in, model.d_out)


def cmd_apply(conf, explicit):
    with stage("postprocess"):
        model = load_model(conf["model"])
    with stage("data-io"):
        X, _ = dio.read_descriptors(conf["descriptors"])
    with stage("postprocess"):
        Y = apply_batch(model, X) if len(X) else np.zeros((0, model.d_out))
    with stage("data-io"):
        _write_validated_descriptors(conf["output"], Y, Kind.POSTPROCESSED)
    log.info("applied %s model to %d descriptors -> dim %d", model.variant.name, len(Y), model.d_out)


def _pipelines(conf) -> list[Pipeline]:
    spec = str(conf["pipelines"])
    d_out = int(conf["d_out"])
    if spec == "all":
        return [Pipeline(p.descriptor, p.post, d_out) for p in TABLE_PIPELINES]
    out = []
    for item in spec.split(","):
        kind, _, post = item.strip().partition("+")
        if kind not in DESCRIPTOR_KINDS:
            raise UsageError(f"pipeline {item!r}: expected DESCRIPTOR[+none|pca|lw]")
        out.append(Pipeline(DESCRIPTOR_KINDS[kind], post or "none", d_out))
    return out


def _write_reports(conf, reports: list[ProtocolReport], csv_text: str, chash: str):
    for r in reports:
        r.meta["run_config_hash"] = chash
    if conf.get("csv"):
        Path(conf["csv"]).write_text(csv_text)
    if conf.get("report"):
        Path(conf["report"]).write_text("\n".join(r.to_text() for r in reports))
    print(csv_text, end="")


def cmd_eval_pt(conf, explicit, chash):
    cfg = descriptor_config(conf)
    sets = {}
    with stage("data-io"):
        for d in conf["sets"]:
            ds = load_dataset(d, int(conf["patch_size"]))
            sets[Path(d).name] = ds
    if len(sets) < 2:
        raise UsageError("eval-pt needs at least two sets")
    with stage("eval"):
        reports = run_pt_sixway(sets, _pipelines(conf), cfg, int(conf["seed"]), int(conf["n_pairs"]))
    _write_reports(conf, reports, table_csv(reports), chash)


def hp_table_csv(reports: list[ProtocolReport]) -> str:
    lines = ["method,D,verification,matching,retrieval"]
    for r in reports:
        s = r.splits
        lines.append(f"{r.name},{r.meta['dim']},{100 * s['verification']:.2f},"
                     f"{100 * s['matching']:.2f},{100 * s['retrieval']:.2f}")
    return "\n".join(lines) + "\n"


def cmd_eval_hp(conf, explicit, chash):
    cfg = descriptor_config(conf)
    with stage("data-io"):
        ds = load_dataset(conf["dataset"], int(conf["patch_size"]))
        train = load_dataset(conf["train"], int(conf["patch_size"])) if conf.get("train") else None
    cache = DescriptorCache(cfg)
    reports = []
    with stage("eval"):
        for pipe in _pipelines(conf):
            reports.append(run_hp_tasks(ds, pipe, train, cfg, int(conf["seed"]), int(conf["n_pairs"]),
                                        int(conf["n_distractors"]), cache))
    _write_reports(conf, reports, hp_table_csv(reports), chash)


def cmd_patchmap(conf, explicit):
    cfg = descriptor_config(conf)
    try:
        p = tuple(int(v) for v in str(conf["p"]).split(","))
        assert len(p) == 2
    except (ValueError, AssertionError):
        raise UsageError("--p expects X,Y") from None
    dtheta = float(conf["dtheta"])
    model = None
    if conf.get("model"):
        with stage("postprocess"):
            model = load_model(conf["model"])
    modes = [m.strip() for m in str(conf["modes"]).split(",") if m.strip()]
    for m in modes:
        if m not in RENDER_MODES:
            raise UsageError(f"unknown render mode {m!r}; choose from {RENDER_MODES}")
    out_dir = Path(conf.get("out_dir") or ".")
    with stage("patchmap"):
        spec = PatchMapSpec.from_delta(conf["variant"], int(conf["width"]), p, dtheta,
                                       float(conf["p_theta"]), model)
        grid = compute_patch_map(spec, cfg)
        out_dir.mkdir(parents=True, exist_ok=True)
        suffix = Path(conf["model"]).stem if model is not None else ""
        for m in modes:
            ext = "csv" if m == "csv" else "pgm"
            tag = "_".join(filter(None, [suffix, "contours" if m == "isocontour-pgm" else ""]))
            path = render_map(grid, out_dir / map_filename(conf["variant"], p, dtheta, tag, ext), m)
            print(path)


def cmd_synth(conf, explicit):
    nuisance = dio.Nuisance(float(conf["rotation"]), float(conf["translation"]), float(conf["noise"]))
    layout = conf["layout"]
    width = int(conf["width"])
    if layout == "pt":
        if "width" in explicit and width != dio.PT_PATCH:
            raise UsageError(f"Phototourism layout needs width {dio.PT_PATCH}")
        width = dio.PT_PATCH
    elif layout != "hp":
        raise UsageError("layout must be 'pt' or 'hp'")
    seed = int(conf["seed"])
    with stage("data-io"):
        ds = dio.generate_synthetic_set(seed, int(conf["classes"]), int(conf["views"]), width, nuisance)
        if layout == "pt":
            ds.pairs = dio.make_eval_pairs(ds.labels, int(conf["n_pairs"]), seed)
            dio.write_pt_set(ds, conf["output"])
            dio.load_pt_set(conf["output"])
        else:
            dio.write_hp_set(ds, conf["output"])
            dio.load_hp_set(conf["output"], width)
    log.info("wrote %d patches (%d classes) to %s", len(ds), int(conf["classes"]), conf["output"])


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, help="global u64 seed (default 0)")
    common.add_argument("--kernel", action="append", metavar="NAME=KAPPA,N",
                        help=f"override a kernel; NAME in {', '.join(KERNEL_NAMES)}")
    common.add_argument("--patch-size", type=int, dest="patch_size", help="patch size for stack images (65)")

    parser = argparse.ArgumentParser(prog="kdesc", description="Kernelized local patch descriptors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common], help="extract descriptors from a dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--descriptor", choices=sorted(DESCRIPTOR_KINDS))
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("fit", parents=[common], help="fit PCA or learned whitening")
    p.add_argument("--dataset", required=True, help="labelled dataset (labels, and descriptors if none given)")
    p.add_argument("--descriptors", help="KPDS file parallel to the dataset")
    p.add_argument("--descriptor", choices=sorted(DESCRIPTOR_KINDS))
    p.add_argument("--post", choices=("pca", "lw"))
    p.add_argument("--d-out", type=int, dest="d_out")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("apply", parents=[common], help="apply a fitted model to descriptors")
    p.add_argument("--model", required=True)
    p.add_argument("--descriptors", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_apply)

    for name, func, helptext in (("eval-pt", cmd_eval_pt, "train/test FPR95 protocol over PT-layout sets"),
                                 ("eval-hp", cmd_eval_hp, "verification/matching/retrieval mAP")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        if name == "eval-pt":
            p.add_argument("--sets", nargs="+", required=True)
        else:
            p.add_argument("--dataset", required=True)
            p.add_argument("--train", help="dataset to fit post-processing on")
            p.add_argument("--n-distractors", type=int, dest="n_distractors")
        p.add_argument("--pipelines", help="'all' or comma list like polar+pca,combined+lw")
        p.add_argument("--d-out", type=int, dest="d_out")
        p.add_argument("--n-pairs", type=int, dest="n_pairs")
        p.add_argument("--csv")
        p.add_argument("--report")
        p.set_defaults(func=func)

    p = sub.add_parser("patchmap", parents=[common], help="render a patch map")
    p.add_argument("--variant", choices=("phirhothetarel", "phirhotheta", "xytheta", "xythetarel", "combined"))
    p.add_argument("--p", help="pixel X,Y (1-based)")
    p.add_argument("--dtheta", type=float)
    p.add_argument("--p-theta", type=float, dest="p_theta")
    p.add_argument("--width", type=int)
    p.add_argument("--model", help="optional KPWM transform")
    p.add_argument("--modes", help=f"comma list of {', '.join(RENDER_MODES)}")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_patchmap)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labelled dataset")
    p.add_argument("--output", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--rotation", type=float, help="rotation std (radians)")
    p.add_argument("--translation", type=float, help="translation std (pixels)")
    p.add_argument("--noise", type=float, help="pixel noise std")
    p.add_argument("--layout", choices=("pt", "hp"))
    p.add_argument("--n-pairs", type=int, dest="n_pairs")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        conf, explicit = resolve(args)
        chash = print_config(conf)
        if args.command in ("eval-pt", "eval-hp"):
            args.func(conf, explicit, chash)
        else:
            args.func(conf, explicit)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"kdesc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (KDescError, ValueError, OSError) as exc:
        print(f"kdesc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
