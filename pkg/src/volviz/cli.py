"""Command-line pipeline: generate, train, evaluate, explain, aggregate, compare, export-slices.

Exit status is 0 on success, 1 on a usage error and 2 on a data error.
Every command writes ``<command>.config.json`` (the resolved settings) next
to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .aggregation import (
    distance_matrix,
    format_distance_table,
    format_region_table,
    read_atlas,
    region_fractions,
    top_k_regions,
)
from .errors import DataError, VolvizError
from .io import Volume, atomic_write_bytes, read_manifest, read_volume, write_json, write_volume
from .model import ModelConfig, build_model, load_weights, save_weights
from .phantom import PhantomConfig, generate_dataset
from .saliency import Heatmap, area_occlusion, average_heatmaps, explain
from .training import (
    FoldSplit,
    NormStats,
    TrainConfig,
    evaluate,
    load_inputs,
    normalize,
    split_subjects,
    train,
)


OUT_ENV = "VOLVIZ_OUT"
CLI_METHODS = {
    "sensitivity": "sensitivity",
    "guided": "guided_backprop",
    "occlusion": "occlusion",
    "area-occlusion": "area_occlusion",
}
CLASS_NAMES = {0: "NC", 1: "AD"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers --------------------------------------------------------------------


def default_out(sub: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "volviz_out")) / sub


def parse_sets(pairs: Sequence[str]) -> dict:
    """``key=value`` pairs; values are parsed as JSON when possible."""
    out = {}
    for pair in pairs or ():
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing config file {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: unparseable config: {exc}") from None


def manifest_path(data: str) -> Path:
    p = Path(data)
    return p / "manifest.json" if p.is_dir() else p


def echo_config(out_dir: Path, command: str, resolved: dict) -> None:
    write_json(out_dir / f"{command}.config.json", {"command": command, "version": __version__, **resolved})


def write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def read_stats(run: Path) -> NormStats:
    return NormStats(read_volume(run / "norm_mean.vol").data.astype(np.float64),
                     read_volume(run / "norm_std.vol").data.astype(np.float64))


def read_run(run: Path) -> dict:
    p = run / "train.config.json"
    if not p.exists():
        raise DataError(f"{run} is not a training run directory (missing {p.name})")
    return json.loads(p.read_text())


def read_heatmap(path) -> tuple[Heatmap, dict]:
    vol = read_volume(path)
    if vol.kind != "heatmap":
        raise DataError(f"{path}: expected a heatmap volume, got kind {vol.kind!r}")
    meta = vol.meta
    try:
        hm = Heatmap(vol.data.astype(np.float64), meta["method"], int(meta["target_class"]),
                     meta.get("normalization", "raw"), meta.get("params", {}))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: heatmap header meta is incomplete: {exc}") from None
    return hm, meta


def heatmap_volume(hm: Heatmap, **extra) -> Volume:
    meta = {"method": hm.method, "target_class": hm.target_class, "normalization": hm.normalization,
            "params": hm.params, **extra}
    return Volume(hm.values.astype(np.float32), "heatmap", meta)


# -- generate -------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_config_file(args.config)
    cfg.update(parse_sets(args.set))
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        config = PhantomConfig.from_dict(cfg)
        config.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"generate: bad phantom config: {exc}") from None
    out = Path(args.out) if args.out else default_out("data")
    manifest = generate_dataset(config, out)
    echo_config(out, "generate", {"phantom": config.to_dict(), "out": str(out)})
    print(f"wrote {len(manifest.samples)} samples to {out}")
    return 0


# -- train ----------------------------------------------------------------------


def _sections(args, names) -> dict:
    cfg = load_config_file(args.config)
    sections = {n: dict(cfg.get(n, {})) for n in names}
    unknown = set(cfg) - set(names)
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}; expected {list(names)}")
    for key, value in parse_sets(args.set).items():
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise UsageError(f"--set key {key!r} must look like <{'|'.join(names)}>.<name>")
        sections[section][name] = value
    return sections


def cmd_train(args) -> int:
    sections = _sections(args, ("model", "train", "split"))
    manifest = read_manifest(manifest_path(args.data))
    if args.seed is not None:
        for s in sections.values():
            s["seed"] = args.seed
    split_cfg = {"k": 5, "fold": 0, "seed": 0, "n_test_per_class": 0, **sections["split"]}
    model_cfg = dict(sections["model"])
    model_cfg.setdefault("input_shape", manifest.config.get("shape", list(ModelConfig().input_shape)))
    try:
        mconfig = ModelConfig.from_dict(model_cfg)
        mconfig.validate()
        tconfig = TrainConfig.from_dict(sections["train"])
        fold = split_cfg.pop("fold")
        fold = None if fold is None else int(fold)
        unknown = set(split_cfg) - {"k", "seed", "n_test_per_class"}
        if unknown:
            raise ValueError(f"unknown split keys {sorted(unknown)}")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train: bad config: {exc}") from None

    split = split_subjects(manifest, int(split_cfg["k"]), int(split_cfg["seed"]),
                           int(split_cfg["n_test_per_class"]))
    out = Path(args.out) if args.out else default_out("run")
    model = build_model(mconfig)
    result = train(model, manifest, split, fold, tconfig)

    save_weights(model, out / "weights.vsw")
    write_volume(Volume(result.stats.mean.astype(np.float32), "image", {"role": "normalization mean"}),
                 out / "norm_mean.vol")
    write_volume(Volume(result.stats.std.astype(np.float32), "image", {"role": "normalization std"}),
                 out / "norm_std.vol")
    write_json(out / "split.json", {**split.to_dict(), "test_fold": fold})
    write_json(out / "history.json", result.history)
    echo_config(out, "train", {"data": str(manifest.root.resolve()), "model": mconfig.to_dict(),
                               "train": tconfig.to_dict(), "split": {**split_cfg, "fold": fold}})
    last = result.history[-1]
    print(f"trained {tconfig.epochs} epochs on {len(result.train_ids)} samples; "
          f"final loss {last['mean_loss']:.4f}; weights in {out / 'weights.vsw'}")
    return 0


# -- shared run loading ---------------------------------------------------------------


def _load_run(args):
    run = Path(args.run)
    resolved = read_run(run)
    manifest = read_manifest(manifest_path(args.data) if args.data else Path(resolved["data"]) / "manifest.json")
    model = load_weights(run / "weights.vsw")
    stats = read_stats(run)
    split = FoldSplit.from_dict(json.loads((run / "split.json").read_text()))
    fold = resolved["split"]["fold"]
    return run, manifest, model, stats, split, fold


def _subset_ids(manifest, split, fold, subset) -> list[str]:
    if subset == "all":
        return [s.id for s in manifest.samples]
    if subset == "train":
        return split.train_ids(manifest, fold)
    if split.fixed_test or fold is None:
        return list(split.fixed_test)
    return split.fold_ids(manifest, fold)


# -- evaluate ------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    run, manifest, model, stats, split, fold = _load_run(args)
    ids = _subset_ids(manifest, split, fold, args.subset)
    if not ids:
        raise DataError(f"subset {args.subset!r} has no samples")
    metrics = evaluate(model, manifest, ids, stats)
    out = Path(args.out) if args.out else run
    write_json(out / "metrics.json", {"subset": args.subset, **metrics})
    echo_config(out, "evaluate", {"run": str(run), "subset": args.subset})
    auc = metrics["roc_auc"]
    print(f"accuracy {metrics['accuracy']:.3f}  roc_auc {'n/a' if auc is None else f'{auc:.3f}'}  "
          f"n={metrics['n_samples']}")
    return 0


# -- explain -----------------------------------------------------------------------


def cmd_explain(args) -> int:
    method = CLI_METHODS[args.method]
    run, manifest, model, stats, split, fold = _load_run(args)
    if args.sample:
        ids = list(args.sample)
        for sid in ids:
            manifest.by_id(sid)
    else:
        ids = _subset_ids(manifest, split, fold, args.subset)
    if args.cls is not None:
        ids = [i for i in ids if manifest.by_id(i).label == args.cls]
    if not ids:
        raise DataError("no samples selected")

    fill = args.fill
    if args.fill_space == "raw":
        fill = normalize(np.full(model.config.input_shape, args.fill), stats).astype(model.dtype)
    params = {}
    if method in ("sensitivity", "guided_backprop"):
        params = {"wrt": args.wrt}
    elif method == "occlusion":
        shape = model.config.input_shape
        if args.patch > min(shape):
            raise UsageError(f"explain: --patch {args.patch} exceeds the volume shape {list(shape)}")
        params = {"patch_size": args.patch, "stride": args.stride, "fill_value": fill,
                  "batch_size": args.batch_size, "n_threads": args.threads}
    elif method == "area_occlusion":
        params = {"fill_value": fill, "batch_size": args.batch_size, "n_threads": args.threads}
    atlas = read_atlas(manifest.resolve(manifest.atlas)) if method == "area_occlusion" else None

    vols, labels = load_inputs(manifest, ids)
    out = Path(args.out) if args.out else default_out("heatmaps")
    per_class: dict[int, list[Heatmap]] = {}
    written = []
    for sid, vol, label in zip(ids, vols, labels):
        target = int(label) if args.target == "label" else int(args.target)
        x = normalize(vol, stats).astype(model.dtype)
        if method == "area_occlusion":
            res = area_occlusion(model, x, atlas, target, **params)
            hm = res.heatmap
            write_json(out / args.method / f"{sid}.regions.json", res.to_dict(atlas.names))
        else:
            hm = explain(model, x, method, target, **params)
        path = out / args.method / f"{sid}.vol"
        write_volume(heatmap_volume(hm, sample=sid, sample_class=int(label)), path)
        written.append(path)
        per_class.setdefault(int(label), []).append(hm)

    for c, maps in sorted(per_class.items()):
        avg = average_heatmaps(maps, normalize=not args.raw_average)
        path = out / args.method / f"average_class{c}.vol"
        write_volume(heatmap_volume(avg, sample_class=c, samples=len(maps)), path)
        written.append(path)
    echo_config(out / args.method, "explain",
                {"run": str(run), "method": method, "samples": ids, "target": args.target,
                 "params": {k: v for k, v in params.items() if k not in ("n_threads", "fill_value")},
                 "fill": {"value": args.fill, "space": args.fill_space},
                 "average_normalization": "raw" if args.raw_average else "unit_l1"})
    print(f"wrote {len(written)} heatmaps to {out / args.method}")
    return 0


# -- aggregate / compare ------------------------------------------------------------------


def _heatmap_key(meta: dict, path) -> tuple[str, int]:
    if "sample_class" not in meta:
        raise DataError(f"{path}: heatmap meta lacks sample_class")
    return meta["method"], int(meta["sample_class"])


def cmd_aggregate(args) -> int:
    atlas = read_atlas(args.atlas)
    reports = {}
    for p in args.heatmap:
        hm, meta = read_heatmap(p)
        key = _heatmap_key(meta, p)
        if key in reports:
            raise UsageError(f"aggregate: two heatmaps for method {key[0]} and class {key[1]}")
        reports[key] = region_fractions(hm, atlas)
    out = Path(args.out) if args.out else default_out("reports")
    table = format_region_table(reports, args.k, CLASS_NAMES)
    doc = {"k": args.k, "reports": [
        {"method": m, "class": c, "top": [vars(e) for e in top_k_regions(r, args.k)], **r.to_dict()}
        for (m, c), r in reports.items()]}
    write_json(out / "regions.json", doc)
    write_text(out / "regions.txt", table)
    echo_config(out, "aggregate", {"atlas": str(args.atlas), "heatmaps": [str(p) for p in args.heatmap],
                                   "k": args.k})
    print(table, end="")
    return 0


def cmd_compare(args) -> int:
    groups: dict[int, dict[str, Heatmap]] = {}
    for p in args.heatmap:
        hm, meta = read_heatmap(p)
        method, c = _heatmap_key(meta, p)
        if method in groups.setdefault(c, {}):
            raise UsageError(f"compare: two heatmaps for method {method} and class {c}")
        groups[c][method] = hm
    method_sets = {tuple(sorted(g)) for g in groups.values()}
    if len(method_sets) != 1:
        raise DataError(f"classes cover different method sets: {sorted(method_sets)}")
    order = [m for m in CLI_METHODS.values() if m in next(iter(groups.values()))]
    matrices = {c: distance_matrix({m: g[m] for m in order}) for c, g in groups.items()}
    out = Path(args.out) if args.out else default_out("reports")
    table = format_distance_table(matrices, args.scale, CLASS_NAMES)
    write_json(out / "distances.json", {"scale": args.scale,
                                        "classes": {str(c): m.to_dict() for c, m in sorted(matrices.items())}})
    write_text(out / "distances.txt", table)
    echo_config(out, "compare", {"heatmaps": [str(p) for p in args.heatmap], "scale": args.scale})
    print(table, end="")
    return 0


# -- export-slices --------------------------------------------------------------------


def pgm_bytes(image: np.ndarray) -> bytes:
    """Binary 8-bit PGM (P5); rows are the first array axis."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def to_uint8(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.zeros(values.shape, np.uint8)
    scaled = (values.astype(np.float64) - lo) / (hi - lo)
    return np.clip(np.rint(scaled * 255), 0, 255).astype(np.uint8)


def cmd_export_slices(args) -> int:
    hm, meta = read_heatmap(args.heatmap)
    underlay = read_volume(args.underlay).data
    if underlay.shape != hm.shape:
        raise DataError(f"underlay shape {underlay.shape} differs from heatmap shape {hm.shape}")
    n = hm.shape[args.axis]
    bad = [i for i in args.index if not 0 <= i < n]
    if bad:
        raise UsageError(f"export-slices: slice indices {bad} outside [0, {n - 1}] along axis {args.axis}")
    vmax = float(np.abs(hm.values).max())
    ulo, uhi = float(underlay.min()), float(underlay.max())
    out = Path(args.out) if args.out else default_out("slices")
    stem = Path(args.heatmap).name.removesuffix(".vol")
    files = []
    for i in args.index:
        u = np.take(underlay, i, axis=args.axis)
        h = np.abs(np.take(hm.values, i, axis=args.axis))
        base = f"{stem}_axis{args.axis}_{i:03d}"
        atomic_write_bytes(out / f"{base}_underlay.pgm", pgm_bytes(to_uint8(u, ulo, uhi)))
        atomic_write_bytes(out / f"{base}_overlay.pgm", pgm_bytes(to_uint8(h, 0.0, vmax)))
        files += [f"{base}_underlay.pgm", f"{base}_overlay.pgm"]
    write_json(out / f"{stem}_slices.json", {
        "axis": args.axis, "indices": list(args.index), "files": files,
        "overlay_scale": {"min": 0.0, "max_abs": vmax},
        "underlay_scale": {"min": ulo, "max": uhi},
        "method": meta.get("method"), "sample_class": meta.get("sample_class"),
    })
    echo_config(out, "export-slices", {"heatmap": str(args.heatmap), "underlay": str(args.underlay),
                                       "axis": args.axis, "indices": list(args.index)})
    print(f"wrote {len(files)} images to {out}")
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, help="override every seed in the resolved config")
    common.add_argument("--threads", type=int, default=1, help="worker threads for occlusion (default 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = Parser(prog="volviz", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"volviz {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True
    out_help = f"output directory (default ${OUT_ENV}/<name> or ./volviz_out/<name>)"

    p = sub.add_parser("generate", parents=[common], help="write a synthetic phantom dataset")
    p.add_argument("--config", help="phantom config JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a phantom config key")
    p.add_argument("--out", help=out_help)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train the classifier on a dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--config", help="JSON with optional model, train and split sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config key, e.g. train.epochs=5 or split.fold=1")
    p.add_argument("--out", help=out_help)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="accuracy and ROC AUC on a split")
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--data", help="dataset (default: the one the run was trained on)")
    p.add_argument("--subset", choices=("test", "train", "all"), default="test")
    p.add_argument("--out", help="output directory (default: the run directory)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", parents=[common], help="relevance heatmaps for samples")
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--data", help="dataset (default: the one the run was trained on)")
    p.add_argument("--method", required=True, choices=list(CLI_METHODS))
    p.add_argument("--sample", action="append", help="sample id (repeatable); default: the whole subset")
    p.add_argument("--subset", choices=("test", "train", "all"), default="test")
    p.add_argument("--class", dest="cls", type=int, choices=(0, 1), help="keep only samples of this class")
    p.add_argument("--target", default="label",
                   help="target class index, or 'label' for each sample's own class (default)")
    p.add_argument("--patch", type=int, default=40, help="occlusion patch edge (default 40)")
    p.add_argument("--stride", type=int, help="occlusion stride (default patch/2)")
    p.add_argument("--fill", type=float, default=0.0, help="occlusion fill value (default 0)")
    p.add_argument("--fill-space", choices=("normalized", "raw"), default="normalized",
                   help="apply --fill to the normalized network input (default) or to raw intensities")
    p.add_argument("--wrt", choices=("probability", "logit"), default="probability",
                   help="differentiate the softmax probability (default) or the logit")
    p.add_argument("--batch-size", type=int, default=1, help="occluded volumes per forward pass")
    p.add_argument("--raw-average", action="store_true", help="average without unit-L1 rescaling")
    p.add_argument("--out", help=out_help)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("aggregate", parents=[common], help="top-k atlas regions per method and class")
    p.add_argument("--heatmap", action="append", required=True, help="(average) heatmap file, repeatable")
    p.add_argument("--atlas", required=True, help="atlas volume")
    p.add_argument("--k", type=int, default=4, help="regions per cell (default 4)")
    p.add_argument("--out", help=out_help)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("compare", parents=[common], help="distances between average heatmaps")
    p.add_argument("--heatmap", action="append", required=True, help="average heatmap file, repeatable")
    p.add_argument("--scale", type=float, default=1e-4, help="table units (default 1e-4)")
    p.add_argument("--out", help=out_help)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export-slices", parents=[common], help="PGM slices of an underlay and a heatmap")
    p.add_argument("--heatmap", required=True)
    p.add_argument("--underlay", required=True, help="volume drawn beneath the heatmap")
    p.add_argument("--axis", type=int, choices=(0, 1, 2), default=1, help="slicing axis (default 1)")
    p.add_argument("--index", type=int, action="append", required=True, help="slice index, repeatable")
    p.add_argument("--out", help=out_help)
    p.set_defaults(func=cmd_export_slices)
    return parser


def _check_args(args) -> None:
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if getattr(args, "k", 1) < 1:
        raise UsageError("--k must be >= 1")
    if getattr(args, "batch_size", 1) < 1:
        raise UsageError("--batch-size must be >= 1")
    target = getattr(args, "target", "label")
    if target != "label" and target not in ("0", "1"):
        raise UsageError(f"--target must be 0, 1 or 'label', got {target!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _check_args(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, VolvizError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
