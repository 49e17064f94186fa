"""Command-line front end: ``urbdiff <subcommand> [--config run.json] [flags]``.

Settings resolve in three layers: built-in defaults, then the JSON run
config, then command-line flags. The resolved values are written to
``run_record.json`` in the output directory together with the seed and
library versions. Machine-readable results go to stdout as JSON; logs go to
stderr. Exit status: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import datetime as dt
import json
import logging
import os
import platform
import sys
import warnings
from importlib import metadata
from pathlib import Path

import numpy as np

from urbdiff.errors import ConfigError, UrbdiffError

log = logging.getLogger("urbdiff")

COMMANDS = ("acquire", "coreg", "segment", "classify", "train", "infer", "eval", "area", "manifest")

DEFAULTS = {
    "seed": 0,
    "siamese": {"in_bands": 13, "encoder_channels": [16, 32, 64, 128], "patch_size": 32,
                "diff_mode": "absolute"},
    "train": {"epochs": 10, "batch": 16, "lr": 0.01, "momentum": 0.9, "weight_decay": 0.0,
              "augment": False, "patch_count": 1024, "balance_fraction": 0.5},
    "dataset": {"normalization": "zscore", "train_split": "train", "eval_split": "test",
                "label_change_value": None},
    "slic": {"n_segments": 750000, "compactness": 0.1, "max_iters": 10,
             "enforce_connectivity": True, "red_band": "B4", "nir_band": "B8"},
    "forest": {"n_trees": 100, "max_depth": 12, "min_leaf": 2, "features_per_split": None,
               "bootstrap": True, "split_fraction": 0.7},
    "coreg": {"pyramid_levels": 4, "window_radius": 8, "iterations_per_level": 5,
              "rank_radius": 2, "rank_smoothing": 1.0, "eps_per_pixel": 1e-4, "warp": True},
    "acquire": {"platform": "Sentinel-2", "product_type": "S2MSI1C", "cloud_min": 0.0,
                "cloud_max": 20.0, "start": None, "end": None},
    "paths": {"out": None, "manifest": None, "checkpoint": None, "a": None, "b": None,
              "ref": None, "mov": None, "input": None, "segments": None, "samples": None,
              "pred": None, "truth": None, "map": None, "aoi": None, "fixture": None,
              "root": None},
    "plots": True,
}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration


def _check_value(where: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise UsageError(f"config key {where}: expected {type(default).__name__}, got {value!r}")
    return value


def merge_config(base: dict, override: dict, prefix: str = "") -> dict:
    """Overlay ``override`` onto ``base``; unknown keys are a usage error."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = prefix + key
        if key not in base:
            raise UsageError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where} must be an object")
            out[key] = merge_config(base[key], value, where + ".")
        else:
            out[key] = _check_value(where, base[key], value)
    return out


def load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    return merge_config(DEFAULTS, doc)


def resolve_config(ns: argparse.Namespace) -> dict:
    cfg = load_config(ns.config) if ns.config else copy.deepcopy(DEFAULTS)
    for dest, value in vars(ns).items():
        if "." not in dest or value is None:
            continue
        section, key = dest.split(".", 1)
        cfg[section][key] = value
    if ns.seed is not None:
        cfg["seed"] = ns.seed
    if ns.no_plots:
        cfg["plots"] = False
    return cfg


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        n = flag
    elif os.environ.get("URBDIFF_THREADS"):
        try:
            n = int(os.environ["URBDIFF_THREADS"])
        except ValueError:
            raise UsageError(f"URBDIFF_THREADS must be an integer, got {os.environ['URBDIFF_THREADS']!r}") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _require(cfg: dict, key: str, flag: str | None = None):
    value = cfg["paths"][key]
    if value in (None, [], ""):
        raise UsageError(f"missing required --{flag or key}")
    return value


def _versions() -> dict:
    import matplotlib
    import scipy

    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"urbdiff": pkg, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "matplotlib": matplotlib.__version__}


def write_run_record(out_dir: Path, command: str, argv, cfg: dict, threads: int, outputs) -> Path:
    record = {
        "command": command,
        "argv": list(argv),
        "seed": cfg["seed"],
        "threads": threads,
        "config": cfg,
        "versions": _versions(),
        "outputs": sorted(str(p) for p in outputs),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_record.json"
    path.write_text(json.dumps(record, indent=2, default=str) + "\n")
    return path


# --------------------------------------------------------------------------
# helpers


def _as_list(v):
    return v if isinstance(v, list) else [v]


def load_stack(paths):
    """One raster, or several single-band files merged in the given order."""
    from urbdiff.raster import merge_bands, read_raster

    paths = [Path(p) for p in _as_list(paths)]
    if len(paths) == 1:
        p = paths[0]
        if p.is_dir():
            p = p / "change"
        return read_raster(p, band_id=p.stem if p.suffix.lower() in (".tif", ".tiff") else None)
    return merge_bands([read_raster(p, band_id=p.stem) for p in paths])


def _label_map(path, change_value=None, detect=False) -> np.ndarray:
    from urbdiff.dataset import binarize_label, detect_change_value

    raw = np.asarray(load_stack(path).samples[0])
    if change_value is None and detect:
        change_value = detect_change_value(raw)
    return binarize_label(raw, change_value)


def _out_dir(cfg, default: str | None = None) -> Path | None:
    out = cfg["paths"]["out"] or default
    return Path(out) if out else None


def _band_role(v):
    # "3" on the command line means band index 3; anything else is a band id
    return int(v) if isinstance(v, str) and v.isdigit() else v


def _siamese_config(cfg):
    from urbdiff.siamese import SiameseConfig

    return SiameseConfig(**cfg["siamese"])


def _coreg_config(cfg):
    from urbdiff.coreg import CoregConfig

    c = dict(cfg["coreg"])
    c.pop("warp")
    return CoregConfig(**c)


def _forest_config(cfg):
    from urbdiff.landcover import ForestConfig

    f = dict(cfg["forest"])
    f.pop("split_fraction")
    return ForestConfig(seed=cfg["seed"], **f)


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, default=str) + "\n")
    sys.stdout.flush()


# --------------------------------------------------------------------------
# subcommands; each returns (json document, output directory or None, outputs)


def cmd_acquire(cfg, threads):
    from urbdiff.acquire import AcquisitionQuery, FixtureFetcher, build_query, search
    from urbdiff.raster import read_geojson_aoi

    a = cfg["acquire"]
    if not a["start"] or not a["end"]:
        raise UsageError("missing required --start/--end")
    try:
        start, end = dt.date.fromisoformat(a["start"]), dt.date.fromisoformat(a["end"])
    except ValueError as e:
        raise UsageError(f"bad date: {e}") from None
    aoi = read_geojson_aoi(_require(cfg, "aoi"))
    q = AcquisitionQuery(aoi, start, end, a["platform"], a["product_type"], a["cloud_min"], a["cloud_max"])
    doc = {"query": build_query(q)}
    outputs = []
    if cfg["paths"]["fixture"]:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            found = search(q, FixtureFetcher(cfg["paths"]["fixture"]))
        doc["products"] = [r.as_dict() for r in found.records]
        doc["excluded_missing_cloud"] = found.flagged
        for w in caught:
            log.warning("%s", w.message)
    out = _out_dir(cfg)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "query.txt").write_text(doc["query"] + "\n")
        (out / "products.json").write_text(json.dumps(doc, indent=2) + "\n")
        outputs = [out / "query.txt", out / "products.json"]
    return doc, out, outputs


def cmd_coreg(cfg, threads):
    from urbdiff import plots
    from urbdiff.coreg import coregister, flow_to_raster
    from urbdiff.raster import write_internal

    ref = load_stack(_require(cfg, "ref"))
    mov = load_stack(_require(cfg, "mov"))
    out = _out_dir(cfg, "coreg_out")
    res = coregister(ref, mov, _coreg_config(cfg))
    # with warping off the flow is still estimated and reported, the scene passes through
    scene = res.warped if cfg["coreg"]["warp"] else mov
    outputs = [write_internal(scene, out / "warped"),
               write_internal(flow_to_raster(res.flow, ref.geo), out / "flow")]
    mag = res.flow.magnitude()
    doc = {"mean_flow_px": float(mag.mean()), "max_flow_px": float(mag.max()),
           "median_u": float(np.median(res.flow.u)), "median_v": float(np.median(res.flow.v)),
           "valid_fraction": float(res.valid.mean()), "warped": str(outputs[0]),
           "warp_applied": bool(cfg["coreg"]["warp"])}
    if cfg["plots"]:
        outputs.append(plots.flow_figure(res.flow, out / "flow.png"))
    return doc, out, outputs


def cmd_segment(cfg, threads):
    from urbdiff import plots
    from urbdiff.raster import write_internal
    from urbdiff.segment import SlicConfig, feature_names, slic, superpixel_features

    r = load_stack(_require(cfg, "input"))
    s = cfg["slic"]
    n = r.height * r.width
    k = s["n_segments"]
    if k > n:
        log.warning("n_segments %d exceeds the pixel count %d; clamped", k, n)
        k = n
    seg = slic(r, SlicConfig(k, s["compactness"], s["max_iters"], s["enforce_connectivity"]))
    out = _out_dir(cfg, "segment_out")
    outputs = [write_internal(seg.to_raster(r.geo), out / "segments")]
    feats = superpixel_features(r, seg, _band_role(s["red_band"]), _band_role(s["nir_band"]))
    csv_path = out / "features.csv"
    header = "segment_id," + ",".join(feature_names(r))
    rows = np.column_stack([np.arange(seg.count), feats])
    np.savetxt(csv_path, rows, delimiter=",", header=header, comments="",
               fmt=["%d"] + ["%.9g"] * feats.shape[1])
    outputs.append(csv_path)
    if cfg["plots"]:
        outputs.append(plots.segment_figure(np.asarray(r.samples), seg.labels, out / "segments.png"))
    doc = {"segments": seg.count, "requested": s["n_segments"], "used_k": k,
           "energy": seg.energy, "features": str(csv_path)}
    return doc, out, outputs


def cmd_classify(cfg, threads):
    from urbdiff import plots
    from urbdiff.landcover import (
        classify_segments, ingest_samples, landcover_raster, read_points, save_forest, train_forest,
    )
    from urbdiff.metrics import scores
    from urbdiff.raster import write_internal
    from urbdiff.segment import SegmentMap, relabel_dense, superpixel_features

    r = load_stack(_require(cfg, "input"))
    seg_r = load_stack(_require(cfg, "segments"))
    seg = SegmentMap(relabel_dense(np.asarray(seg_r.samples[0]).astype(np.int64)))
    feats = superpixel_features(r, seg, _band_role(cfg["slic"]["red_band"]),
                                _band_role(cfg["slic"]["nir_band"]))
    rows = ingest_samples(read_points(_require(cfg, "samples")), r, seg, feats)
    log.info("%d labeled segments from samples", len(rows.labels))
    fit = train_forest(rows, cfg["forest"]["split_fraction"], _forest_config(cfg), threads)
    seg_labels, pixels = classify_segments(fit.forest, feats, seg)
    out = _out_dir(cfg, "classify_out")
    out.mkdir(parents=True, exist_ok=True)
    outputs = [write_internal(landcover_raster(pixels, r.geo), out / "landcover")]
    save_forest(fit.forest, out / "forest.rfor")
    outputs.append(out / "forest.rfor")
    doc = {"segments": seg.count, "training_rows": int(len(fit.train_index)),
           "test_rows": int(len(fit.test_index)),
           "urban_segments": int((seg_labels == 0).sum()),
           "nonurban_segments": int((seg_labels == 1).sum()),
           "held_out": scores(fit.held_out).as_dict() if fit.held_out else None}
    if cfg["plots"]:
        outputs.append(plots.landcover_figure(pixels, out / "landcover.png"))
        if fit.held_out:
            outputs.append(plots.confusion_figure(fit.held_out, out / "confusion.png",
                                                  ("urban", "nonurban")))
    return doc, out, outputs


def cmd_train(cfg, threads):
    from urbdiff import plots
    from urbdiff.dataset import class_weights, load_manifest, sample_patches
    from urbdiff.siamese import Network, evaluate, save_checkpoint, train

    manifest = load_manifest(_require(cfg, "manifest"))
    manifest.normalization = cfg["dataset"]["normalization"]
    scfg = _siamese_config(cfg)
    t = cfg["train"]
    seed = cfg["seed"]
    ss = np.random.SeedSequence(seed).spawn(3)
    init_seed, sample_seed, train_seed = (int(s.generate_state(1)[0]) for s in ss)
    split = cfg["dataset"]["train_split"]
    patches = sample_patches(manifest, split, scfg.patch_size, t["patch_count"],
                             t["balance_fraction"], sample_seed)
    weights = class_weights(manifest, split)
    net = Network.initialize(scfg, init_seed)
    res = train(net, patches, t["epochs"], t["batch"], t["lr"], t["momentum"], weights,
                train_seed, t["weight_decay"], t["augment"])
    out = _out_dir(cfg, "train_out")
    ckpt = Path(cfg["paths"]["checkpoint"] or out / "model.scdc")
    save_checkpoint(res.net, ckpt)
    outputs = [ckpt]
    doc = {"checkpoint": str(ckpt), "class_weights": list(weights),
           "trace": [{"epoch": s.epoch, "loss": s.loss, "accuracy": s.accuracy} for s in res.trace]}
    eval_regions = manifest.regions(cfg["dataset"]["eval_split"])
    if eval_regions:
        held = sample_patches(eval_regions, None, scfg.patch_size, max(1, t["patch_count"] // 4),
                              0.0, sample_seed + 1)
        loss, acc = evaluate(res.net, held, t["batch"], weights)
        doc["eval"] = {"split": cfg["dataset"]["eval_split"], "loss": loss, "accuracy": acc}
    if cfg["plots"]:
        outputs.append(plots.training_curves(res.trace, out / "training.png"))
    trace_path = out / "trace.json"
    out.mkdir(parents=True, exist_ok=True)
    trace_path.write_text(json.dumps(doc, indent=2) + "\n")
    outputs.append(trace_path)
    return doc, out, outputs


def cmd_infer(cfg, threads):
    from urbdiff import plots
    from urbdiff.metrics import changed_area
    from urbdiff.raster import normalize, write_internal
    from urbdiff.siamese import load_checkpoint, predict_scene

    net = load_checkpoint(_require(cfg, "checkpoint"))
    a = load_stack(_require(cfg, "a"))
    b = load_stack(_require(cfg, "b"))
    norm = cfg["dataset"]["normalization"]
    if norm:
        a, b = normalize(a, norm), normalize(b, norm)
    cm = predict_scene(net, a, b, threads=threads)
    out = _out_dir(cfg, "infer_out")
    labels, prob = cm.to_rasters(a.geo)
    outputs = [write_internal(labels, out / "change"), write_internal(prob, out / "probability")]
    area = changed_area(cm, a.geo)
    doc = {"change_map": str(outputs[0]), "probability": str(outputs[1]), "area": area.as_dict()}
    (out / "summary.json").write_text(json.dumps(doc, indent=2) + "\n")
    outputs.append(out / "summary.json")
    if cfg["plots"]:
        outputs.append(plots.change_map_figure(cm.labels, cm.probabilities, out / "change.png"))
    return doc, out, outputs


def cmd_eval(cfg, threads):
    from urbdiff import plots
    from urbdiff.metrics import changed_area, confusion, report
    from urbdiff.raster import read_raster

    pred_path = _require(cfg, "pred")
    pred = _label_map(pred_path)
    truth = _label_map(_require(cfg, "truth"), cfg["dataset"]["label_change_value"], detect=True)
    c = confusion(pred, truth)
    p = Path(_as_list(pred_path)[0])
    geo = read_raster(p / "change" if p.is_dir() else p).geo
    doc = report(c, changed_area(pred, geo))
    out = _out_dir(cfg)
    outputs = []
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(doc, indent=2) + "\n")
        outputs.append(out / "report.json")
        if cfg["plots"]:
            outputs.append(plots.confusion_figure(c, out / "confusion.png"))
    return doc, out, outputs


def cmd_area(cfg, threads):
    from urbdiff.metrics import changed_area

    m = load_stack(_require(cfg, "map"))
    labels = np.asarray(m.samples[0]).astype(np.int64)
    doc = changed_area(labels, m.geo).as_dict()
    out = _out_dir(cfg)
    outputs = []
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "area.json").write_text(json.dumps(doc, indent=2) + "\n")
        outputs.append(out / "area.json")
    return doc, out, outputs


def cmd_manifest(cfg, threads):
    from urbdiff.dataset import scan_oscd_tree

    root = Path(_require(cfg, "root"))
    doc = scan_oscd_tree(root)
    out = _out_dir(cfg)
    outputs = []
    if out:
        out.mkdir(parents=True, exist_ok=True)
        # manifest paths are relative to the tree root; write the file there
        target = out / "manifest.json"
        rel_root = os.path.relpath(root.resolve(), out.resolve())
        for e in doc["entries"]:
            for key in ("t1", "t2"):
                e[key] = [os.path.join(rel_root, p) for p in e[key]]
            e["label"] = os.path.join(rel_root, e["label"])
        target.write_text(json.dumps(doc, indent=2) + "\n")
        outputs.append(target)
    return {"regions": len(doc["entries"]), "manifest": doc}, out, outputs


HANDLERS = {
    "acquire": cmd_acquire, "coreg": cmd_coreg, "segment": cmd_segment, "classify": cmd_classify,
    "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "area": cmd_area,
    "manifest": cmd_manifest,
}


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="JSON run config (defaults < config < flags)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--threads", type=int, help="cap on internal parallelism (env URBDIFF_THREADS)")
    p.add_argument("--out", dest="paths.out", help="output directory")
    p.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _paths(p, *names, multi=()):
    for n in names:
        p.add_argument(f"--{n}", dest=f"paths.{n}", nargs="+" if n in multi else None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="urbdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}",
                                parser_class=_Parser)

    p = sub.add_parser("acquire", help="build a catalogue query and parse a recorded response")
    _common(p)
    _paths(p, "aoi", "fixture")
    p.add_argument("--start", dest="acquire.start", help="YYYY-MM-DD")
    p.add_argument("--end", dest="acquire.end", help="YYYY-MM-DD")
    p.add_argument("--platform", dest="acquire.platform")
    p.add_argument("--product-type", dest="acquire.product_type")
    p.add_argument("--cloud-min", dest="acquire.cloud_min", type=float)
    p.add_argument("--cloud-max", dest="acquire.cloud_max", type=float)

    p = sub.add_parser("coreg", help="register a moving scene onto a reference scene")
    _common(p)
    _paths(p, "ref", "mov", multi=("ref", "mov"))
    p.add_argument("--levels", dest="coreg.pyramid_levels", type=int)
    p.add_argument("--window-radius", dest="coreg.window_radius", type=int)
    p.add_argument("--iterations", dest="coreg.iterations_per_level", type=int)
    p.add_argument("--rank-radius", dest="coreg.rank_radius", type=int)
    p.add_argument("--warp", dest="coreg.warp", action=argparse.BooleanOptionalAction, default=None,
                   help="resample the moving scene (--no-warp keeps it, reporting the flow only)")

    p = sub.add_parser("segment", help="SLIC superpixels and per-segment features")
    _common(p)
    _paths(p, "input", multi=("input",))
    p.add_argument("--n-segments", dest="slic.n_segments", type=int)
    p.add_argument("--compactness", dest="slic.compactness", type=float)
    p.add_argument("--max-iters", dest="slic.max_iters", type=int)
    p.add_argument("--connectivity", dest="slic.enforce_connectivity",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--red-band", dest="slic.red_band")
    p.add_argument("--nir-band", dest="slic.nir_band")

    p = sub.add_parser("classify", help="random forest land cover over superpixels")
    _common(p)
    _paths(p, "input", "segments", "samples", multi=("input",))
    p.add_argument("--red-band", dest="slic.red_band")
    p.add_argument("--nir-band", dest="slic.nir_band")
    p.add_argument("--n-trees", dest="forest.n_trees", type=int)
    p.add_argument("--max-depth", dest="forest.max_depth", type=int)
    p.add_argument("--min-leaf", dest="forest.min_leaf", type=int)
    p.add_argument("--split-fraction", dest="forest.split_fraction", type=float)

    p = sub.add_parser("train", help="train the Siamese change network from a manifest")
    _common(p)
    _paths(p, "manifest", "checkpoint")
    p.add_argument("--epochs", dest="train.epochs", type=int)
    p.add_argument("--batch", dest="train.batch", type=int)
    p.add_argument("--lr", dest="train.lr", type=float)
    p.add_argument("--momentum", dest="train.momentum", type=float)
    p.add_argument("--patch-count", dest="train.patch_count", type=int)
    p.add_argument("--balance", dest="train.balance_fraction", type=float)
    p.add_argument("--augment", dest="train.augment", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--channels", dest="siamese.encoder_channels", type=int, nargs="+")
    p.add_argument("--diff-mode", dest="siamese.diff_mode", choices=("absolute", "euclidean"))

    p = sub.add_parser("infer", help="change map for a scene pair")
    _common(p)
    _paths(p, "checkpoint", "a", "b", multi=("a", "b"))

    p = sub.add_parser("eval", help="score a change map against ground truth")
    _common(p)
    _paths(p, "pred", "truth")
    p.add_argument("--truth-change-value", dest="dataset.label_change_value", type=int,
                   help="truth value meaning change (default: 2 for {1,2} masks, else nonzero)")

    p = sub.add_parser("area", help="urbanised area of a change map")
    _common(p)
    _paths(p, "map")

    p = sub.add_parser("manifest", help="scan an OSCD-style tree into a manifest")
    _common(p)
    _paths(p, "root")
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = build_parser().parse_args(argv)
        if ns.command is None:
            raise UsageError(f"expected a subcommand, one of {', '.join(COMMANDS)}")
        logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s", force=True)
        cfg = resolve_config(ns)
        threads = resolve_threads(ns.threads)
    except UsageError as e:
        print(f"urbdiff: usage error: {e}", file=sys.stderr)
        return 2
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            doc, out, outputs = HANDLERS[ns.command](cfg, threads)
        if out is not None:
            write_run_record(out, ns.command, argv, cfg, threads, outputs)
        _emit(doc)
    except UsageError as e:
        print(f"urbdiff: usage error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, TypeError) as e:
        # invalid values for a module's config are usage problems too
        print(f"urbdiff: configuration error: {e}", file=sys.stderr)
        return 2
    except (UrbdiffError, OSError, ValueError, KeyError) as e:
        print(f"urbdiff: error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
