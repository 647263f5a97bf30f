"""Command-line entry point.

Usage::

    gncaf synth --out data/
    gncaf train --data data/ --out runs/k2 --set hops=2 --set epochs=15
    gncaf evaluate --checkpoint runs/k2/checkpoint.pt --data data/
    gncaf predict --checkpoint runs/k2/checkpoint.pt --data data/ --out preds/ --overlay
    gncaf ablate --axis hops --values 0,1,2 --seeds 0,1,2 --out ablation/

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .backbone import GncafModel
from .config import ConfigError
from .encoders import ArchiveError, PatchEncoder, encode_patches, load_feature_archive, write_feature_archive
from .encoders import PatchEncoderConfig, patches_to_tensor
from .estimator import set_deterministic
from .graph import build_context_graph, save_graph
from .synthdata import generate_dataset, generate_slides, load_dataset
from .tiling import SlideImage, TileGrid, read_image, read_label_mask, tile_mask, write_label_mask
from .training import (
    CheckpointError,
    DivergenceError,
    compute_metrics,
    confusion_matrix,
    evaluate,
    mean_reports,
    load_checkpoint,
    predict_slide_mask,
    prepare_slide,
    save_checkpoint,
    split_slides,
    train,
)

log = logging.getLogger("gncaf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

# e-TLS light blue, pel-TLS blue, sel-TLS green
PALETTE = np.array([[0, 0, 0], [135, 206, 250], [0, 0, 255], [0, 200, 0]], dtype=np.uint8)
OVERLAY_ALPHA = 0.5

AXES = {"hops": "hops", "aggregator": "aggregator", "fusion": "fusion", "encoder": "encoder"}
ENCODER_PRESETS = {
    "frozen": {"encoder_mode": "trainable_cnn", "encoder_trainable": False},
    "finetune": {"encoder_mode": "trainable_cnn", "encoder_trainable": True},
    "archive": {"encoder_mode": "frozen_archive", "encoder_trainable": False},
}


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _resolve(args, base=None) -> dict:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(("seed", args.seed))
    if getattr(args, "deterministic", False):
        overrides.append(("deterministic", True))
    cfg = cfgmod.resolve_config(args.config, overrides, base)
    set_deterministic(cfg["deterministic"])
    return cfg


def _tiling_kw(cfg: dict) -> dict:
    return {
        "patch_size": cfg["patch_size"],
        "threshold_mode": cfg["threshold_mode"],
        "min_tissue_fraction": cfg["min_tissue_fraction"],
        "fixed_threshold": cfg["fixed_threshold"],
    }


def _load_records(data_dir, cfg: dict, features_dir=None) -> dict:
    try:
        pairs = load_dataset(data_dir)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{data_dir}: cannot load dataset ({exc})") from exc
    records = {s.slide_id: prepare_slide(s, labels, **_tiling_kw(cfg)) for s, labels in pairs}
    if cfg["encoder_mode"] == "frozen_archive":
        if features_dir is None:
            raise ConfigError("encoder_mode=frozen_archive needs --features")
        _attach_features(records.values(), features_dir, cfg["feature_dim"])
    return records


def _attach_features(records, features_dir, feature_dim: int) -> None:
    for rec in records:
        path = Path(features_dir) / f"{rec.slide_id}.gncf"
        feats, coords, _ = load_feature_archive(path)
        if not np.array_equal(coords, rec.grid.coords):
            raise DataError(f"{path}: tile coordinates do not match the slide's tile grid")
        if feats.shape[1] != feature_dim:
            raise DataError(f"{path}: feature dim {feats.shape[1]} != configured {feature_dim}")
        rec.features = feats


def _split(ids, cfg: dict) -> dict:
    tr, va, te = split_slides(sorted(ids), tuple(cfg["split_ratios"]), cfg["seed"])
    return {"train": tr, "val": va, "test": te}


def _fit(cfg: dict, records: dict, split: dict, progress=None):
    torch.manual_seed(cfg["seed"])
    model = GncafModel(cfgmod.model_config(cfg))
    _, history = train(
        model,
        [records[i] for i in split["train"]],
        [records[i] for i in split["val"]],
        cfgmod.train_config(cfg),
        progress,
    )
    return model, history


def _write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def overlay(pixels: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Blend class colors over the slide at alpha 0.5; background pixels keep the slide."""
    out = pixels.astype(np.float32)
    fg = labels > 0
    out[fg] = (1 - OVERLAY_ALPHA) * out[fg] + OVERLAY_ALPHA * PALETTE[labels[fg]]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = generate_dataset(cfgmod.synth_spec(cfg), cfg["n_slides"], cfg["seed"], args.out)
    cfgmod.write_config(cfg, out)
    log.info("wrote %d slides to %s", cfg["n_slides"], out)
    return EXIT_OK


def _slide_inputs(args) -> list[tuple[SlideImage, np.ndarray | None]]:
    if args.data:
        try:
            return load_dataset(args.data)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"{args.data}: cannot load dataset ({exc})") from exc
    if not args.slide:
        raise ConfigError("give --data or at least one --slide")
    return [(SlideImage(read_image(p), 1.0, Path(p).stem), None) for p in args.slide]


def cmd_tile(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    for slide, labels in _slide_inputs(args):
        rec = prepare_slide(slide, labels, **_tiling_kw(cfg))
        d = out / slide.slide_id
        d.mkdir(parents=True, exist_ok=True)
        rec.grid.save(d / "grid.json")
        np.save(d / "patches.npy", rec.patches)
        if rec.tile_masks is not None:
            np.save(d / "tile_masks.npy", rec.tile_masks)
        log.info("%s: %dx%d grid, %d foreground tiles", slide.slide_id, rec.grid.rows, rec.grid.cols, rec.n_nodes)
    cfgmod.write_config(cfg, out)
    return EXIT_OK


def _tile_dirs(root) -> list[Path]:
    dirs = sorted(p.parent for p in Path(root).glob("*/grid.json"))
    if not dirs:
        raise DataError(f"{root}: no tiled slides (expected <id>/grid.json)")
    return dirs


def cmd_build_graph(args) -> int:
    for d in _tile_dirs(args.tiles):
        grid = TileGrid.load(d / "grid.json")
        graph = build_context_graph(grid)
        save_graph(d / "graph.json", graph)
        log.info("%s: %d nodes, %d edges", grid.slide_id, graph.n_nodes, len(graph.edges))
    return EXIT_OK


def cmd_encode(args) -> int:
    cfg = _resolve(args)
    dirs = _tile_dirs(args.tiles)
    patches = {d.name: np.load(d / "patches.npy") for d in dirs}
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        if model.encoder is None:
            raise ConfigError(f"{args.checkpoint}: model has no patch encoder")
        encoder, dim = model.encoder, model.config.feature_dim
    else:
        # frozen, randomly initialized encoder standardized on the given patches
        torch.manual_seed(cfg["seed"])
        dim = cfg["feature_dim"]
        encoder = PatchEncoder(dim)
        pool = np.concatenate(list(patches.values()))
        rng = np.random.default_rng(cfg["seed"])
        pick = np.sort(rng.choice(len(pool), size=min(1024, len(pool)), replace=False))
        encoder.calibrate_(patches_to_tensor(pool[pick]))
    encoder.eval()
    enc_cfg = PatchEncoderConfig("trainable_cnn", dim, False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for d in dirs:
        grid = TileGrid.load(d / "grid.json")
        with torch.no_grad():
            feats = encode_patches(patches[d.name], enc_cfg, encoder)
        write_feature_archive(out / f"{grid.slide_id}.gncf", feats.float(), grid.coords, (grid.rows, grid.cols))
        log.info("%s: %d x %d features", grid.slide_id, *feats.shape)
    cfgmod.write_config(cfg, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config(cfg, out)
    records = _load_records(args.data, cfg, args.features)
    split = _split(records, cfg)
    (out / "split.json").write_text(json.dumps(split, indent=1) + "\n")
    t0 = time.perf_counter()
    model, history = _fit(cfg, records, split, lambda r: log.info("epoch %(epoch)d loss %(train_loss).4f val mF1 %(val_mF1)s", r))
    _write_jsonl(out / "history.jsonl", history)
    save_checkpoint(out / "checkpoint.pt", model, cfg, history)
    log.info("trained in %.1fs; checkpoint at %s", time.perf_counter() - t0, out / "checkpoint.pt")
    return EXIT_OK


def _checkpoint_cfg(args):
    model, payload = load_checkpoint(args.checkpoint)
    cfg = _resolve(args, base=payload["run_config"])
    return model, cfg


def _select(records: dict, cfg: dict, which: str) -> list:
    if which == "all":
        return [records[i] for i in sorted(records)]
    return [records[i] for i in _split(records, cfg)[which]]


def cmd_evaluate(args) -> int:
    if args.predictions:
        cfg = _resolve(args)
        report = _evaluate_predictions(args, cfg)
    else:
        if not args.checkpoint:
            raise ConfigError("give --checkpoint or --predictions")
        model, cfg = _checkpoint_cfg(args)
        records = _load_records(args.data, cfg, args.features)
        report = evaluate(model, _select(records, cfg, args.split), cfg["metric_scope"], cfg["metric_pooling"], cfg["eval_chunk"])
    doc = report.to_json()
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _evaluate_predictions(args, cfg: dict):
    truth = {s.slide_id: (s, labels) for s, labels in load_dataset(args.data)}
    paths = sorted(Path(args.predictions).glob("*.lbl"))
    if not paths:
        raise DataError(f"{args.predictions}: no predicted masks (*.lbl)")
    c = cfg["n_classes"]
    cm = np.zeros((c, c), dtype=np.int64)
    reports = []
    for p in paths:
        if p.stem not in truth:
            raise DataError(f"{p}: no ground truth for slide {p.stem!r}")
        slide, labels = truth[p.stem]
        pred = read_label_mask(p)
        if pred.shape != labels.shape:
            raise DataError(f"{p}: mask shape {pred.shape} != slide {labels.shape}")
        if cfg["metric_pooling"] == "pooled":
            cm += confusion_matrix(labels, pred, c)
        else:
            grid = prepare_slide(slide, None, **_tiling_kw(cfg)).grid
            for t, q in zip(tile_mask(labels, grid), tile_mask(pred, grid)):
                reports.append(compute_metrics(confusion_matrix(t, q, c), cfg["metric_scope"]))
    if cfg["metric_pooling"] == "pooled":
        return compute_metrics(cm, cfg["metric_scope"])
    return mean_reports(reports, cfg["metric_scope"])


def cmd_predict(args) -> int:
    from PIL import Image

    model, cfg = _checkpoint_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        records = _select(_load_records(args.data, cfg, args.features), cfg, args.split)
    else:
        if not args.slide:
            raise ConfigError("give --data or at least one --slide")
        slides = [SlideImage(read_image(p), 1.0, Path(p).stem) for p in args.slide]
        records = [prepare_slide(s, None, **_tiling_kw(cfg)) for s in slides]
        if cfg["encoder_mode"] == "frozen_archive":
            if not args.features:
                raise ConfigError("encoder_mode=frozen_archive needs --features")
            _attach_features(records, args.features, cfg["feature_dim"])
    for rec in records:
        mask = predict_slide_mask(model, rec, cfg["eval_chunk"])
        write_label_mask(out / f"{rec.slide_id}.lbl", mask)
        if args.overlay:
            pixels = _record_pixels(rec)
            Image.fromarray(overlay(pixels, mask), mode="RGB").save(out / f"{rec.slide_id}.overlay.png")
        log.info("%s: predicted %d tiles", rec.slide_id, rec.n_nodes)
    cfgmod.write_config(cfg, out)
    return EXIT_OK


def _record_pixels(rec) -> np.ndarray:
    """Slide raster reassembled from tiles; background tiles are white."""
    g = rec.grid
    canvas = np.full((g.rows * g.patch_size_px, g.cols * g.patch_size_px, 3), 255, dtype=np.uint8)
    p = g.patch_size_px
    for (r, c), patch in zip(g.coords, rec.patches):
        canvas[r * p : (r + 1) * p, c * p : (c + 1) * p] = patch
    return canvas[: g.height_px, : g.width_px]


def _parse_values(axis: str, raw: str) -> list:
    vals = [v.strip() for v in raw.split(",") if v.strip()]
    if not vals:
        raise ConfigError("--values is empty")
    if axis == "hops":
        try:
            return [int(v) for v in vals]
        except ValueError as exc:
            raise ConfigError(f"hops values must be integers: {raw}") from exc
    if axis == "encoder":
        bad = [v for v in vals if v not in ENCODER_PRESETS]
        if bad:
            raise ConfigError(f"unknown encoder values {bad}; choose from {sorted(ENCODER_PRESETS)}")
    return vals


def _axis_overrides(axis: str, value) -> dict:
    if axis == "encoder":
        return dict(ENCODER_PRESETS[value])
    return {AXES[axis]: value}


def cmd_ablate(args) -> int:
    if args.axis not in AXES:
        raise ConfigError(f"unknown axis {args.axis!r}; choose from {sorted(AXES)}")
    values = _parse_values(args.axis, args.values)
    cfg = _resolve(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg["seed"]]
    for v in values:
        cfgmod.resolve_config(None, _axis_overrides(args.axis, v).items(), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config(cfg, out)
    rows = []
    for seed in seeds:
        seed_cfg = dict(cfg, seed=seed)
        if args.data:
            records = _load_records(args.data, dict(seed_cfg, encoder_mode="trainable_cnn"))
        else:
            spec = cfgmod.synth_spec(seed_cfg)
            records = {s.slide_id: prepare_slide(s, labels, **_tiling_kw(cfg)) for s, labels, _ in generate_slides(spec, cfg["n_slides"], seed)}
        if args.features:
            _attach_features(records.values(), args.features, cfg["feature_dim"])
        split = _split(records, seed_cfg)
        for v in values:
            run_cfg = cfgmod.resolve_config(None, _axis_overrides(args.axis, v).items(), seed_cfg)
            if run_cfg["encoder_mode"] == "frozen_archive" and not args.features:
                raise ConfigError("encoder value 'archive' needs --features")
            t0 = time.perf_counter()
            model, history = _fit(run_cfg, records, split)
            rep = evaluate(model, [records[i] for i in split["test"]], run_cfg["metric_scope"], run_cfg["metric_pooling"], run_cfg["eval_chunk"])
            row = {"axis": args.axis, "value": v, "seed": seed, "seconds": round(time.perf_counter() - t0, 2)}
            row.update({k: rep.to_json()[k] for k in ("mF1", "mIoU", "mP", "mR")})
            row["per_class_f1"] = rep.to_json()["per_class"]["f1"]
            rows.append(row)
            log.info("%s=%s seed %d: mF1 %.2f (%.0fs)", args.axis, v, seed, row["mF1"], row["seconds"])
            _write_jsonl(out / "runs.jsonl", rows)
    table = summarize(rows, values)
    (out / "table.json").write_text(json.dumps({"axis": args.axis, "seeds": seeds, "rows": table, "runs": rows}, indent=1) + "\n")
    md = format_table(args.axis, table)
    (out / "table.md").write_text(md)
    print(md, end="")
    return EXIT_OK


def summarize(rows: list[dict], values: list) -> list[dict]:
    """Median over seeds per axis value, in the declared value order."""
    table = []
    for v in values:
        runs = [r for r in rows if r["value"] == v]
        entry = {"value": v, "n_seeds": len(runs)}
        for k in ("mF1", "mIoU", "mP", "mR"):
            entry[k] = statistics.median(r[k] for r in runs)
        table.append(entry)
    return table


def format_table(axis: str, table: list[dict]) -> str:
    lines = [f"| {axis} | mF1 | mIoU | mP | mR |", "|---|---|---|---|---|"]
    for e in table:
        lines.append(f"| {e['value']} | {e['mF1']:.2f} | {e['mIoU']:.2f} | {e['mP']:.2f} | {e['mR']:.2f} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gncaf", description="Graph-context patch segmentation pipelines.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--deterministic", action="store_true", help="single-threaded deterministic kernels")
        if seed:
            p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic context dataset"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("tile", help="tile slides into grid.json + patches.npy"))
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--slide", action="append", help="slide raster (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tile)

    p = common(sub.add_parser("encode", help="write feature archives for tiled slides"))
    p.add_argument("--tiles", required=True)
    p.add_argument("--checkpoint", help="take the patch encoder from this checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("build-graph", help="write graph.json next to each grid.json")
    p.add_argument("--tiles", required=True)
    p.set_defaults(func=cmd_build_graph)

    p = common(sub.add_parser("train", help="train and write checkpoint + history"))
    p.add_argument("--data", required=True)
    p.add_argument("--features", help="directory of <slide_id>.gncf archives")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("evaluate", help="metrics JSON for a checkpoint or predicted masks"))
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="directory of predicted <slide_id>.lbl masks")
    p.add_argument("--features")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("predict", help="slide label masks and optional overlays"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--slide", action="append")
    p.add_argument("--features")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--overlay", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = common(sub.add_parser("ablate", help="metrics table across one axis"))
    p.add_argument("--axis", required=True, help="hops | aggregator | fusion | encoder")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    p.add_argument("--data", help="dataset directory (default: synthesize per seed)")
    p.add_argument("--features")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, ArchiveError, CheckpointError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
