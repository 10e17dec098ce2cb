"""Command-line entry point: ``localnet <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite loss).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .cpl import ConfigError, cpl_forward
from .autodiff import EVAL
from .data import (DataError, LabeledSample, generate_synthetic, label_colors, load_off,
                   read_cloud_csv, sample_mesh_uniform, write_cloud_csv, write_dataset, write_ply,
                   write_predictions, PointCloud, SYNTHETIC_CLASSES)
from .geometry import farthest_point_sampling, normalize_coords
from .network import SegmenterConfig, classify_forward, segment_forward, vote_predict, vote_segment
from .train import NumericError, RunConfig, evaluate, load_splits, train

log = logging.getLogger("localnet")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

# metric-feature combinations A..H as (phi1, phi2, phi3)
MFC_LETTERS = {
    "A": (False, False, False), "B": (True, False, False), "C": (False, True, False),
    "D": (False, False, True), "E": (True, True, False), "F": (True, False, True),
    "G": (False, True, True), "H": (True, True, True),
}


def parse_mfc(text: str) -> tuple[bool, bool, bool]:
    text = text.strip()
    if text.upper() in MFC_LETTERS:
        return MFC_LETTERS[text.upper()]
    if text.lower() in ("", "none"):
        return (False, False, False)
    names = {t.strip().lower() for t in text.replace("+", ",").split(",") if t.strip()}
    unknown = names - {"phi1", "phi2", "phi3"}
    if unknown:
        raise ConfigError(f"unknown metric feature(s): {sorted(unknown)}")
    return tuple(f"phi{i}" in names for i in (1, 2, 3))


def mfc_letter(mask) -> str:
    return next(k for k, v in MFC_LETTERS.items() if v == tuple(mask))


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    if key == "mfc":
        return parse_mfc(raw)
    if default is None:
        if raw.lower() in ("none", "null", ""):
            return None
        if key in ("scale_lo", "scale_hi"):
            try:
                return float(raw)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {raw!r}") from None
        return raw
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(int(p) for p in parts) if key.endswith("widths") else tuple(parts)
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def read_config_file(path) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def build_run_config(args) -> RunConfig:
    defaults = RunConfig()
    values: dict = {}
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key, text in raw.items():
        if key not in RunConfig.field_names():
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, text, getattr(defaults, key))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in RunConfig.field_names():
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, text, getattr(defaults, key))
    flag_map = {"seed": "seed", "epochs": "epochs", "m": "m", "k": "k", "out": "out",
                "task": "task", "data": "data_dir", "n_points": "n_points", "jobs": "jobs",
                "votes": "votes", "batch_size": "batch_size"}
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    if getattr(args, "centers", None):
        values["use_cpl"] = args.centers == "cpl"
    if getattr(args, "use_g1", None) is not None:
        values["use_g1"] = args.use_g1
    if getattr(args, "mfc", None) is not None:
        values["mfc"] = parse_mfc(args.mfc)
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _write_config(path, cfg: RunConfig):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "mfc":
            v = mfc_letter(v)
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out / "config.txt", cfg)
    result = train(cfg, out)
    last = result.rows[-1] if result.rows else {}
    print(json.dumps({"out": str(out), "epochs": cfg.epochs, "last": last}))
    return 0


def _eval_samples(data_dir, run_meta: dict):
    run = RunConfig(**run_meta) if run_meta else RunConfig()
    if data_dir:
        run = dataclasses.replace(run, data_dir=data_dir)
    splits = load_splits(run, np.random.default_rng(np.random.SeedSequence(run.seed).spawn(5)[0]))
    return run, splits, splits.test or splits.train


def _load_checkpoint(path):
    try:
        return ckpt.load(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    except ckpt.CheckpointError as exc:
        raise DataError(str(exc)) from None


def _run_from_meta(meta: dict) -> dict:
    run = dict(meta.get("run", {}))
    return {k: tuple(v) if isinstance(v, list) else v for k, v in run.items()}


def cmd_eval(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    run, splits, samples = _eval_samples(args.data, _run_from_meta(state.meta))
    report = evaluate(state.params, state.config, samples, splits.parts_of_class,
                      votes=args.votes, scale_range=run.scale_range,
                      rng=np.random.default_rng(args.seed), jobs=args.jobs)
    probs = report.pop("probs", None)
    report.pop("probs_vote", None)
    report["votes"] = args.votes
    report["task"] = "segment" if isinstance(state.config, SegmenterConfig) else "classify"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k in sorted(report):
            w.writerow([k, report[k]])
    if probs is not None:
        truth = [s.shape_label for s in samples]
        write_predictions(out / "predictions.csv", [s.name or i for i, s in enumerate(samples)],
                          truth, probs.argmax(1), probs)
    print(json.dumps(report, sort_keys=True))
    return 0


def _read_clouds(paths) -> list[LabeledSample]:
    out = []
    for p in paths:
        try:
            coords, labels = read_cloud_csv(p)
        except FileNotFoundError:
            raise DataError(f"{p} not found") from None
        out.append(LabeledSample(PointCloud(normalize_coords(coords)), None, labels, name=str(p)))
    return out


def cmd_predict(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    cfg = state.config
    samples = _read_clouds(args.clouds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    dtype = np.float32
    if isinstance(cfg, SegmenterConfig):
        if args.shape_class is None:
            raise ConfigError("segmentation predict needs --shape-class")
        for i, s in enumerate(samples):
            pts = s.cloud.coords.astype(dtype)[None]
            if args.votes > 1:
                probs = vote_segment(pts, [args.shape_class], state.params, cfg, args.votes, rng=rng)[0]
            else:
                probs = segment_forward(pts, [args.shape_class], state.params, cfg, EVAL).probs[0]
            pred = probs.argmax(1)
            stem = Path(s.name).stem
            write_cloud_csv(out / f"{stem}_parts.csv", s.cloud.coords, pred)
            write_ply(out / f"{stem}_parts.ply", s.cloud.coords, label_colors(pred))
        return 0
    probs = []
    for s in samples:
        pts = s.cloud.coords.astype(dtype)[None]
        if args.votes > 1:
            probs.append(vote_predict(pts, state.params, cfg, args.votes, rng=rng, jobs=args.jobs)[0])
        else:
            probs.append(classify_forward(pts, state.params, cfg, EVAL).probs[0])
    probs = np.array(probs)
    write_predictions(out / "predictions.csv", [s.name for s in samples], [None] * len(samples),
                      probs.argmax(1), probs)
    return 0


def _write_centers(out: Path, tag: str, coords: np.ndarray, center_idx: np.ndarray):
    times = np.bincount(center_idx, minlength=len(coords))
    with open(out / f"centers_{tag}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "is_center", "times_selected"])
        for p, t in zip(coords, times):
            w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), int(t > 0), int(t)])
    colors = np.where(times[:, None] > 0, [[214, 39, 40]], [[180, 180, 180]])
    write_ply(out / f"centers_{tag}.ply", coords, colors)


def cmd_inspect_centers(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    cfg = state.config
    if args.cloud:
        coords, _ = read_cloud_csv(args.cloud)
    else:
        rng = np.random.default_rng(args.seed)
        coords = generate_synthetic(args.shape, args.n_points, 0.0, rng).cloud.coords
    coords = normalize_coords(coords)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(out / "input.ply", coords)
    summary = {"n": len(coords), "m": cfg.m}
    methods = ["fps", "cpl"] if args.method == "both" else [args.method]
    for method in methods:
        if method == "fps":
            idx = farthest_point_sampling(coords, min(cfg.m, len(coords)), args.fps_seed)
        else:
            if state.params.get("cpl") is None:
                raise ConfigError("checkpoint has no CPL layers")
            res = cpl_forward(coords.astype(np.float32)[None], state.params["cpl"], cfg.m, EVAL)
            idx = res.critical_indices[0]
        _write_centers(out, method, coords, idx)
        summary[method] = {"distinct": int(len(np.unique(idx))), "selected": int(len(idx))}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _grid(spec: str) -> tuple[str, list]:
    if "=" not in spec:
        raise ConfigError(f"--grid expects key=values, got {spec!r}")
    key, values = spec.split("=", 1)
    key = key.strip()
    if key not in ("m", "k", "mfc"):
        raise ConfigError("--grid supports m, k or mfc")
    if key == "mfc":
        if ".." in values:
            lo, hi = values.split("..")
            letters = "ABCDEFGH"
            return key, list(letters[letters.index(lo.strip().upper()):letters.index(hi.strip().upper()) + 1])
        return key, [v.strip().upper() for v in values.split(",") if v.strip()]
    if ".." in values:
        lo, rest = values.split("..")
        hi, _, step = rest.partition(":")
        return key, list(range(int(lo), int(hi) + 1, int(step) if step else 32))
    return key, [int(v) for v in values.split(",") if v.strip()]


def cmd_ablate(args) -> int:
    base = build_run_config(args)
    key, values = _grid(args.grid)
    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        change = {"mfc": MFC_LETTERS[value]} if key == "mfc" else {key: value}
        cfg = dataclasses.replace(base, out=str(out / f"{key}_{value}"), **change)
        res = train(cfg, cfg.out)
        last = res.rows[-1] if res.rows else {}
        row = {key: value, "acc": last.get("test_metric", float("nan")),
               "mprime_mean": last.get("mprime_mean", ""), "mprime_max": last.get("mprime_max", ""),
               "mprime_min": last.get("mprime_min", "")}
        if key == "mfc":
            mask = MFC_LETTERS[value]
            row = {"combo": value, "phi1": int(mask[0]), "phi2": int(mask[1]), "phi3": int(mask[2]),
                   **{k: v for k, v in row.items() if k != "mfc"}}
        rows.append(row)
        log.info("ablation %s=%s -> %s", key, value, row["acc"])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(json.dumps(rows))
    return 0


def cmd_sample_mesh(args) -> int:
    try:
        mesh = load_off(args.mesh)
    except FileNotFoundError:
        raise DataError(f"{args.mesh} not found") from None
    cloud = sample_mesh_uniform(mesh, args.n_points, np.random.default_rng(args.seed))
    coords = normalize_coords(cloud.coords) if args.normalize else cloud.coords
    write_cloud_csv(args.out, coords)
    return 0


def cmd_gen_synthetic(args) -> int:
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    bad = [c for c in classes if c not in SYNTHETIC_CLASSES]
    if bad:
        raise ConfigError(f"unknown synthetic classes {bad}")
    rng = np.random.default_rng(args.seed)
    samples, splits = [], []
    for split, per in (("train", args.train_per_class), ("test", args.test_per_class)):
        for label, cls in enumerate(classes):
            for _ in range(per):
                s = generate_synthetic(cls, args.n_points, args.jitter, rng, label)
                if args.parts:
                    s.part_labels = s.part_labels + 2 * label
                else:
                    s.part_labels = None
                s.cloud = PointCloud(normalize_coords(s.cloud.coords))
                samples.append(s)
                splits.append(split)
    write_dataset(args.out, samples, classes, splits)
    return 0


def _add_run_flags(p):
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--task", choices=["classify", "segment"])
    p.add_argument("--data", help="dataset directory with manifest.csv (default: synthetic)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--n-points", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--centers", choices=["cpl", "fps"])
    p.add_argument("--use-g1", dest="use_g1", action="store_true", default=None)
    p.add_argument("--no-g1", dest="use_g1", action="store_false")
    p.add_argument("--mfc", help="A..H or a subset like phi1,phi3 (or none)")
    p.add_argument("--votes", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="localnet")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier or segmenter")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy / mIoU with and without voting")
    p.add_argument("checkpoint")
    p.add_argument("--data")
    p.add_argument("--votes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict labels for point-cloud CSV files")
    p.add_argument("checkpoint")
    p.add_argument("clouds", nargs="+")
    p.add_argument("--votes", type=int, default=1)
    p.add_argument("--shape-class", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="predictions")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect-centers", help="export FPS and CPL centers for viewing")
    p.add_argument("checkpoint")
    p.add_argument("--cloud", help="point CSV; default is a synthetic shape")
    p.add_argument("--shape", default="cylinder", choices=SYNTHETIC_CLASSES)
    p.add_argument("--n-points", type=int, default=1024)
    p.add_argument("--method", choices=["cpl", "fps", "both"], default="both")
    p.add_argument("--fps-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="centers")
    p.set_defaults(func=cmd_inspect_centers)

    p = sub.add_parser("ablate", help="train over a grid of m, k or metric-feature combos")
    _add_run_flags(p)
    p.add_argument("--grid", required=True, help="m=192..320, k=64,128 or mfc=A..H")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sample-mesh", help="uniformly sample an OFF mesh to CSV")
    p.add_argument("mesh")
    p.add_argument("--n-points", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_mesh)

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset with manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", default="sphere,cube,cylinder,plane")
    p.add_argument("--train-per-class", type=int, default=50)
    p.add_argument("--test-per-class", type=int, default=20)
    p.add_argument("--n-points", type=int, default=1024)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--parts", action="store_true", help="keep per-point part labels")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
