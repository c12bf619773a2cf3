"""Command-line entry point: ``penwatch <subcommand> ...``.

Exit codes
----------
0  success
1  validation found violations
2  usage error
3  I/O error (missing or unreadable path)
4  parse, schema or merge error in an input file
5  evaluation error (no overlapping frames, empty ground truth, bad fold count)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .folds import FoldSpec, InvalidFoldCount, fold_evaluate, make_folds
from .geometry import DEFAULT_RESOLUTION
from .matching import MatchConfig, match_dataset
from .metrics import EmptyGroundTruth, EmptyInput
from .report import build_report, csv_bytes, fmt_alpha, rounded
from .schema import MergeError, ParseError, SchemaError, load_dataset, load_manifest, parse_predictions
from .synthetic import GenerationError, NoiseConfig, SceneConfig, corrupt, generate_scene, write_dataset
from .welfare import DEFAULT_WINDOW, budgets_csv, evaluate_rules, flags_json, parse_rule, sliding_budgets

log = logging.getLogger("penwatch")

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_SCHEMA = 4
EXIT_EVAL = 5


class EmptyIntersection(ValueError):
    """Predictions and ground truth share no frame."""


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=2) + "\n").encode("utf-8")


def _write(out: Path, name: str, data: bytes) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_bytes(data)


def _stamp(args, out: Path) -> None:
    if args.stamp:
        _write(out, "stamp.json", _dump({"generated_at": datetime.now(timezone.utc).isoformat()}))


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _alphas(args, default=(0.1, 0.5, 0.75)) -> list[float]:
    alphas = args.alpha or list(default)
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise argparse.ArgumentTypeError(f"--alpha {a} outside [0, 1]")
    return sorted(set(alphas))


# -- subcommands ------------------------------------------------------------


def cmd_validate(args) -> int:
    out = Path(args.out)
    try:
        ds = load_dataset(args.manifest)
    except (ParseError, SchemaError, MergeError) as exc:
        doc = {"error": type(exc).__name__, "message": str(exc)}
        if getattr(exc, "offset", None) is not None:
            doc["byte_offset"] = exc.offset
        _write(out, "validation.json", _dump(doc))
        raise
    report = ds.report.sorted()
    doc = {
        "manifest": str(Path(args.manifest).name),
        "frames": len(ds.frames),
        "ethogram_rows": len(ds.rows),
        "polygon_files": len(ds.polygons),
        "visible_birds": ds.merged.n_visible,
        **report.to_dict(),
    }
    _write(out, "validation.json", _dump(doc))
    _stamp(args, out)
    if report:
        print(f"{len(report)} violation(s); see {out / 'validation.json'}", file=sys.stderr)
        return EXIT_VIOLATIONS
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    spec = make_folds(manifest, args.k, args.seed)
    out = Path(args.out)
    _write(out, "folds.json", spec.to_json().encode("utf-8"))
    for i, (test, _) in enumerate(spec.folds, start=1):
        print(f"fold {i}: test {' '.join(test)}")
    return EXIT_OK


def _load_eval_inputs(args):
    ds = load_dataset(args.manifest)
    preds = parse_predictions(_read(args.predictions)) if args.predictions else []
    return ds, preds


def _check_overlap(frames, preds) -> None:
    keys = {f.key for f in frames}
    if preds and not any(p.key in keys for p in preds):
        raise EmptyIntersection("no prediction refers to an annotated frame")


def cmd_match(args) -> int:
    ds, preds = _load_eval_inputs(args)
    _check_overlap(ds.frames, preds)
    by_key = {f.key: f for f in ds.frames}
    doc = {"mode": args.mode, "alphas": {}}
    cache: dict = {}
    for a in _alphas(args, default=(0.5,)):
        dm = match_dataset(ds.frames, preds, MatchConfig(a, args.mode, resolution=args.resolution),
                           n_jobs=args.workers, iou_cache=cache)
        frames = []
        for key, res in dm.results.items():
            birds = by_key[key].gt_birds()
            frames.append({
                "video": key[0],
                "frame": key[1],
                "pairs": [[birds[g].bird_id, p, iou] for g, p, iou in res.pairs],
                "unmatched_birds": [birds[g].bird_id for g in res.unmatched_gt],
                "unmatched_predictions": res.unmatched_pred,
            })
        doc["alphas"][fmt_alpha(a)] = {
            "tp": dm.tp,
            "fp": dm.fp,
            "fn": dm.fn,
            "unknown_prediction_frames": [list(k) for k in dm.unknown_frames],
            "frames": frames,
        }
    _write(Path(args.out), "matches.json", _dump(rounded(doc, 6)))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    alphas = _alphas(args)
    kw = dict(mode=args.mode, class_alpha=args.class_alpha, resolution=args.resolution,
              per_class=args.per_class, n_jobs=args.workers)
    if args.folds:
        ds = load_dataset(args.manifest)
        spec = FoldSpec.from_dict(json.loads(_read(args.folds)))
        per_fold = {}
        for i in range(1, len(spec.folds) + 1):
            path = Path(args.fold_predictions.format(fold=i))
            per_fold[i] = parse_predictions(path.read_bytes()) if path.exists() else None
        present = [p for v in per_fold.values() if v for p in v]
        _check_overlap(ds.frames, present)
        ev = fold_evaluate(spec, ds.frames, per_fold, alphas=alphas, **kw)
        for i, rep in ev.reports.items():
            rep.write(out / f"fold_{i}")
        keys = list(ev.mean)
        rows = [[f"fold_{i}", " ".join(spec.folds[i - 1][0]), *(ev.per_fold[i].get(k, "") for k in keys)]
                for i in sorted(ev.per_fold)]
        rows.append(["mean", "", *(ev.mean[k] for k in keys)])
        _write(out, "folds_summary.csv", csv_bytes(["fold", "test_videos", *keys], rows))
        _write(out, "folds_summary.json", _dump(rounded({
            "camera_id": ev.camera_id,
            "incomplete": ev.incomplete,
            "missing_folds": ev.missing,
            "per_fold": {str(i): v for i, v in ev.per_fold.items()},
            "mean": ev.mean,
        })))
        _stamp(args, out)
        return EXIT_OK
    ds, preds = _load_eval_inputs(args)
    _check_overlap(ds.frames, preds)
    report = build_report(ds.frames, preds, alphas=alphas, **kw)
    report.write(out)
    _stamp(args, out)
    for a in alphas:
        print(f"AP@{fmt_alpha(a)} = {report.ap.per_threshold[a]:.4f}")
    print(f"mAP@[.50:.95] = {report.ap.coco_map:.4f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    videos = tuple(v.strip() for v in args.videos.split(",") if v.strip())
    scene_cfg = SceneConfig(
        frame_width=args.width,
        frame_height=args.height,
        n_birds=args.birds,
        n_frames=args.frames,
        video_ids=videos,
        camera_id=args.camera,
        nvs_rate=args.nvs_rate,
    )
    scene = generate_scene(scene_cfg, args.seed)
    preds = ledger = None
    if not args.no_predictions:
        noise = NoiseConfig(
            jitter_sigma=args.jitter,
            drop_rate=args.drop_rate,
            false_positive_rate=args.fp_rate,
            target_iou=args.target_iou,
            emit_class_scores=True,
        )
        preds, ledger = corrupt(scene.frames, noise, args.seed, (args.width, args.height))
    write_dataset(scene, args.out, preds, ledger)
    return EXIT_OK


def cmd_welfare(args) -> int:
    ds = load_dataset(args.manifest)
    rules = [parse_rule(r, args.min_window or args.window) for r in (args.rule or [])]
    budgets, flags = [], []
    for video in ds.manifest.video_ids:
        frames = [f for f in ds.frames if f.video_id == video]
        if not frames:
            continue
        b = sliding_budgets(frames, args.window, args.step, video)
        budgets.extend(b)
        flags.extend(evaluate_rules(b, rules))
    out = Path(args.out)
    _write(out, "budgets.csv", budgets_csv(budgets))
    _write(out, "flags.json", flags_json(flags))
    print(f"{len(budgets)} window(s), {len(flags)} flag(s)")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="penwatch", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    p._subcommands = sub

    def common(sp, manifest=True):
        sp.add_argument("--config", help="JSON file supplying any flag; explicit flags win")
        if manifest:
            sp.add_argument("--manifest", required=True)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=1, help="threads for matching; -1 for all cores")
        sp.add_argument("--stamp", action="store_true", help="also write stamp.json with the current time")

    def geometry(sp):
        sp.add_argument("--alpha", type=float, action="append", help="IoU threshold (repeatable)")
        sp.add_argument("--mode", choices=["bbox", "segm"], default="bbox")
        sp.add_argument("--resolution", type=int, default=DEFAULT_RESOLUTION,
                        help="supersampling factor for polygon IoU")

    sp = sub.add_parser("validate", help="check ground-truth files")
    common(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("split", help="build video-grouped folds")
    common(sp)
    sp.add_argument("--k", type=int, default=5)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("match", help="greedy IoU matching of predictions to ground truth")
    common(sp)
    geometry(sp)
    sp.add_argument("--predictions", required=True)
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("evaluate", help="AP, counts and classification metrics")
    common(sp)
    geometry(sp)
    sp.add_argument("--predictions")
    sp.add_argument("--class-alpha", type=float, default=0.5)
    sp.add_argument("--per-class", choices=["behavior", "posture"], default=None)
    sp.add_argument("--folds", help="folds.json from 'split'; evaluates per fold")
    sp.add_argument("--fold-predictions", default="fold{fold}.ndjson",
                    help="per-fold prediction path with a {fold} placeholder")
    sp.add_argument("--k", type=int, default=5)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("generate", help="write a seeded synthetic dataset")
    common(sp, manifest=False)
    sp.add_argument("--birds", type=int, default=20)
    sp.add_argument("--frames", type=int, default=100)
    sp.add_argument("--videos", default="281")
    sp.add_argument("--camera", type=int, default=1)
    sp.add_argument("--width", type=int, default=1280)
    sp.add_argument("--height", type=int, default=720)
    sp.add_argument("--nvs-rate", type=float, default=0.02)
    sp.add_argument("--jitter", type=float, default=2.0)
    sp.add_argument("--drop-rate", type=float, default=0.1)
    sp.add_argument("--fp-rate", type=float, default=0.5)
    sp.add_argument("--target-iou", type=float, default=None)
    sp.add_argument("--no-predictions", action="store_true")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("welfare", help="behaviour budgets and welfare flags")
    common(sp)
    sp.add_argument("--window", type=int, default=DEFAULT_WINDOW, help="window length in frames")
    sp.add_argument("--step", type=int, default=None)
    sp.add_argument("--rule", action="append", help="e.g. 'DRK<0.01' or 'EAT>0.9@600'")
    sp.add_argument("--min-window", type=int, default=None, help="default persistence in frames")
    sp.set_defaults(func=cmd_welfare)
    return p


def _config_path(argv: list[str]):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    path = _config_path(argv)
    if path:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(cfg, dict):
            parser.error("config file must hold a JSON object")
        choices = parser._subcommands.choices
        command = next((a for a in argv if a in choices), None)
        if command is not None:
            sub = choices[command]
            known = {a.dest for a in sub._actions}
            unknown = sorted(set(cfg) - known)
            if unknown:
                parser.error(f"unknown config key(s) for {command}: {unknown}")
            sub.set_defaults(**cfg)
            for a in sub._actions:
                if a.dest in cfg:
                    a.required = False
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and args.command == "generate":
        args.seed = 0
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except FileNotFoundError as exc:
        print(f"error: cannot read {exc.filename}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"error: config file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: cannot read {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    except (ParseError, SchemaError, MergeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (EmptyIntersection, EmptyGroundTruth, EmptyInput, InvalidFoldCount, GenerationError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except (argparse.ArgumentTypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
