"""Assemble and serialize metric reports.

A report holds detection AP per IoU threshold, greedy-match TP/FP/FN counts,
behaviour and binary-posture classification on matched pairs, and PR curve
data.  Serialized ratios are rounded to four decimals; nothing in a report
depends on the clock.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .geometry import DEFAULT_RESOLUTION
from .matching import MatchConfig, match_dataset
from .metrics import (
    BEHAVIOR_CLASSES,
    BINARY_POSTURE_CLASSES,
    COCO_THRESHOLDS,
    APResult,
    ClassificationReport,
    ConfusionMatrix,
    PRCurve,
    classification_report,
    classifier_pr,
    coco_evaluate,
    confusion,
    paired_labels,
)
from .schema import FrameAnnotation, Prediction

__all__ = ["MetricReport", "build_report", "fmt_alpha", "rounded", "csv_bytes"]

DECIMALS = 4


def fmt_alpha(a: float) -> str:
    return f"{a:.2f}"


def rounded(obj, nd: int = DECIMALS):
    if isinstance(obj, float):
        return round(obj, nd)
    if isinstance(obj, dict):
        return {k: rounded(v, nd) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [rounded(v, nd) for v in obj]
    return obj


def csv_bytes(header: Sequence[str], rows: Iterable[Sequence]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.{DECIMALS}f}" if isinstance(v, float) else v for v in r])
    return buf.getvalue().encode("utf-8")


@dataclass
class ClassBlock:
    cm: ConfusionMatrix
    report: ClassificationReport
    pr: dict[str, PRCurve] = field(default_factory=dict)


@dataclass
class MetricReport:
    mode: str
    alphas: list[float]
    ap: APResult
    counts: dict[float, dict[str, int]]
    class_alpha: float
    classification: dict[str, ClassBlock]
    unknown_frames: list

    def summary(self) -> dict[str, float]:
        out = {f"AP@{fmt_alpha(a)}": v for a, v in self.ap.per_threshold.items()}
        out["mAP@[.50:.95]"] = self.ap.coco_map
        for kind, blk in self.classification.items():
            out[f"{kind}.accuracy"] = blk.report.accuracy
            out[f"{kind}.weighted_f1"] = blk.report.weighted_f1
            out[f"{kind}.macro_f1"] = blk.report.macro_f1
            for c, v in blk.report.per_class_f1.items():
                out[f"{kind}.f1.{c}"] = v
        return out

    def to_dict(self) -> dict:
        doc = {
            "mode": self.mode,
            "total_gt": self.ap.total_gt,
            "ap": {
                "per_threshold": {fmt_alpha(a): v for a, v in sorted(self.ap.per_threshold.items())},
                "coco_thresholds": [fmt_alpha(a) for a in COCO_THRESHOLDS],
                "coco_map": self.ap.coco_map,
                "requested": {fmt_alpha(a): self.ap.per_threshold[a] for a in self.alphas},
            },
            "matching": {fmt_alpha(a): c for a, c in sorted(self.counts.items())},
            "class_alpha": fmt_alpha(self.class_alpha),
            "classification": {},
            "unknown_prediction_frames": [[v, f] for v, f in self.unknown_frames],
        }
        if self.ap.per_class:
            doc["ap"]["per_class"] = {
                c: {fmt_alpha(a): v for a, v in sorted(d.items())} for c, d in self.ap.per_class.items()
            }
        for kind, blk in self.classification.items():
            r = blk.report
            doc["classification"][kind] = {
                "classes": list(blk.cm.classes),
                "confusion": blk.cm.counts.tolist(),
                "accuracy": r.accuracy,
                "weighted_f1": r.weighted_f1,
                "macro_f1": r.macro_f1,
                "per_class": {
                    c: {
                        "support": r.supports[c],
                        "precision": r.per_class_precision[c],
                        "recall": r.per_class_recall[c],
                        "f1": r.per_class_f1[c],
                    }
                    for c in blk.cm.classes
                },
            }
        return rounded(doc)

    def files(self) -> dict[str, bytes]:
        """Every output file of the report, name -> bytes."""
        out = {"report.json": (json.dumps(self.to_dict(), indent=2) + "\n").encode("utf-8")}
        thresholds = sorted(self.ap.per_threshold)
        out["ap.csv"] = csv_bytes(
            ["alpha", "ap", "tp", "fp", "fn"],
            [
                [fmt_alpha(a), self.ap.per_threshold[a], *self._counts_row(a)]
                for a in thresholds
            ]
            + [["coco_map", self.ap.coco_map, "", "", ""]],
        )
        for a in self.alphas:
            curve = self.ap.curves[a]
            out[f"pr_detection_{fmt_alpha(a)}.csv"] = csv_bytes(
                ["threshold", "recall", "precision"],
                [[t, r, p] for r, p, t in curve.points],
            )
        for kind, blk in self.classification.items():
            r = blk.report
            out[f"classwise_{kind}.csv"] = csv_bytes(
                ["class", "support", "precision", "recall", "f1"],
                [[c, r.supports[c], r.per_class_precision[c], r.per_class_recall[c], r.per_class_f1[c]]
                 for c in blk.cm.classes]
                + [["accuracy", sum(r.supports.values()), "", "", r.accuracy],
                   ["macro_f1", "", "", "", r.macro_f1],
                   ["weighted_f1", "", "", "", r.weighted_f1]],
            )
            out[f"confusion_{kind}.csv"] = csv_bytes(["gt\\pred", *blk.cm.classes], blk.cm.to_rows())
            for c, curve in blk.pr.items():
                out[f"pr_{kind}_{c}.csv"] = csv_bytes(
                    ["threshold", "recall", "precision"], [[t, rr, p] for rr, p, t in curve.points]
                )
        return out

    def _counts_row(self, a):
        c = self.counts.get(a)
        return [c["tp"], c["fp"], c["fn"]] if c else ["", "", ""]

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name, data in sorted(self.files().items()):
            p = out_dir / name
            p.write_bytes(data)
            written.append(p)
        return written


def _class_block(frames, dm, kind, classes) -> Optional[ClassBlock]:
    gts, prs, used = paired_labels(frames, dm, kind)
    if not gts:
        return None
    cm = confusion(gts, prs, classes)
    blk = ClassBlock(cm, classification_report(cm))
    scored = [(g, p) for g, p in zip(gts, used) if p.class_scores is not None]
    if kind == "behavior" and scored:
        cols = {c: [dict(p.class_scores).get(c, 0.0) for _, p in scored] for c in classes}
        blk.pr = classifier_pr(cols, [g for g, _ in scored], classes)
    return blk


def build_report(
    frames: Sequence[FrameAnnotation],
    predictions: Sequence[Prediction],
    alphas: Iterable[float] = (0.1, 0.5, 0.75),
    mode="bbox",
    class_alpha: float = 0.5,
    resolution: int = DEFAULT_RESOLUTION,
    per_class: Optional[str] = None,
    n_jobs: Optional[int] = 1,
) -> MetricReport:
    alphas = sorted({float(a) for a in alphas})
    for a in alphas + [class_alpha]:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"IoU threshold {a} outside [0, 1]")
    ap = coco_evaluate(frames, predictions, mode, alphas, resolution, per_class)
    cache: dict = {}
    counts = {}
    dms = {}
    for a in sorted(set(alphas) | {class_alpha}):
        dm = match_dataset(frames, predictions, MatchConfig(a, mode, resolution=resolution),
                           n_jobs=n_jobs, iou_cache=cache)
        dms[a] = dm
        if a in alphas:
            counts[a] = {"tp": dm.tp, "fp": dm.fp, "fn": dm.fn}
    classification = {}
    for kind, classes in (("behavior", BEHAVIOR_CLASSES), ("posture", BINARY_POSTURE_CLASSES)):
        blk = _class_block(frames, dms[class_alpha], kind, classes)
        if blk is not None:
            classification[kind] = blk
    return MetricReport(
        mode=ap.mode,
        alphas=alphas,
        ap=ap,
        counts=counts,
        class_alpha=class_alpha,
        classification=classification,
        unknown_frames=ap.unknown_frames,
    )
