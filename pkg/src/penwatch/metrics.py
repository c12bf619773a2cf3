"""Detection and classification metrics.

Detection AP follows the COCO protocol: predictions are ranked by
descending score, each one is greedily matched (IoU strictly above the
threshold) to the best still-unused ground truth in its frame, and the
precision envelope is sampled at 101 recall points.  An all-point
interpolation is kept for cross-checking only.

Classification metrics are computed from a confusion matrix.  A class with
no true positives, no false positives and no false negatives scores F1 = 0
and still counts towards the macro average.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .geometry import DEFAULT_RESOLUTION
from .matching import DatasetMatch, MatchMode, group_predictions, pairwise_iou
from .schema import (
    Behavior,
    BinaryPosture,
    Bird,
    FrameAnnotation,
    Posture,
    Prediction,
    SchemaError,
)

__all__ = [
    "EmptyGroundTruth",
    "EmptyInput",
    "COCO_THRESHOLDS",
    "RECALL_SAMPLES",
    "PRCurve",
    "APResult",
    "ConfusionMatrix",
    "ClassificationReport",
    "detection_pr",
    "average_precision",
    "rank_detections",
    "coco_evaluate",
    "confusion",
    "classification_report",
    "classifier_pr",
    "classifier_pr_curve",
    "posture_binarize",
    "paired_labels",
    "BEHAVIOR_CLASSES",
    "BINARY_POSTURE_CLASSES",
]

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# i / 100 rather than linspace: both this and tp / n_gt are correctly rounded
# quotients, so a recall of exactly 0.7 is not skipped by the 0.70 sample
RECALL_SAMPLES = np.arange(101) / 100

BEHAVIOR_CLASSES = tuple(b.value for b in Behavior)
BINARY_POSTURE_CLASSES = tuple(p.value for p in BinaryPosture)


class EmptyGroundTruth(ValueError):
    """No positive ground truth to measure recall against."""


class EmptyInput(ValueError):
    """Nothing to compute a metric from."""


@dataclass
class PRCurve:
    """Points ``(recall, precision, score_threshold)`` with recall non-decreasing."""

    points: list[tuple[float, float, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def recall(self) -> np.ndarray:
        return np.array([p[0] for p in self.points], dtype=float)

    @property
    def precision(self) -> np.ndarray:
        return np.array([p[1] for p in self.points], dtype=float)

    @property
    def thresholds(self) -> np.ndarray:
        return np.array([p[2] for p in self.points], dtype=float)


def _sweep(scores: np.ndarray, hits: np.ndarray, n_pos: int) -> PRCurve:
    """Cumulate hits in descending-score order; one point per distinct score."""
    if len(scores) == 0:
        return PRCurve()
    order = np.argsort(-scores, kind="mergesort")
    s, h = scores[order], hits[order].astype(np.int64)
    tp = np.cumsum(h)
    fp = np.cumsum(1 - h)
    last = np.append(s[1:] != s[:-1], True)  # end of each tie group
    recall = tp[last] / n_pos
    precision = tp[last] / (tp[last] + fp[last])
    return PRCurve([(float(r), float(p), float(t)) for r, p, t in zip(recall, precision, s[last])])


def detection_pr(ranked: Iterable[tuple[float, bool]], total_gt: int) -> PRCurve:
    """PR curve from ``(score, is_true_positive)`` detections."""
    if total_gt <= 0:
        raise EmptyGroundTruth("no ground truth to measure recall against")
    ranked = list(ranked)
    scores = np.array([r[0] for r in ranked], dtype=float)
    hits = np.array([bool(r[1]) for r in ranked], dtype=bool)
    return _sweep(scores, hits, total_gt)


def average_precision(curve: PRCurve, method: str = "coco101") -> float:
    """Area under the precision envelope.

    ``"coco101"`` samples the envelope at recall 0.00, 0.01, ..., 1.00 (a
    sample past the last reached recall scores zero).  ``"all_point"``
    integrates the envelope exactly; use it for cross-checks only.
    """
    if len(curve) == 0:
        return 0.0
    rec, prec = curve.recall, curve.precision
    env = np.maximum.accumulate(prec[::-1])[::-1]
    if method == "coco101":
        idx = np.searchsorted(rec, RECALL_SAMPLES, side="left")
        q = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
        return float(np.mean(q))
    if method == "all_point":
        steps = np.diff(np.concatenate([[0.0], rec]))
        return float(np.sum(steps * env))
    raise ValueError(f"unknown AP method {method!r}")


# -- ranked detection -------------------------------------------------------


def _ranked_frame(iou: np.ndarray, scores: np.ndarray, alpha: float) -> np.ndarray:
    """TP flags for one frame's detections under descending-score matching."""
    n_gt, n_det = iou.shape
    hits = np.zeros(n_det, dtype=bool)
    if n_gt == 0 or n_det == 0:
        return hits
    used = np.zeros(n_gt, dtype=bool)
    for d in np.argsort(-scores, kind="mergesort"):
        col = np.where(used, -np.inf, iou[:, d])
        g = int(np.argmax(col))
        if col[g] > alpha:
            used[g] = True
            hits[d] = True
    return hits


@dataclass
class _FrameData:
    key: tuple
    gt_labels: list
    preds: list
    iou: np.ndarray


def _prepare(frames, predictions, mode, resolution) -> tuple[list[_FrameData], list]:
    grouped = group_predictions(predictions)
    out = []
    for f in sorted(frames, key=lambda f: f.key):
        gts = f.gt_birds()
        preds = grouped.get(f.key, [])
        out.append(_FrameData(f.key, gts, preds, pairwise_iou(gts, preds, mode, resolution)))
    known = {f.key for f in frames}
    return out, sorted(k for k in grouped if k not in known)


def rank_detections(frame_data: Sequence[_FrameData], alpha: float, gt_mask=None, pred_mask=None):
    """Collect ``(score, is_tp)`` for every detection at one IoU threshold."""
    ranked = []
    total_gt = 0
    for k, fd in enumerate(frame_data):
        gi = np.arange(len(fd.gt_labels)) if gt_mask is None else np.nonzero(gt_mask[k])[0]
        pi = np.arange(len(fd.preds)) if pred_mask is None else np.nonzero(pred_mask[k])[0]
        total_gt += len(gi)
        if len(pi) == 0:
            continue
        scores = np.array([fd.preds[j].score for j in pi], dtype=float)
        hits = _ranked_frame(fd.iou[np.ix_(gi, pi)], scores, alpha)
        ranked.extend(zip(scores.tolist(), hits.tolist()))
    return ranked, total_gt


@dataclass
class APResult:
    per_threshold: dict[float, float]
    coco_map: float
    mode: str
    curves: dict[float, PRCurve] = field(default_factory=dict, repr=False)
    per_class: dict[str, dict[float, float]] = field(default_factory=dict)
    total_gt: int = 0
    unknown_frames: list = field(default_factory=list)


def _gt_label(bird: Bird, kind: str) -> Optional[str]:
    if kind == "behavior":
        return bird.behavior.value if bird.behavior is not None else None
    if kind == "posture":
        return bird.posture.binary.value if bird.posture is not None else None
    raise ValueError(f"unknown label kind {kind!r}")


def _pred_label(label: str, kind: str) -> Optional[str]:
    if kind == "behavior":
        return label if label in BEHAVIOR_CLASSES else None
    if label in ("WLK", "SIT", "STD", "STN"):
        return posture_binarize([label])[0]
    return None


def coco_evaluate(
    frames: Sequence[FrameAnnotation],
    predictions: Sequence[Prediction],
    mode="bbox",
    alphas: Iterable[float] = (),
    resolution: int = DEFAULT_RESOLUTION,
    per_class: Optional[str] = None,
) -> APResult:
    """Per-threshold AP and the mean over the ten COCO thresholds.

    ``alphas`` adds thresholds beyond 0.50:0.05:0.95; they are reported but
    do not enter ``coco_map``.  ``per_class`` ("behavior" or "posture")
    additionally evaluates each class with ground-truth support separately.
    """
    mode = MatchMode(mode)
    data, unknown = _prepare(frames, predictions, mode, resolution)
    thresholds = list(COCO_THRESHOLDS) + sorted({float(a) for a in alphas} - set(COCO_THRESHOLDS))
    per, curves = {}, {}
    total = 0
    for a in thresholds:
        ranked, total = rank_detections(data, a)
        curve = detection_pr(ranked, total)
        curves[a] = curve
        per[a] = average_precision(curve)
    coco_map = float(sum(per[a] for a in COCO_THRESHOLDS) / len(COCO_THRESHOLDS))

    by_class: dict[str, dict[float, float]] = {}
    if per_class:
        gl = [[_gt_label(b, per_class) for b in fd.gt_labels] for fd in data]
        pl = [[_pred_label(p.label, per_class) for p in fd.preds] for fd in data]
        present = sorted({x for row in gl for x in row if x is not None})
        for c in present:
            gm = [np.array([x == c for x in row], dtype=bool) for row in gl]
            pm = [np.array([x == c for x in row], dtype=bool) for row in pl]
            by_class[c] = {}
            for a in thresholds:
                ranked, n = rank_detections(data, a, gm, pm)
                by_class[c][a] = average_precision(detection_pr(ranked, n))
    return APResult(per, coco_map, mode.value, curves, by_class, total, unknown)


# -- classification ---------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """``counts[i, j]``: samples of true class ``i`` predicted as ``j``."""

    classes: tuple[str, ...]
    counts: np.ndarray

    @property
    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_rows(self) -> list[list]:
        return [[c, *map(int, row)] for c, row in zip(self.classes, self.counts)]


def confusion(gt_labels: Sequence, pred_labels: Sequence, classes: Sequence[str]) -> ConfusionMatrix:
    gt = [getattr(x, "value", x) for x in gt_labels]
    pr = [getattr(x, "value", x) for x in pred_labels]
    if len(gt) != len(pr):
        raise ValueError("label sequences differ in length")
    classes = tuple(getattr(c, "value", c) for c in classes)
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for g, p in zip(gt, pr):
        if g not in index or p not in index:
            bad = g if g not in index else p
            raise SchemaError(f"label {bad!r} not among classes {list(classes)}")
        counts[index[g], index[p]] += 1
    return ConfusionMatrix(classes, counts)


@dataclass
class ClassificationReport:
    accuracy: float
    per_class_f1: dict[str, float]
    per_class_precision: dict[str, float]
    per_class_recall: dict[str, float]
    macro_f1: float
    weighted_f1: float
    supports: dict[str, int]


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def classification_report(cm: ConfusionMatrix) -> ClassificationReport:
    c = np.asarray(cm.counts, dtype=np.int64)
    total = int(c.sum())
    if total == 0 or c.size == 0:
        raise EmptyInput("confusion matrix holds no samples")
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    support = c.sum(axis=1)
    f1 = {k: _ratio(2 * tp[i], 2 * tp[i] + fp[i] + fn[i]) for i, k in enumerate(cm.classes)}
    prec = {k: _ratio(tp[i], tp[i] + fp[i]) for i, k in enumerate(cm.classes)}
    rec = {k: _ratio(tp[i], support[i]) for i, k in enumerate(cm.classes)}
    vals = [f1[k] for k in cm.classes]
    return ClassificationReport(
        accuracy=_ratio(int(tp.sum()), total),
        per_class_f1=f1,
        per_class_precision=prec,
        per_class_recall=rec,
        macro_f1=float(sum(vals) / len(vals)),
        weighted_f1=float(sum(v * int(s) for v, s in zip(vals, support)) / total),
        supports={k: int(support[i]) for i, k in enumerate(cm.classes)},
    )


def classifier_pr_curve(scores: Sequence[float], positives: Sequence[bool]) -> PRCurve:
    """One-vs-rest sweep: predict positive when score >= threshold."""
    s = np.asarray(scores, dtype=float)
    pos = np.asarray(positives, dtype=bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise EmptyGroundTruth("class has no positive samples")
    return _sweep(s, pos, n_pos)


def classifier_pr(
    scores,
    gt_labels: Sequence,
    classes: Sequence[str],
    requested: Optional[Iterable[str]] = None,
    on_empty: str = "skip",
) -> dict[str, PRCurve]:
    """Per-class PR curves from an ``(n_samples, n_classes)`` score array.

    ``scores`` may also be a mapping ``class -> scores``.  Classes without
    positives are skipped, or raise :class:`EmptyGroundTruth` when
    ``on_empty="raise"``.
    """
    classes = [getattr(c, "value", c) for c in classes]
    gt = np.array([getattr(x, "value", x) for x in gt_labels], dtype=object)
    if isinstance(scores, Mapping):
        cols = {getattr(k, "value", k): np.asarray(v, dtype=float) for k, v in scores.items()}
    else:
        arr = np.asarray(scores, dtype=float).reshape(len(gt), len(classes))
        cols = {c: arr[:, i] for i, c in enumerate(classes)}
    out = {}
    for c in (classes if requested is None else [getattr(r, "value", r) for r in requested]):
        s = cols[c]
        if np.any((s < 0) | (s > 1)):
            raise ValueError(f"scores for {c} outside [0, 1]")
        try:
            out[c] = classifier_pr_curve(s, gt == c)
        except EmptyGroundTruth:
            if on_empty == "raise":
                raise EmptyGroundTruth(f"class {c} has no positive samples") from None
    return out


def posture_binarize(labels: Iterable) -> list[str]:
    """Collapse sitting/standing to stationary; walking stays walking."""
    out = []
    for x in labels:
        v = getattr(x, "value", x)
        if v in (Posture.SITTING.value, Posture.STANDING.value, BinaryPosture.STATIONARY.value):
            out.append(BinaryPosture.STATIONARY.value)
        elif v == Posture.WALKING.value:
            out.append(BinaryPosture.WALKING.value)
        else:
            raise SchemaError(f"{v!r} is not a posture label")
    return out


def paired_labels(
    frames: Sequence[FrameAnnotation], dm: DatasetMatch, kind: str = "behavior"
) -> tuple[list[str], list[str], list[Prediction]]:
    """Ground-truth and predicted labels over matched pairs.

    Pairs whose prediction carries no label of the requested kind, or whose
    bird has no posture (``kind="posture"``), are left out.
    """
    by_key = {f.key: f for f in frames}
    gts, prs, used = [], [], []
    for key, res in dm.results.items():
        birds = by_key[key].gt_birds()
        preds = dm.predictions[key]
        for gi, pj, _ in res.pairs:
            g = _gt_label(birds[gi], kind)
            p = _pred_label(preds[pj].label, kind)
            if g is None or p is None:
                continue
            gts.append(g)
            prs.append(p)
            used.append(preds[pj])
    return gts, prs, used
