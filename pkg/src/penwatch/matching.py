"""Greedy one-to-one pairing of ground-truth birds with predictions.

Ground truths are visited in annotation order.  Each takes the still-unused
prediction with the highest IoU among those whose IoU is strictly above
``alpha``; ties go to the lowest prediction index.  Scores play no part.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .geometry import (
    DEFAULT_RESOLUTION,
    BBox,
    Polygon8,
    bbox_iou_matrix,
    bbox_to_polygon,
    polygon_iou,
    polygon_to_bbox,
)
from .schema import Bird, FrameAnnotation, Prediction

__all__ = [
    "MatchMode",
    "MatchConfig",
    "MatchResult",
    "DatasetMatch",
    "pairwise_iou",
    "greedy_match",
    "match_frame",
    "match_dataset",
    "group_predictions",
]


class MatchMode(str, Enum):
    BBOX = "bbox"
    SEGM = "segm"


@dataclass(frozen=True)
class MatchConfig:
    alpha: float = 0.5
    mode: MatchMode = MatchMode.BBOX
    gt_order: str = "annotation"
    tie_break: str = "lowest_prediction_index"
    resolution: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        object.__setattr__(self, "mode", MatchMode(self.mode))
        if self.gt_order != "annotation":
            raise ValueError(f"unsupported gt_order {self.gt_order!r}")
        if self.tie_break != "lowest_prediction_index":
            raise ValueError(f"unsupported tie_break {self.tie_break!r}")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_gt: list[int] = field(default_factory=list)
    unmatched_pred: list[int] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)


Geometry = Union[Polygon8, BBox, Bird]


def _gt_geometry(g: Geometry):
    if isinstance(g, Bird):
        if g.polygon is None:
            raise ValueError(f"bird {g.bird_id} has no usable outline")
        return g.polygon
    return g


def _as_box(g) -> list[float]:
    if isinstance(g, Prediction):
        return g.bbox.as_list()
    if isinstance(g, BBox):
        return g.as_list()
    return polygon_to_bbox(g).as_list()


def _as_polygon(g) -> Polygon8:
    if isinstance(g, Prediction):
        return g.polygon if g.polygon is not None else bbox_to_polygon(g.bbox)
    if isinstance(g, BBox):
        return bbox_to_polygon(g)
    return g


def pairwise_iou(
    gts: Sequence[Geometry],
    preds: Sequence[Union[Prediction, Polygon8, BBox]],
    mode=MatchMode.BBOX,
    resolution: int = DEFAULT_RESOLUTION,
) -> np.ndarray:
    """IoU matrix of shape ``(len(gts), len(preds))``.

    Box-only predictions are treated as rectangles in segmentation mode.
    """
    mode = MatchMode(mode)
    gts = [_gt_geometry(g) for g in gts]
    if mode is MatchMode.BBOX:
        return bbox_iou_matrix([_as_box(g) for g in gts], [_as_box(p) for p in preds])
    out = np.zeros((len(gts), len(preds)))
    if not gts or not preds:
        return out
    boxes = bbox_iou_matrix([_as_box(g) for g in gts], [_as_box(p) for p in preds])
    gpolys = [_as_polygon(g) for g in gts]
    ppolys = [_as_polygon(p) for p in preds]
    for i, j in zip(*np.nonzero(boxes > 0)):
        out[i, j] = polygon_iou(gpolys[i], ppolys[j], resolution=resolution)
    return out


def greedy_match(iou: np.ndarray, alpha: float) -> MatchResult:
    """Pair rows (ground truths) with columns (predictions) greedily in row order."""
    iou = np.asarray(iou, dtype=float)
    n_gt, n_pred = iou.shape
    used = np.zeros(n_pred, dtype=bool)
    res = MatchResult()
    for i in range(n_gt):
        if n_pred == 0:
            res.unmatched_gt.append(i)
            continue
        row = np.where(used, -np.inf, iou[i])
        j = int(np.argmax(row))  # first maximum, i.e. lowest index on ties
        if row[j] > alpha:
            used[j] = True
            res.pairs.append((i, j, float(iou[i, j])))
        else:
            res.unmatched_gt.append(i)
    res.unmatched_pred = [int(j) for j in np.nonzero(~used)[0]]
    return res


def match_frame(gt: Sequence[Geometry], preds: Sequence[Prediction], cfg: MatchConfig) -> MatchResult:
    iou = pairwise_iou(gt, preds, cfg.mode, cfg.resolution)
    return greedy_match(iou, cfg.alpha)


def group_predictions(preds: Iterable[Prediction]) -> dict[tuple[str, int], list[Prediction]]:
    """Bucket predictions by frame key, keeping file order inside each frame."""
    out: dict[tuple[str, int], list[Prediction]] = {}
    for p in preds:
        out.setdefault(p.key, []).append(p)
    return out


@dataclass
class DatasetMatch:
    results: dict[tuple[str, int], MatchResult]
    predictions: dict[tuple[str, int], list[Prediction]]
    unknown_frames: list[tuple[str, int]]

    @property
    def tp(self) -> int:
        return sum(r.tp for r in self.results.values())

    @property
    def fp(self) -> int:
        return sum(r.fp for r in self.results.values())

    @property
    def fn(self) -> int:
        return sum(r.fn for r in self.results.values())


def _map(fn, items, n_jobs: Optional[int]):
    if n_jobs is None or n_jobs == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=None if n_jobs < 0 else n_jobs) as ex:
        return list(ex.map(fn, items))


def match_dataset(
    frames: Sequence[FrameAnnotation],
    predictions: Iterable[Prediction],
    cfg: MatchConfig,
    n_jobs: Optional[int] = 1,
    iou_cache: Optional[dict] = None,
) -> DatasetMatch:
    """Run :func:`match_frame` on every annotated frame.

    Predictions for frames missing from ``frames`` are not matched; their
    keys are listed in ``unknown_frames``.  ``n_jobs=-1`` uses all cores;
    output order is always ``(video, frame)``.  Passing the same
    ``iou_cache`` dict to several calls with one mode reuses IoU matrices
    across thresholds.
    """
    grouped = group_predictions(predictions)
    ordered = sorted(frames, key=lambda f: f.key)
    known = {f.key for f in ordered}

    def iou(frame):
        return pairwise_iou(frame.gt_birds(), grouped.get(frame.key, []), cfg.mode, cfg.resolution)

    if iou_cache is None:
        mats = _map(iou, ordered, n_jobs)
    else:
        todo = [f for f in ordered if (cfg.mode, f.key) not in iou_cache]
        for f, m in zip(todo, _map(iou, todo, n_jobs)):
            iou_cache[(cfg.mode, f.key)] = m
        mats = [iou_cache[(cfg.mode, f.key)] for f in ordered]
    results = [greedy_match(m, cfg.alpha) for m in mats]
    return DatasetMatch(
        results={f.key: r for f, r in zip(ordered, results)},
        predictions={f.key: grouped.get(f.key, []) for f in ordered},
        unknown_frames=sorted(k for k in grouped if k not in known),
    )
