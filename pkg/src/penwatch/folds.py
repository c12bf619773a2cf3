"""Video-grouped k-fold cross-validation.

Whole videos are the grouping unit so adjacent frames of one clip never end
up on both sides of a split.  Without a seed, folds are contiguous blocks in
manifest order; block sizes differ by at most one, larger blocks first.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .schema import DatasetManifest, FrameAnnotation, Prediction

__all__ = [
    "InvalidFoldCount",
    "FoldSpec",
    "make_folds",
    "VideoKFold",
    "FoldEvaluation",
    "fold_evaluate",
    "mean_metrics",
]


class InvalidFoldCount(ValueError):
    pass


@dataclass(frozen=True)
class FoldSpec:
    camera_id: int
    k: int
    folds: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]  # (test, train) per fold
    seed: Optional[int] = None

    def test_sets(self) -> list[tuple[str, ...]]:
        return [t for t, _ in self.folds]

    def to_dict(self) -> dict:
        return {
            "camera_id": self.camera_id,
            "k": self.k,
            "seed": self.seed,
            "folds": [{"fold": i + 1, "test": list(t), "train": list(tr)} for i, (t, tr) in enumerate(self.folds)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSpec":
        folds = tuple((tuple(f["test"]), tuple(f["train"])) for f in d["folds"])
        return cls(d["camera_id"], d["k"], folds, d.get("seed"))


def _blocks(videos: Sequence[str], k: int) -> list[list[str]]:
    n = len(videos)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    out, start = [], 0
    for s in sizes:
        out.append(list(videos[start : start + s]))
        start += s
    return out


def make_folds(manifest: DatasetManifest, k: int = 5, seed: Optional[int] = None) -> FoldSpec:
    videos = list(manifest.video_ids)
    if k < 2:
        raise InvalidFoldCount(f"k must be at least 2, got {k}")
    if k > len(videos):
        raise InvalidFoldCount(f"k={k} exceeds the {len(videos)} videos in the manifest")
    if seed is None:
        blocks = _blocks(videos, k)
    else:
        order = np.random.default_rng(seed).permutation(len(videos))
        rank = {v: i for i, v in enumerate(videos)}
        blocks = [sorted(b, key=rank.__getitem__) for b in _blocks([videos[i] for i in order], k)]
    folds = []
    for b in blocks:
        test = set(b)
        folds.append((tuple(b), tuple(v for v in videos if v not in test)))
    return FoldSpec(manifest.camera_id, k, tuple(folds), seed)


class VideoKFold:
    """Cross-validation splitter over frames grouped by video.

    Usable wherever scikit-learn accepts a ``cv`` object: ``split`` takes
    the per-sample video ids as ``groups`` and yields index arrays.
    """

    def __init__(self, n_splits: int = 5, seed: Optional[int] = None):
        self.n_splits = n_splits
        self.seed = seed

    def get_params(self, deep: bool = True) -> dict:
        return {"n_splits": self.n_splits, "seed": self.seed}

    def set_params(self, **params) -> "VideoKFold":
        for k, v in params.items():
            if k not in ("n_splits", "seed"):
                raise ValueError(f"invalid parameter {k!r}")
            setattr(self, k, v)
        return self

    def get_n_splits(self, X=None, y=None, groups=None) -> int:
        return self.n_splits

    def split(self, X, y=None, groups=None):
        if groups is None:
            raise ValueError("VideoKFold needs the video id of every sample as groups")
        groups = np.asarray([str(g) for g in groups], dtype=object)
        videos = list(dict.fromkeys(groups.tolist()))
        manifest = DatasetManifest(camera_id=1, video_ids=videos, frame_width=1, frame_height=1)
        spec = make_folds(manifest, self.n_splits, self.seed)
        for test, _ in spec.folds:
            mask = np.isin(groups, list(test))
            yield np.nonzero(~mask)[0], np.nonzero(mask)[0]

    def __repr__(self) -> str:
        return f"VideoKFold(n_splits={self.n_splits}, seed={self.seed})"


def mean_metrics(reports: Iterable[Mapping[str, float]]) -> dict[str, float]:
    """Unweighted mean of each metric over the reports that carry it."""
    reports = list(reports)
    keys = list(dict.fromkeys(k for r in reports for k in r))
    out = {}
    for k in keys:
        vals = [float(r[k]) for r in reports if k in r]
        out[k] = sum(vals) / len(vals)
    return out


@dataclass
class FoldEvaluation:
    camera_id: int
    per_fold: dict[int, dict]  # fold number (1-based) -> metric summary
    mean: dict[str, float]
    incomplete: bool = False
    missing: list[int] = field(default_factory=list)
    reports: dict[int, object] = field(default_factory=dict, repr=False)


def fold_evaluate(
    spec: FoldSpec,
    frames: Sequence[FrameAnnotation],
    predictions_per_fold: Mapping[int, Optional[Sequence[Prediction]]],
    alphas: Iterable[float] = (0.1, 0.5, 0.75),
    mode="bbox",
    **report_kw,
) -> FoldEvaluation:
    """Evaluate each fold on its test videos and average across folds.

    ``predictions_per_fold`` is keyed by 1-based fold number.  Folds with no
    entry (or ``None``) are reported missing and the mean covers the rest.
    """
    from .report import build_report

    alphas = list(alphas)
    per_fold, reports, missing = {}, {}, []
    for i, (test, _) in enumerate(spec.folds, start=1):
        preds = predictions_per_fold.get(i)
        if preds is None:
            missing.append(i)
            continue
        test_set = set(test)
        fold_frames = [f for f in frames if f.video_id in test_set]
        fold_preds = [p for p in preds if p.video_id in test_set]
        rep = build_report(fold_frames, fold_preds, alphas=alphas, mode=mode, **report_kw)
        reports[i] = rep
        per_fold[i] = rep.summary()
    if missing:
        warnings.warn(f"folds {missing} have no predictions; averaging over {len(per_fold)} folds")
    return FoldEvaluation(
        camera_id=spec.camera_id,
        per_fold=per_fold,
        mean=mean_metrics(per_fold.values()),
        incomplete=bool(missing),
        missing=missing,
        reports=reports,
    )
