"""Group behaviour budgets over frame windows and threshold rules on them.

A budget is the share of visible bird-frames spent in each behaviour within
a window of frames.  Birds marked not visible are left out of every
denominator.  Thresholds and window lengths are configuration; the defaults
here (300-frame windows, a rule needing one full window) are arbitrary.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .metrics import BEHAVIOR_CLASSES, BINARY_POSTURE_CLASSES, EmptyInput
from .report import csv_bytes, rounded
from .schema import FrameAnnotation

__all__ = [
    "DEFAULT_WINDOW",
    "BehaviorBudget",
    "WelfareRule",
    "Flag",
    "behavior_budget",
    "sliding_budgets",
    "combine_budgets",
    "evaluate_rules",
    "parse_rule",
    "budgets_csv",
    "flags_json",
]

DEFAULT_WINDOW = 300


@dataclass(frozen=True)
class BehaviorBudget:
    window: tuple[int, int]  # [start, end) frame indices
    fractions: dict[str, float]
    posture_fractions: dict[str, float]
    visible_count_mean: float
    n_frames: int
    support: int  # visible bird-frames with a behaviour
    posture_support: int
    video_id: Optional[str] = None

    @property
    def counts(self) -> dict[str, int]:
        return {k: round(v * self.support) for k, v in self.fractions.items()}


def _single_video(frames: Sequence[FrameAnnotation], video_id: Optional[str]) -> list[FrameAnnotation]:
    if video_id is not None:
        return [f for f in frames if f.video_id == video_id]
    videos = {f.video_id for f in frames}
    if len(videos) > 1:
        raise ValueError(f"frames span several videos {sorted(videos)}; pass video_id")
    return list(frames)


def _budget(frames: Sequence[FrameAnnotation], window, video_id) -> BehaviorBudget:
    b_counts = dict.fromkeys(BEHAVIOR_CLASSES, 0)
    p_counts = dict.fromkeys(BINARY_POSTURE_CLASSES, 0)
    visible = 0
    for f in frames:
        for b in f.birds:
            if not b.visible:
                continue
            visible += 1
            if b.behavior is not None:
                b_counts[b.behavior.value] += 1
            if b.posture is not None:
                p_counts[b.posture.binary.value] += 1
    support = sum(b_counts.values())
    p_support = sum(p_counts.values())
    return BehaviorBudget(
        window=window,
        fractions={k: v / support if support else 0.0 for k, v in b_counts.items()},
        posture_fractions={k: v / p_support if p_support else 0.0 for k, v in p_counts.items()},
        visible_count_mean=visible / len(frames),
        n_frames=len(frames),
        support=support,
        posture_support=p_support,
        video_id=video_id,
    )


def behavior_budget(
    frames: Sequence[FrameAnnotation], window: tuple[int, int], video_id: Optional[str] = None
) -> BehaviorBudget:
    """Budget over frames with ``start <= frame_index < end``."""
    frames = _single_video(frames, video_id)
    start, end = window
    inside = [f for f in frames if start <= f.frame_index < end]
    if not inside:
        raise EmptyInput(f"no annotated frames in window [{start}, {end})")
    vid = video_id if video_id is not None else inside[0].video_id
    return _budget(inside, (start, end), vid)


def sliding_budgets(
    frames: Sequence[FrameAnnotation],
    window: int = DEFAULT_WINDOW,
    step: Optional[int] = None,
    video_id: Optional[str] = None,
) -> list[BehaviorBudget]:
    """Budgets on uniform windows from the first annotated frame onward.

    The last window may be cut short by the end of the data.  Windows with
    no annotated frames are skipped.
    """
    if window < 1:
        raise ValueError("window must be at least one frame")
    step = window if step is None else step
    if step < 1:
        raise ValueError("step must be at least one frame")
    frames = sorted(_single_video(frames, video_id), key=lambda f: f.frame_index)
    if not frames:
        raise EmptyInput("no frames")
    first, last = frames[0].frame_index, frames[-1].frame_index
    vid = frames[0].video_id
    out = []
    start = first
    while start <= last:
        end = min(start + window, last + 1)
        inside = [f for f in frames if start <= f.frame_index < end]
        if inside:
            out.append(_budget(inside, (start, end), vid))
        if end > last:
            break
        start += step
    return out


def combine_budgets(budgets: Iterable[BehaviorBudget]) -> BehaviorBudget:
    """Support-weighted merge of budgets over disjoint windows."""
    budgets = list(budgets)
    if not budgets:
        raise EmptyInput("no budgets to combine")
    support = sum(b.support for b in budgets)
    p_support = sum(b.posture_support for b in budgets)
    n_frames = sum(b.n_frames for b in budgets)
    return BehaviorBudget(
        window=(min(b.window[0] for b in budgets), max(b.window[1] for b in budgets)),
        fractions={
            k: sum(b.fractions[k] * b.support for b in budgets) / support if support else 0.0
            for k in BEHAVIOR_CLASSES
        },
        posture_fractions={
            k: sum(b.posture_fractions[k] * b.posture_support for b in budgets) / p_support if p_support else 0.0
            for k in BINARY_POSTURE_CLASSES
        },
        visible_count_mean=sum(b.visible_count_mean * b.n_frames for b in budgets) / n_frames,
        n_frames=n_frames,
        support=support,
        posture_support=p_support,
        video_id=budgets[0].video_id,
    )


@dataclass(frozen=True)
class WelfareRule:
    behavior: str
    comparator: str  # "below" or "above"
    threshold: float
    min_window: int = DEFAULT_WINDOW  # frames the condition must persist

    def __post_init__(self):
        object.__setattr__(self, "behavior", str(getattr(self.behavior, "value", self.behavior)).upper())
        object.__setattr__(self, "comparator", self.comparator.lower())
        if self.behavior not in BEHAVIOR_CLASSES:
            raise ValueError(f"unknown behavior {self.behavior!r}")
        if self.comparator not in ("below", "above"):
            raise ValueError("comparator must be 'below' or 'above'")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.min_window < 1:
            raise ValueError("min_window must be at least one frame")

    def holds(self, fraction: float) -> bool:
        return fraction < self.threshold if self.comparator == "below" else fraction > self.threshold

    def __str__(self) -> str:
        op = "<" if self.comparator == "below" else ">"
        return f"{self.behavior}{op}{self.threshold:g}@{self.min_window}"


_RULE = re.compile(r"^\s*([A-Za-z]{3})\s*([<>])\s*([0-9.eE+-]+)\s*(?:@\s*(\d+))?\s*$")


def parse_rule(text: str, default_min_window: int = DEFAULT_WINDOW) -> WelfareRule:
    """Parse ``"DRK<0.01"`` or ``"EAT>0.9@600"`` (``@`` gives min_window frames)."""
    m = _RULE.match(text)
    if not m:
        raise ValueError(f"cannot parse welfare rule {text!r}; expected e.g. 'DRK<0.01@300'")
    beh, op, thr, mw = m.groups()
    return WelfareRule(beh, "below" if op == "<" else "above", float(thr),
                       int(mw) if mw else default_min_window)


@dataclass(frozen=True)
class Flag:
    rule: WelfareRule
    window: tuple[int, int]
    observed: float
    video_id: Optional[str] = None


def evaluate_rules(budgets: Sequence[BehaviorBudget], rules: Sequence[WelfareRule]) -> list[Flag]:
    """Flag every window that ends a run of at least ``min_window`` frames
    over which the rule's condition held in each consecutive window.

    Windows whose budget has no behaviour support break a run.
    """
    flags = []
    for rule in rules:
        run_start = None
        prev_end = None
        for b in budgets:
            observed = b.fractions[rule.behavior]
            ok = b.support > 0 and rule.holds(observed)
            if not ok:
                run_start = None
            else:
                if run_start is None or (prev_end is not None and b.window[0] > prev_end):
                    run_start = b.window[0]
                if b.window[1] - run_start >= rule.min_window:
                    flags.append(Flag(rule, b.window, observed, b.video_id))
            prev_end = b.window[1]
    return flags


def budgets_csv(budgets: Sequence[BehaviorBudget]) -> bytes:
    header = ["video", "start", "end", "n_frames", "visible_count_mean", "support",
              *BEHAVIOR_CLASSES, *BINARY_POSTURE_CLASSES]
    rows = [
        [b.video_id, b.window[0], b.window[1], b.n_frames, float(b.visible_count_mean), b.support,
         *(float(b.fractions[c]) for c in BEHAVIOR_CLASSES),
         *(float(b.posture_fractions[c]) for c in BINARY_POSTURE_CLASSES)]
        for b in budgets
    ]
    return csv_bytes(header, rows)


def flags_json(flags: Sequence[Flag]) -> bytes:
    doc = [
        {"rule": str(f.rule), "video": f.video_id, "start": f.window[0], "end": f.window[1], "observed": f.observed}
        for f in flags
    ]
    return (json.dumps(rounded(doc), indent=2) + "\n").encode("utf-8")
