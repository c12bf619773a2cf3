"""Seeded synthetic pen scenes and controllably corrupted predictions.

Scenes are geometry and labels only.  Every random draw comes from a
generator keyed by ``(seed, video, frame)`` so a frame can be regenerated on
its own and the output never depends on scheduling.

Predictions are made by translating ground-truth boxes.  Birds are kept
``min_gap`` pixels apart and a shifted box is shrunk back until it touches
no other bird, so each prediction overlaps at most its own origin.  The
ledger records that origin together with the closed-form IoU of the shift,
which makes the expected TP/FP/FN, AP and label metrics computable without
running the matcher.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import BBox, Polygon8, polygon_to_bbox
from .metrics import BEHAVIOR_CLASSES
from .schema import (
    BEHAVIOR_FLAGS,
    FLAG_COLUMNS,
    Behavior,
    Bird,
    DatasetManifest,
    EthogramRow,
    FrameAnnotation,
    PolygonFile,
    Posture,
    Prediction,
    serialize_ethogram_csv,
    serialize_polygon_json,
    serialize_predictions,
)

__all__ = [
    "GenerationError",
    "SceneConfig",
    "NoiseConfig",
    "Scene",
    "LedgerEntry",
    "generate_scene",
    "corrupt",
    "write_dataset",
    "write_ledger",
    "read_ledger",
    "ledger_counts",
    "ledger_ap",
    "ledger_confusion",
    "ledger_f1",
]

DEFAULT_BEHAVIOR_PROBS = {
    "CTR": 0.45, "EAT": 0.30, "DRK": 0.05, "PRE": 0.08, "PRA": 0.02, "FOR": 0.08, "DUB": 0.02,
}
DEFAULT_POSTURE_PROBS = {"SIT": 0.45, "STD": 0.40, "WLK": 0.15}


class GenerationError(RuntimeError):
    pass


def _check_probs(probs: Mapping[str, float], allowed: Sequence[str], what: str) -> None:
    bad = set(probs) - set(allowed)
    if bad:
        raise ValueError(f"{what}: unknown classes {sorted(bad)}")
    if any(p < 0 for p in probs.values()) or not math.isclose(sum(probs.values()), 1.0, abs_tol=1e-9):
        raise ValueError(f"{what} must be non-negative and sum to 1")


@dataclass(frozen=True)
class SceneConfig:
    frame_width: int = 1280
    frame_height: int = 720
    n_birds: int = 20
    n_frames: int = 100
    video_ids: tuple[str, ...] = ("281",)
    camera_id: int = 1
    behavior_probs: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_BEHAVIOR_PROBS))
    posture_probs: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_POSTURE_PROBS))
    nvs_rate: float = 0.02
    posture_missing_rate: float = 0.0
    bird_length: tuple[float, float] = (60.0, 110.0)
    aspect: float = 0.6
    max_step: float = 6.0  # per-frame displacement bound, pixels
    max_turn: float = 0.08  # per-frame rotation bound, radians
    min_gap: float = 12.0  # minimum spacing between bird boxes, pixels
    date: str = "2020-05-01"
    fps: float = 1.0

    def __post_init__(self):
        _check_probs(self.behavior_probs, BEHAVIOR_CLASSES, "behavior_probs")
        _check_probs(self.posture_probs, [p.value for p in Posture], "posture_probs")
        if self.n_birds < 1 or self.n_frames < 1 or not self.video_ids:
            raise ValueError("need at least one bird, frame and video")
        for p in (self.nvs_rate, self.posture_missing_rate):
            if not 0.0 <= p <= 1.0:
                raise ValueError("rates must lie in [0, 1]")


@dataclass(frozen=True)
class NoiseConfig:
    jitter_sigma: float = 2.0
    max_shift: Optional[float] = None  # default 3 * jitter_sigma
    target_iou: Optional[float] = None  # shift along x to hit this box IoU exactly
    drop_rate: float = 0.1
    false_positive_rate: float = 0.5  # expected spurious boxes per frame
    label_confusion: Optional[Mapping[str, Mapping[str, float]]] = None  # rows over BEHAVIOR_CLASSES
    score_base: float = 0.3
    score_slope: float = 0.6
    score_noise: float = 0.05
    fp_score_range: tuple[float, float] = (0.05, 0.6)
    emit_polygon: bool = True
    emit_class_scores: bool = False

    def __post_init__(self):
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError("drop_rate must lie in [0, 1]")
        if self.false_positive_rate < 0:
            raise ValueError("false_positive_rate must be >= 0")
        if self.target_iou is not None and not 0.0 < self.target_iou <= 1.0:
            raise ValueError("target_iou must lie in (0, 1]")
        if self.label_confusion is not None:
            for c, row in self.label_confusion.items():
                _check_probs(row, BEHAVIOR_CLASSES, f"label_confusion[{c}]")

    def confusion_row(self, label: str) -> np.ndarray:
        if self.label_confusion is None or label not in self.label_confusion:
            return np.array([1.0 if c == label else 0.0 for c in BEHAVIOR_CLASSES])
        row = self.label_confusion[label]
        return np.array([row.get(c, 0.0) for c in BEHAVIOR_CLASSES])


@dataclass
class Scene:
    config: SceneConfig
    seed: int
    manifest: DatasetManifest
    frames: list[FrameAnnotation]
    polygon_files: dict[str, PolygonFile]
    rows: list[EthogramRow]


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def _image_name(video: str, frame: int) -> str:
    return f"{video}_{frame:05d}"


@dataclass
class _Body:
    bird_id: int
    cx: float
    cy: float
    angle: float
    half_len: float
    half_wid: float
    radii: np.ndarray

    def outline(self, cx=None, cy=None, angle=None) -> np.ndarray:
        cx = self.cx if cx is None else cx
        cy = self.cy if cy is None else cy
        angle = self.angle if angle is None else angle
        # vertex 0 on the head end of the major axis, 4 on the tail; increasing
        # parameter angle runs clockwise on screen (y down)
        t = np.arange(8) * (np.pi / 4)
        lx = self.half_len * self.radii * np.cos(t)
        ly = self.half_wid * self.radii * np.sin(t)
        ca, sa = np.cos(angle), np.sin(angle)
        pts = np.stack([cx + ca * lx - sa * ly, cy + sa * lx + ca * ly], axis=1)
        return np.round(pts, 2)


def _box(pts: np.ndarray) -> np.ndarray:
    return np.array([pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()])


def _fits(box, others: Sequence[np.ndarray], gap: float, w: float, h: float) -> bool:
    if box[0] < 1 or box[1] < 1 or box[2] > w - 1 or box[3] > h - 1:
        return False
    for o in others:
        if box[0] < o[2] + gap and o[0] < box[2] + gap and box[1] < o[3] + gap and o[1] < box[3] + gap:
            return False
    return True


def _clock(seconds: float) -> str:
    s = int(round(seconds)) + 6 * 3600
    return f"{s // 3600:02d}:{s % 3600 // 60:02d}:{s % 60:02d}"


def generate_scene(cfg: SceneConfig, seed: int = 0) -> Scene:
    """Generate ground truth for every video and frame in ``cfg``."""
    manifest = DatasetManifest(
        camera_id=cfg.camera_id,
        video_ids=list(cfg.video_ids),
        frame_width=cfg.frame_width,
        frame_height=cfg.frame_height,
    )
    b_classes = list(cfg.behavior_probs)
    b_p = np.array([cfg.behavior_probs[c] for c in b_classes])
    p_classes = list(cfg.posture_probs)
    p_p = np.array([cfg.posture_probs[c] for c in p_classes])

    frames, files, rows = [], {}, []
    for vi, video in enumerate(cfg.video_ids):
        rng = _rng(seed, vi, 1 << 20)
        bodies: list[_Body] = []
        boxes: list[np.ndarray] = []
        for bid in range(1, cfg.n_birds + 1):
            for _ in range(2000):
                length = rng.uniform(*cfg.bird_length)
                body = _Body(
                    bid,
                    rng.uniform(0, cfg.frame_width),
                    rng.uniform(0, cfg.frame_height),
                    rng.uniform(-np.pi, np.pi),
                    length / 2,
                    length * cfg.aspect / 2,
                    rng.uniform(0.9, 1.1, size=8),
                )
                box = _box(body.outline())
                if _fits(box, boxes, cfg.min_gap, cfg.frame_width, cfg.frame_height):
                    bodies.append(body)
                    boxes.append(box)
                    break
            else:
                raise GenerationError(
                    f"could not place bird {bid} of {cfg.n_birds} in a "
                    f"{cfg.frame_width}x{cfg.frame_height} frame"
                )

        for fi in range(cfg.n_frames):
            rng = _rng(seed, vi, fi)
            if fi > 0:
                for k, body in enumerate(bodies):
                    dx, dy = rng.uniform(-cfg.max_step, cfg.max_step, size=2)
                    da = rng.uniform(-cfg.max_turn, cfg.max_turn)
                    cand = _box(body.outline(body.cx + dx, body.cy + dy, body.angle + da))
                    if _fits(cand, boxes[:k] + boxes[k + 1 :], cfg.min_gap, cfg.frame_width, cfg.frame_height):
                        body.cx, body.cy, body.angle = body.cx + dx, body.cy + dy, body.angle + da
                        boxes[k] = cand
            name = _image_name(video, fi)
            frame = FrameAnnotation(video, fi)
            shapes = []
            for body in bodies:
                u = rng.random(3)
                behavior = b_classes[int(rng.choice(len(b_classes), p=b_p))]
                posture = p_classes[int(rng.choice(len(p_classes), p=p_p))]
                flags = dict.fromkeys(FLAG_COLUMNS, 0)
                if u[0] < cfg.nvs_rate:
                    flags["NVS"] = 1
                    frame.birds.append(Bird(body.bird_id, visible=False))
                else:
                    if behavior != "CTR" and u[1] < cfg.posture_missing_rate:
                        posture = None
                    if posture is not None:
                        flags[posture] = 1
                    if behavior in BEHAVIOR_FLAGS:
                        flags[behavior] = 1
                    pts = [[float(x), float(y)] for x, y in body.outline()]
                    shapes.append((body.bird_id, pts))
                    frame.birds.append(
                        Bird(
                            body.bird_id,
                            points=pts,
                            polygon=Polygon8(tuple(map(tuple, pts))),
                            posture=Posture(posture) if posture else None,
                            behavior=Behavior(behavior),
                        )
                    )
                rows.append(
                    EthogramRow(
                        date=cfg.date,
                        image=name + ".jpg",
                        time=_clock(fi / cfg.fps),
                        bird_id=body.bird_id,
                        flags=tuple(flags[c] for c in FLAG_COLUMNS),
                        count=sum(flags.values()),
                        row=len(rows) + 1,
                    )
                )
            # merge order: outlined birds first, then NVS birds
            frame.birds.sort(key=lambda b: not b.visible)
            files[name + ".json"] = PolygonFile(
                shapes, image_path=name + ".jpg", image_width=cfg.frame_width, image_height=cfg.frame_height
            )
            frames.append(frame)
    return Scene(cfg, seed, manifest, frames, files, rows)


# -- corruption -------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    kind: str  # "detected", "dropped" or "spurious"
    video_id: str
    frame_index: int
    pred_index: Optional[int] = None  # position among the frame's predictions
    bird_id: Optional[int] = None
    gt_index: Optional[int] = None  # position among the frame's evaluable birds
    dx: float = 0.0
    dy: float = 0.0
    iou: float = 0.0  # closed-form box IoU with the origin bird
    gt_label: Optional[str] = None
    gt_posture: Optional[str] = None
    pred_label: Optional[str] = None
    score: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "video": self.video_id,
            "frame": self.frame_index,
            "pred_index": self.pred_index,
            "bird_id": self.bird_id,
            "gt_index": self.gt_index,
            "dx": self.dx,
            "dy": self.dy,
            "iou": self.iou,
            "gt_label": self.gt_label,
            "gt_posture": self.gt_posture,
            "pred_label": self.pred_label,
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LedgerEntry":
        return cls(
            d["kind"], d["video"], d["frame"], d["pred_index"], d["bird_id"], d["gt_index"],
            d["dx"], d["dy"], d["iou"], d["gt_label"], d["gt_posture"], d["pred_label"], d["score"],
        )


def shifted_box_iou(w: float, h: float, dx: float, dy: float) -> float:
    """IoU of a w x h box with itself translated by (dx, dy)."""
    ox, oy = w - abs(dx), h - abs(dy)
    if ox <= 0 or oy <= 0:
        return 0.0
    inter = ox * oy
    return inter / (2 * w * h - inter)


def _touches(box, others) -> bool:
    return any(box[0] < o[2] and o[0] < box[2] and box[1] < o[3] and o[1] < box[3] for o in others)


def corrupt(
    frames: Sequence[FrameAnnotation],
    noise: NoiseConfig,
    seed: int = 0,
    frame_size: tuple[float, float] = (1280, 720),
) -> tuple[list[Prediction], list[LedgerEntry]]:
    """Derive predictions from ground truth and record where each came from."""
    max_shift = noise.max_shift if noise.max_shift is not None else 3 * noise.jitter_sigma
    videos = sorted({f.video_id for f in frames})
    preds: list[Prediction] = []
    ledger: list[LedgerEntry] = []
    W, H = frame_size
    for frame in sorted(frames, key=lambda f: f.key):
        rng = _rng(seed, videos.index(frame.video_id), frame.frame_index, 7)
        gts = frame.gt_birds()
        gt_boxes = [polygon_to_bbox(b.polygon).as_list() for b in gts]
        made: list[tuple[Prediction, LedgerEntry]] = []
        for gi, bird in enumerate(gts):
            u_drop = rng.random()
            jit = np.clip(rng.normal(0.0, noise.jitter_sigma, size=2), -max_shift, max_shift)
            sign = 1.0 if rng.random() < 0.5 else -1.0
            u_label = rng.random()
            u_score = rng.normal(0.0, noise.score_noise)
            u_class = rng.uniform(0.4, 0.95)
            if u_drop < noise.drop_rate:
                ledger.append(LedgerEntry("dropped", frame.video_id, frame.frame_index, None, bird.bird_id, gi,
                                          gt_label=bird.behavior.value,
                                          gt_posture=bird.posture.value if bird.posture else None))
                continue
            x0, y0, x1, y1 = gt_boxes[gi]
            w, h = x1 - x0, y1 - y0
            if noise.target_iou is not None:
                t = noise.target_iou
                dx, dy = sign * w * (1 - t) / (1 + t), 0.0
            else:
                dx, dy = float(jit[0]), float(jit[1])
            others = gt_boxes[:gi] + gt_boxes[gi + 1 :]
            for _ in range(12):
                if not _touches([x0 + dx, y0 + dy, x1 + dx, y1 + dy], others):
                    break
                dx, dy = dx / 2, dy / 2
            else:
                dx, dy = 0.0, 0.0
            iou = shifted_box_iou(w, h, dx, dy)
            label = BEHAVIOR_CLASSES[int(np.searchsorted(np.cumsum(noise.confusion_row(bird.behavior.value)),
                                                         u_label, side="right").clip(0, len(BEHAVIOR_CLASSES) - 1))]
            score = float(np.clip(noise.score_base + noise.score_slope * iou + u_score, 0.01, 0.99))
            pred = Prediction(
                frame.video_id,
                frame.frame_index,
                BBox(x0 + dx, y0 + dy, x1 + dx, y1 + dy),
                label,
                score,
                polygon=bird.polygon.translate(dx, dy) if noise.emit_polygon else None,
                class_scores=_class_scores(label, u_class) if noise.emit_class_scores else None,
            )
            entry = LedgerEntry("detected", frame.video_id, frame.frame_index, None, bird.bird_id, gi, dx, dy, iou,
                                bird.behavior.value, bird.posture.value if bird.posture else None, label, score)
            made.append((pred, entry))

        n_fp = int(rng.poisson(noise.false_positive_rate)) if noise.false_positive_rate > 0 else 0
        for _ in range(n_fp):
            bw = rng.uniform(40, 100)
            bh = rng.uniform(30, 70)
            label = BEHAVIOR_CLASSES[int(rng.integers(len(BEHAVIOR_CLASSES)))]
            score = float(rng.uniform(*noise.fp_score_range))
            u_class = rng.uniform(0.4, 0.95)
            for _ in range(50):
                bx, by = rng.uniform(0, W - bw), rng.uniform(0, H - bh)
                box = [bx, by, bx + bw, by + bh]
                if not _touches(box, gt_boxes):
                    break
            else:
                continue
            pred = Prediction(
                frame.video_id,
                frame.frame_index,
                BBox(*box),
                label,
                score,
                class_scores=_class_scores(label, u_class) if noise.emit_class_scores else None,
            )
            made.append((pred, LedgerEntry("spurious", frame.video_id, frame.frame_index,
                                           pred_label=label, score=score)))

        order = rng.permutation(len(made))
        for k, idx in enumerate(order):
            pred, entry = made[idx]
            preds.append(pred)
            ledger.append(LedgerEntry(**{**entry.__dict__, "pred_index": k}))
    return preds, ledger


def _class_scores(label: str, top: float) -> tuple[tuple[str, float], ...]:
    rest = (1.0 - top) / (len(BEHAVIOR_CLASSES) - 1)
    return tuple((c, top if c == label else rest) for c in BEHAVIOR_CLASSES)


# -- files ------------------------------------------------------------------


def write_ledger(ledger: Sequence[LedgerEntry]) -> bytes:
    lines = [json.dumps(e.to_dict(), separators=(",", ":")) for e in ledger]
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


def read_ledger(data: bytes) -> list[LedgerEntry]:
    return [LedgerEntry.from_dict(json.loads(l)) for l in data.decode("utf-8").splitlines() if l.strip()]


def write_dataset(
    scene: Scene,
    out_dir,
    predictions: Optional[Sequence[Prediction]] = None,
    ledger: Optional[Sequence[LedgerEntry]] = None,
) -> list[Path]:
    out = Path(out_dir)
    (out / scene.manifest.polygon_dir).mkdir(parents=True, exist_ok=True)
    written = []

    def put(rel: str, data: bytes):
        p = out / rel
        p.write_bytes(data)
        written.append(p)

    put("manifest.json", (json.dumps(scene.manifest.to_dict(), indent=2) + "\n").encode("utf-8"))
    for name in sorted(scene.polygon_files):
        put(f"{scene.manifest.polygon_dir}/{name}", serialize_polygon_json(scene.polygon_files[name]))
    put(scene.manifest.ethogram_paths[0], serialize_ethogram_csv(scene.rows))
    if predictions is not None:
        put("predictions.ndjson", serialize_predictions(predictions))
    if ledger is not None:
        put("ledger.ndjson", write_ledger(ledger))
    return written


# -- ledger replay oracle ---------------------------------------------------
# Plain loops on purpose: these must not share code with the metric pipeline.


def ledger_counts(ledger: Sequence[LedgerEntry], alpha: float) -> dict[str, int]:
    tp = sum(1 for e in ledger if e.kind == "detected" and e.iou > alpha)
    n_pred = sum(1 for e in ledger if e.kind in ("detected", "spurious"))
    n_gt = sum(1 for e in ledger if e.kind in ("detected", "dropped"))
    return {"tp": tp, "fp": n_pred - tp, "fn": n_gt - tp}


def ledger_ap(ledger: Sequence[LedgerEntry], alpha: float) -> float:
    """101-point AP by brute force: best precision at or beyond each recall level."""
    n_gt = sum(1 for e in ledger if e.kind in ("detected", "dropped"))
    dets = [e for e in ledger if e.kind in ("detected", "spurious")]
    dets.sort(key=lambda e: -e.score)
    points = []
    tp = 0
    for k, e in enumerate(dets, start=1):
        if e.kind == "detected" and e.iou > alpha:
            tp += 1
        # detections sharing a score enter the curve together
        if k == len(dets) or dets[k].score != e.score:
            points.append((tp / n_gt, tp / k))
    total = 0.0
    for i in range(101):
        r = i / 100
        best = 0.0
        for rec, prec in points:
            if rec >= r and prec > best:
                best = prec
        total += best
    return total / 101


def ledger_confusion(ledger: Sequence[LedgerEntry], alpha: float, classes=BEHAVIOR_CLASSES) -> list[list[int]]:
    idx = {c: i for i, c in enumerate(classes)}
    m = [[0] * len(classes) for _ in classes]
    for e in ledger:
        if e.kind == "detected" and e.iou > alpha:
            m[idx[e.gt_label]][idx[e.pred_label]] += 1
    return m


def ledger_f1(matrix: Sequence[Sequence[int]]) -> dict:
    n = len(matrix)
    total = sum(sum(r) for r in matrix)
    f1 = []
    support = []
    for i in range(n):
        tp = matrix[i][i]
        fp = sum(matrix[j][i] for j in range(n)) - tp
        fn = sum(matrix[i]) - tp
        f1.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
        support.append(sum(matrix[i]))
    return {
        "accuracy": sum(matrix[i][i] for i in range(n)) / total,
        "f1": f1,
        "macro_f1": sum(f1) / n,
        "weighted_f1": sum(a * b for a, b in zip(f1, support)) / total,
    }
