"""Ground-truth and prediction file formats.

Three inputs describe a dataset:

* one LabelMe-style polygon JSON per frame (``shapes[].label`` is the bird
  id, ``shapes[].points`` the eight outline points),
* an ethogram CSV with one one-hot row per bird and frame,
* a manifest JSON tying frames to videos and giving the frame size.

Model outputs arrive as newline-delimited JSON records.

Parsers reject structural breakage only.  Semantic problems (count rule,
conflicting flags, bad outlines, join mismatches) are collected as
:class:`Violation` entries so a whole dataset can be audited in one pass.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .geometry import BBox, InvalidGeometry, Polygon8, polygon_to_bbox, validate_polygon

__all__ = [
    "ParseError",
    "SchemaError",
    "MergeError",
    "Posture",
    "BinaryPosture",
    "Behavior",
    "POSTURE_FLAGS",
    "BEHAVIOR_FLAGS",
    "ETHOGRAM_COLUMNS",
    "GENERIC_LABEL",
    "VALID_LABELS",
    "EthogramRow",
    "PolygonFile",
    "Bird",
    "FrameAnnotation",
    "Prediction",
    "DatasetManifest",
    "Violation",
    "ValidationReport",
    "MergeResult",
    "parse_polygon_json",
    "serialize_polygon_json",
    "parse_ethogram_csv",
    "serialize_ethogram_csv",
    "validate_rows",
    "merge_annotations",
    "parse_predictions",
    "serialize_predictions",
    "load_manifest",
    "load_dataset",
    "normalize_image_name",
]


class ParseError(ValueError):
    """Structural breakage in an input file."""

    def __init__(self, message, *, offset=None, row=None, line=None):
        super().__init__(message)
        self.offset = offset
        self.row = row
        self.line = line


class SchemaError(ValueError):
    """Well-formed input that does not follow the expected schema."""


class MergeError(ValueError):
    """Inputs that cannot be joined unambiguously."""


class Posture(str, Enum):
    WALKING = "WLK"
    SITTING = "SIT"
    STANDING = "STD"

    @property
    def binary(self) -> "BinaryPosture":
        return BinaryPosture.WALKING if self is Posture.WALKING else BinaryPosture.STATIONARY


class BinaryPosture(str, Enum):
    STATIONARY = "STN"
    WALKING = "WLK"


class Behavior(str, Enum):
    EATING = "EAT"
    DRINKING = "DRK"
    PREENING = "PRE"
    ALLO_PREENING = "PRA"
    FORAGING = "FOR"
    DUST_BATHING = "DUB"
    CONTROL = "CTR"


POSTURE_FLAGS = ("WLK", "SIT", "STD")
# Control has no column: a visible bird with no behaviour flag is Control.
BEHAVIOR_FLAGS = ("EAT", "DRK", "PRE", "PRA", "FOR", "DUB")
FLAG_COLUMNS = POSTURE_FLAGS + BEHAVIOR_FLAGS + ("NVS",)
ETHOGRAM_COLUMNS = ("date", "image", "time", "bird ID") + FLAG_COLUMNS + ("count",)

GENERIC_LABEL = "BIRD"
VALID_LABELS = tuple(dict.fromkeys(
    [p.value for p in Posture] + ["STN"] + [b.value for b in Behavior] + [GENERIC_LABEL]
))


def normalize_image_name(name: str) -> str:
    """Frame identity shared by JSON filenames and the CSV ``image`` column."""
    stem = str(name).strip().replace("\\", "/").rsplit("/", 1)[-1]
    if "." in stem:
        stem = stem.rsplit(".", 1)[0]
    return stem.lower()


# -- ethogram ---------------------------------------------------------------


@dataclass(frozen=True)
class EthogramRow:
    date: str
    image: str
    time: str
    bird_id: int
    flags: tuple[int, ...]  # ordered as FLAG_COLUMNS
    count: int
    row: int = field(default=0, compare=False)  # 1-based data row in the source file

    def flag(self, name: str) -> int:
        return self.flags[FLAG_COLUMNS.index(name)]

    @property
    def visible(self) -> bool:
        return self.flag("NVS") == 0

    @property
    def postures(self) -> list[Posture]:
        return [Posture(n) for n in POSTURE_FLAGS if self.flag(n)]

    @property
    def behaviors(self) -> list[Behavior]:
        return [Behavior(n) for n in BEHAVIOR_FLAGS if self.flag(n)]


def _decode(data, what: str) -> str:
    if isinstance(data, str):
        return data
    try:
        return bytes(data).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{what}: invalid UTF-8 at byte {exc.start}", offset=exc.start) from exc


def parse_ethogram_csv(data) -> list[EthogramRow]:
    text = _decode(data, "ethogram")
    if text.startswith("\ufeff"):
        text = text[1:]
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("ethogram CSV is empty; expected header") from None
    names = [h.strip() for h in header]
    lookup = {c.lower(): c for c in ETHOGRAM_COLUMNS}
    unknown = [h for h in names if h.lower() not in lookup]
    if unknown:
        raise SchemaError(f"unknown ethogram column(s): {unknown}; expected {list(ETHOGRAM_COLUMNS)}")
    canon = [lookup[h.lower()] for h in names]
    missing = [c for c in ETHOGRAM_COLUMNS if c not in canon]
    if missing or len(canon) != len(set(canon)):
        raise SchemaError(f"ethogram header must hold each of {list(ETHOGRAM_COLUMNS)} once")
    pos = {c: i for i, c in enumerate(canon)}

    rows = []
    for n, cells in enumerate(reader, start=1):
        if not cells or all(not c.strip() for c in cells):
            continue
        if len(cells) != len(canon):
            raise ParseError(f"row {n}: expected {len(canon)} cells, got {len(cells)}", row=n)
        flags = []
        for name in FLAG_COLUMNS:
            cell = cells[pos[name]].strip()
            if cell not in ("0", "1"):
                raise ParseError(f"row {n}: column {name} must be 0 or 1, got {cell!r}", row=n)
            flags.append(int(cell))
        try:
            bird_id = int(cells[pos["bird ID"]].strip())
            count = int(cells[pos["count"]].strip())
        except ValueError:
            raise ParseError(f"row {n}: bird ID and count must be integers", row=n) from None
        if bird_id <= 0:
            raise ParseError(f"row {n}: bird ID must be positive", row=n)
        rows.append(
            EthogramRow(
                date=cells[pos["date"]],
                image=cells[pos["image"]],
                time=cells[pos["time"]],
                bird_id=bird_id,
                flags=tuple(flags),
                count=count,
                row=n,
            )
        )
    return rows


def serialize_ethogram_csv(rows: Iterable[EthogramRow]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ETHOGRAM_COLUMNS)
    for r in rows:
        w.writerow([r.date, r.image, r.time, r.bird_id, *r.flags, r.count])
    return buf.getvalue().encode("utf-8")


@dataclass(frozen=True)
class Violation:
    code: str
    source: str
    image: str = ""
    bird_id: Optional[int] = None
    row: Optional[int] = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "code": self.code,
            "source": self.source,
            "image": self.image,
            "bird_id": self.bird_id,
            "row": self.row,
            "detail": self.detail,
        }


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]

    def extend(self, other: "ValidationReport | Iterable[Violation]") -> None:
        self.violations.extend(other.violations if isinstance(other, ValidationReport) else other)

    def sorted(self) -> "ValidationReport":
        key = lambda v: (v.source, v.image, v.row or 0, v.bird_id or 0, v.code, v.detail)
        return ValidationReport(sorted(self.violations, key=key))

    def to_dict(self) -> dict:
        counts: dict[str, int] = {}
        for v in self.violations:
            counts[v.code] = counts.get(v.code, 0) + 1
        return {
            "n_violations": len(self.violations),
            "counts": dict(sorted(counts.items())),
            "violations": [v.to_dict() for v in self.violations],
        }


def _row_violations(r: EthogramRow) -> list[Violation]:
    out = []
    where = dict(source="ethogram", image=r.image, bird_id=r.bird_id, row=r.row)
    total = sum(r.flags)
    if r.count not in (1, 2) or r.count != total:
        out.append(Violation("CountRule", detail=f"count={r.count}, flags sum={total}", **where))
    if len(r.postures) > 1:
        out.append(Violation("MultiPosture", detail="+".join(p.value for p in r.postures), **where))
    if len(r.behaviors) > 1:
        out.append(Violation("MultiBehavior", detail="+".join(b.value for b in r.behaviors), **where))
    if r.flag("NVS") and total > 1:
        out.append(Violation("NVSConflict", detail="NVS set together with other flags", **where))
    return out


def validate_rows(rows: Sequence[EthogramRow]) -> ValidationReport:
    """Check each row against the count rule and flag exclusivity."""
    report = ValidationReport()
    for r in rows:
        report.extend(_row_violations(r))
    return report


# -- polygon JSON -----------------------------------------------------------


@dataclass
class PolygonFile:
    """Subset of a LabelMe document: the labelled shapes plus image metadata."""

    shapes: list[tuple[int, list]]
    image_path: Optional[str] = None
    image_width: Optional[int] = None
    image_height: Optional[int] = None


def _json_loads(text: str, what: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ParseError(f"{what}: {exc.msg} at byte {offset}", offset=offset) from exc


def parse_polygon_json(data) -> PolygonFile:
    doc = _json_loads(_decode(data, "polygon JSON"), "polygon JSON")
    if not isinstance(doc, dict) or not isinstance(doc.get("shapes"), list):
        raise SchemaError("polygon JSON needs a top-level 'shapes' list")
    shapes = []
    for i, shp in enumerate(doc["shapes"]):
        if not isinstance(shp, dict):
            raise SchemaError(f"shape {i} is not an object")
        label = shp.get("label")
        if label is None or str(label).strip() == "":
            raise SchemaError(f"shape {i} has no label")
        try:
            bird_id = int(str(label).strip())
        except ValueError:
            raise SchemaError(f"shape {i}: label {label!r} is not a bird id") from None
        points = shp.get("points")
        if not isinstance(points, list):
            raise SchemaError(f"shape {i} (bird {bird_id}) has no point list")
        shapes.append((bird_id, points))
    return PolygonFile(
        shapes=shapes,
        image_path=doc.get("imagePath"),
        image_width=doc.get("imageWidth"),
        image_height=doc.get("imageHeight"),
    )


def serialize_polygon_json(pf: PolygonFile) -> bytes:
    doc: dict = {
        "shapes": [
            {"label": str(bid), "points": [list(p) for p in pts], "shape_type": "polygon"}
            for bid, pts in pf.shapes
        ]
    }
    if pf.image_path is not None:
        doc["imagePath"] = pf.image_path
    if pf.image_height is not None:
        doc["imageHeight"] = pf.image_height
    if pf.image_width is not None:
        doc["imageWidth"] = pf.image_width
    return (json.dumps(doc, indent=2) + "\n").encode("utf-8")


# -- manifest ---------------------------------------------------------------

DEFAULT_IMAGE_PATTERN = r"^(?P<video>[^_]+)_(?P<frame>\d+)$"


@dataclass
class DatasetManifest:
    camera_id: int
    video_ids: list[str]
    frame_width: float
    frame_height: float
    polygon_dir: str = "polygons"
    ethogram_paths: list[str] = field(default_factory=lambda: ["ethogram.csv"])
    image_pattern: str = DEFAULT_IMAGE_PATTERN
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        self.video_ids = [str(v) for v in self.video_ids]
        if not self.video_ids:
            raise SchemaError("manifest lists no videos")
        if len(set(self.video_ids)) != len(self.video_ids):
            raise SchemaError("manifest video ids must be unique")
        if self.camera_id not in (1, 2, 3):
            raise SchemaError(f"camera_id must be 1, 2 or 3, got {self.camera_id}")
        self._pattern = re.compile(self.image_pattern, re.IGNORECASE)

    def frame_key(self, image: str) -> tuple[str, int]:
        """Map a JSON filename or CSV ``image`` cell to ``(video_id, frame_index)``."""
        name = normalize_image_name(image)
        m = self._pattern.match(name)
        if not m:
            raise SchemaError(f"image name {image!r} does not match {self.image_pattern!r}")
        return m.group("video"), int(m.group("frame"))

    def to_dict(self) -> dict:
        return {
            "camera_id": self.camera_id,
            "video_ids": list(self.video_ids),
            "frame_width": self.frame_width,
            "frame_height": self.frame_height,
            "polygon_dir": self.polygon_dir,
            "ethogram_paths": list(self.ethogram_paths),
            "image_pattern": self.image_pattern,
        }

    @classmethod
    def from_dict(cls, d: dict, root=None) -> "DatasetManifest":
        known = {"camera_id", "video_ids", "frame_width", "frame_height",
                 "polygon_dir", "ethogram_paths", "image_pattern"}
        extra = set(d) - known
        if extra:
            raise SchemaError(f"unknown manifest field(s): {sorted(extra)}")
        for req in ("camera_id", "video_ids", "frame_width", "frame_height"):
            if req not in d:
                raise SchemaError(f"manifest missing {req!r}")
        return cls(**d, root=Path(root) if root is not None else None)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = _json_loads(_decode(path.read_bytes(), str(path)), str(path))
    if not isinstance(doc, dict):
        raise SchemaError("manifest must be a JSON object")
    return DatasetManifest.from_dict(doc, root=path.parent)


# -- merge ------------------------------------------------------------------


@dataclass
class Bird:
    bird_id: int
    points: Optional[list] = None
    polygon: Optional[Polygon8] = None
    posture: Optional[Posture] = None
    behavior: Optional[Behavior] = None
    visible: bool = True
    anomalies: tuple[str, ...] = ()

    @property
    def evaluable(self) -> bool:
        """Visible with a clean outline; only these take part in matching."""
        return self.visible and self.polygon is not None


@dataclass
class FrameAnnotation:
    video_id: str
    frame_index: int
    birds: list[Bird] = field(default_factory=list)

    @property
    def key(self) -> tuple[str, int]:
        return (self.video_id, self.frame_index)

    def gt_birds(self) -> list[Bird]:
        return [b for b in self.birds if b.evaluable]


@dataclass
class MergeResult:
    frames: list[FrameAnnotation]
    report: ValidationReport

    @property
    def n_visible(self) -> int:
        return sum(1 for f in self.frames for b in f.birds if b.visible)


def merge_annotations(
    polygons: dict[str, PolygonFile],
    rows: Sequence[EthogramRow],
    manifest: DatasetManifest,
    row_report: Optional[ValidationReport] = None,
) -> MergeResult:
    """Join outlines and ethogram rows on ``(video, frame, bird_id)``.

    ``polygons`` maps an image name (JSON filename or stem) to its parsed
    file.  Rows that failed :func:`validate_rows` are left out of the join;
    their violations are carried into the returned report.  Birds keep the
    order of the polygon file, followed by NVS birds in row order.
    """
    if row_report is None:
        row_report = validate_rows(rows)
    report = ValidationReport(list(row_report.violations))
    bad_rows = {(v.image, v.bird_id, v.row) for v in row_report.violations if v.source == "ethogram"}
    videos = set(manifest.video_ids)

    poly_frames: dict[tuple[str, int], tuple[str, PolygonFile]] = {}
    for name, pf in polygons.items():
        key = manifest.frame_key(name)
        if key in poly_frames:
            raise MergeError(f"two polygon files map to frame {key}")
        poly_frames[key] = (normalize_image_name(name), pf)

    row_frames: dict[tuple[str, int], dict[int, EthogramRow]] = {}
    for r in rows:
        key = manifest.frame_key(r.image)
        per = row_frames.setdefault(key, {})
        if r.bird_id in per:
            raise MergeError(f"bird {r.bird_id} appears twice in ethogram frame {r.image!r}")
        per[r.bird_id] = r

    frames = []
    for key in sorted(set(poly_frames) | set(row_frames), key=lambda k: (k[0], k[1])):
        video, index = key
        image, pf = poly_frames.get(key, (None, None))
        per_rows = row_frames.get(key, {})
        if image is None:
            image = normalize_image_name(next(iter(per_rows.values())).image)
        if video not in videos:
            report.extend([Violation("UnknownVideo", "merge", image, detail=f"video {video!r}")])
            continue
        frame = FrameAnnotation(video, index)
        seen = set()
        for bid, pts in (pf.shapes if pf else []):
            if bid in seen:
                raise MergeError(f"bird {bid} appears twice in polygon file {image!r}")
            seen.add(bid)
            anomalies = validate_polygon(pts, manifest.frame_width, manifest.frame_height)
            for code in anomalies:
                report.extend([Violation(code, "polygon", image, bid)])
            r = per_rows.get(bid)
            if r is None:
                report.extend([Violation("OrphanPolygon", "merge", image, bid)])
                continue
            if (r.image, r.bird_id, r.row) in bad_rows:
                continue
            if not r.visible:
                report.extend([Violation("NVSConflict", "merge", image, bid, r.row,
                                         "bird marked not visible but outlined")])
                frame.birds.append(Bird(bid, visible=False))
                continue
            poly = Polygon8(tuple(map(tuple, pts))) if not anomalies else None
            postures, behaviors = r.postures, r.behaviors
            frame.birds.append(
                Bird(
                    bid,
                    points=pts,
                    polygon=poly,
                    posture=postures[0] if postures else None,
                    behavior=behaviors[0] if behaviors else Behavior.CONTROL,
                    anomalies=tuple(anomalies),
                )
            )
        for bid, r in per_rows.items():
            if bid in seen or (r.image, r.bird_id, r.row) in bad_rows:
                continue
            if r.visible:
                report.extend([Violation("OrphanRow", "merge", image, bid, r.row, "no outline for visible bird")])
            else:
                frame.birds.append(Bird(bid, visible=False))
        frames.append(frame)
    return MergeResult(frames, report)


# -- predictions ------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    video_id: str
    frame_index: int
    bbox: BBox
    label: str
    score: float
    polygon: Optional[Polygon8] = None
    class_scores: Optional[tuple[tuple[str, float], ...]] = None

    @property
    def key(self) -> tuple[str, int]:
        return (self.video_id, self.frame_index)

    def to_record(self) -> dict:
        rec: dict = {"video": self.video_id, "frame": self.frame_index, "bbox": self.bbox.as_list()}
        if self.polygon is not None:
            rec["polygon"] = self.polygon.flat()
        rec["label"] = self.label
        rec["score"] = self.score
        if self.class_scores is not None:
            rec["scores"] = dict(self.class_scores)
        return rec


def _label(value, where: str) -> str:
    label = str(value).strip().upper()
    if label not in VALID_LABELS:
        raise SchemaError(f"{where}: unknown class {value!r}; valid labels are {list(VALID_LABELS)}")
    return label


def _prediction_from_record(rec, n: int) -> Prediction:
    where = f"line {n}"
    if not isinstance(rec, dict):
        raise ParseError(f"{where}: record must be a JSON object", line=n)
    for req in ("video", "frame", "label", "score"):
        if req not in rec:
            raise ParseError(f"{where}: missing field {req!r}", line=n)
    frame = rec["frame"]
    if isinstance(frame, bool) or not isinstance(frame, int) or frame < 0:
        raise ParseError(f"{where}: frame must be a non-negative integer", line=n)
    score = rec["score"]
    if isinstance(score, bool) or not isinstance(score, (int, float)) or not (0.0 <= score <= 1.0):
        raise ParseError(f"{where}: score {score!r} outside [0, 1]", line=n)
    try:
        polygon = Polygon8.from_flat(rec["polygon"]) if rec.get("polygon") is not None else None
        if rec.get("bbox") is not None:
            b = rec["bbox"]
            if len(b) != 4:
                raise InvalidGeometry("bbox needs 4 numbers")
            bbox = BBox(*map(float, b))
        elif polygon is not None:
            bbox = polygon_to_bbox(polygon)
        else:
            raise ParseError(f"{where}: record has neither bbox nor polygon", line=n)
    except (InvalidGeometry, TypeError) as exc:
        raise ParseError(f"{where}: {exc}", line=n) from exc
    class_scores = None
    if rec.get("scores") is not None:
        if not isinstance(rec["scores"], dict):
            raise ParseError(f"{where}: scores must be an object", line=n)
        items = []
        for k, v in rec["scores"].items():
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not (0.0 <= v <= 1.0):
                raise ParseError(f"{where}: class score {k}={v!r} outside [0, 1]", line=n)
            items.append((_label(k, where), float(v)))
        class_scores = tuple(items)
    return Prediction(
        video_id=str(rec["video"]),
        frame_index=frame,
        bbox=bbox,
        label=_label(rec["label"], where),
        score=float(score),
        polygon=polygon,
        class_scores=class_scores,
    )


def parse_predictions(data) -> list[Prediction]:
    """Parse NDJSON prediction records, one per non-blank line."""
    text = _decode(data, "predictions")
    out = []
    offset = 0
    for n, line in enumerate(text.split("\n"), start=1):
        if line.strip():
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                at = offset + len(line[: exc.pos].encode("utf-8"))
                raise ParseError(f"line {n}: {exc.msg} at byte {at}", offset=at, line=n) from exc
            out.append(_prediction_from_record(rec, n))
        offset += len(line.encode("utf-8")) + 1
    return out


def serialize_predictions(preds: Iterable[Prediction]) -> bytes:
    lines = [json.dumps(p.to_record(), separators=(",", ":")) for p in preds]
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


# -- whole dataset ----------------------------------------------------------


@dataclass
class Dataset:
    manifest: DatasetManifest
    polygons: dict[str, PolygonFile]
    rows: list[EthogramRow]
    merged: MergeResult

    @property
    def frames(self) -> list[FrameAnnotation]:
        return self.merged.frames

    @property
    def report(self) -> ValidationReport:
        return self.merged.report


def load_dataset(manifest_path) -> Dataset:
    """Read every file a manifest points at, validate and merge."""
    manifest = load_manifest(manifest_path)
    root = manifest.root or Path(".")
    poly_dir = root / manifest.polygon_dir
    polygons = {}
    for p in sorted(poly_dir.glob("*.json")):
        try:
            polygons[p.name] = parse_polygon_json(p.read_bytes())
        except ParseError as exc:
            raise ParseError(f"{p}: {exc}", offset=exc.offset) from exc
    rows: list[EthogramRow] = []
    for rel in manifest.ethogram_paths:
        path = root / rel
        try:
            rows.extend(parse_ethogram_csv(path.read_bytes()))
        except ParseError as exc:
            raise ParseError(f"{path}: {exc}", row=exc.row) from exc
    merged = merge_annotations(polygons, rows, manifest)
    return Dataset(manifest, polygons, rows, merged)
