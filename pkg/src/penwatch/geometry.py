"""Planar geometry for eight-point bird outlines and axis-aligned boxes.

All coordinates are image pixels with ``y`` growing downward.  Under the
shoelace sum ``sum(x_i * y_{i+1} - x_{i+1} * y_i)`` a polygon traced
clockwise on screen has a *positive* signed area, so ``signed_area(p) > 0``
is the orientation test used throughout the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence, Union

import numpy as np

__all__ = [
    "InvalidGeometry",
    "Point",
    "Polygon8",
    "BBox",
    "ANOMALY_CODES",
    "signed_area",
    "polygon_area",
    "polygon_to_bbox",
    "bbox_to_polygon",
    "bbox_iou",
    "bbox_iou_matrix",
    "polygon_iou",
    "is_convex",
    "validate_polygon",
]

DEFAULT_RESOLUTION = 4
HEAD_INDEX = 0
TAIL_INDEX = 4

ANOMALY_CODES = ("NonFinite", "WrongPointCount", "OutOfFrame", "CounterClockwise", "ZeroArea")

_AREA_EPS = 1e-9
_RASTER_CHUNK_ROWS = 512


class InvalidGeometry(ValueError):
    """Raised when a geometric value violates its invariants."""


class Point(NamedTuple):
    x: float
    y: float


def _as_points(points: Iterable[Sequence[float]]) -> tuple[Point, ...]:
    out = []
    for p in points:
        try:
            x, y = p
            x, y = float(x), float(y)
        except (TypeError, ValueError) as exc:
            raise InvalidGeometry(f"malformed point {p!r}") from exc
        if not (math.isfinite(x) and math.isfinite(y)):
            raise InvalidGeometry(f"non-finite coordinate in point {p!r}")
        out.append(Point(x, y))
    return tuple(out)


@dataclass(frozen=True)
class Polygon8:
    """Eight ordered outline points; vertex 0 is the head, vertex 4 the tail.

    Construction checks the vertex count and finiteness only.  Orientation
    and area are data-quality questions answered by :func:`validate_polygon`.
    """

    points: tuple[Point, ...]

    def __post_init__(self):
        pts = _as_points(self.points)
        if len(pts) != 8:
            raise InvalidGeometry(f"Polygon8 needs exactly 8 points, got {len(pts)}")
        object.__setattr__(self, "points", pts)

    @property
    def head(self) -> Point:
        return self.points[HEAD_INDEX]

    @property
    def tail(self) -> Point:
        return self.points[TAIL_INDEX]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)

    def flat(self) -> list[float]:
        return [c for p in self.points for c in p]

    def translate(self, dx: float, dy: float) -> "Polygon8":
        return Polygon8(tuple(Point(p.x + dx, p.y + dy) for p in self.points))

    @property
    def is_clockwise(self) -> bool:
        return signed_area(self) > 0

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> "Polygon8":
        if len(values) != 16:
            raise InvalidGeometry(f"flat polygon needs 16 numbers, got {len(values)}")
        return cls(tuple(zip(values[0::2], values[1::2])))


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        try:
            vals = tuple(float(v) for v in (self.x_min, self.y_min, self.x_max, self.y_max))
        except (TypeError, ValueError):
            raise InvalidGeometry("box coordinates must be numbers") from None
        for name, v in zip(("x_min", "y_min", "x_max", "y_max"), vals):
            object.__setattr__(self, name, v)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidGeometry(f"non-finite box {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidGeometry(f"empty box {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


PolygonLike = Union[Polygon8, Sequence[Sequence[float]], np.ndarray]


def _coords(p: PolygonLike) -> np.ndarray:
    if isinstance(p, Polygon8):
        return p.as_array()
    arr = np.asarray(_as_points(p), dtype=float)
    return arr.reshape(-1, 2)


def signed_area(p: PolygonLike) -> float:
    """Shoelace area; positive for clockwise outlines in image coordinates."""
    xy = _coords(p)
    if len(xy) < 3:
        return 0.0
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return float(0.5 * np.sum(x * yn - xn * y))


def polygon_area(p: PolygonLike) -> float:
    """Unsigned shoelace area. Degenerate outlines give 0."""
    a = abs(signed_area(p))
    return 0.0 if a <= _AREA_EPS else a


def polygon_to_bbox(p: PolygonLike) -> BBox:
    xy = _coords(p)
    x0, y0 = xy.min(axis=0)
    x1, y1 = xy.max(axis=0)
    if not (x0 < x1 and y0 < y1):
        raise InvalidGeometry("polygon has zero width or height")
    return BBox(float(x0), float(y0), float(x1), float(y1))


def bbox_to_polygon(b: BBox) -> Polygon8:
    """Clockwise eight-point outline of a box: corners plus edge midpoints."""
    xm = 0.5 * (b.x_min + b.x_max)
    ym = 0.5 * (b.y_min + b.y_max)
    return Polygon8(
        (
            (b.x_min, b.y_min),
            (xm, b.y_min),
            (b.x_max, b.y_min),
            (b.x_max, ym),
            (b.x_max, b.y_max),
            (xm, b.y_max),
            (b.x_min, b.y_max),
            (b.x_min, ym),
        )
    )


def bbox_iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def bbox_iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between box arrays of shape (n, 4) and (m, 4)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.minimum(1.0, inter / union)


# -- convex fast path -------------------------------------------------------


def _dedupe(xy: np.ndarray) -> np.ndarray:
    keep = np.any(np.abs(xy - np.roll(xy, -1, axis=0)) > 0, axis=1)
    return xy[keep]


def is_convex(p: PolygonLike) -> bool:
    """True for simple convex outlines; repeated and collinear vertices are allowed."""
    xy = _dedupe(_coords(p))
    if len(xy) < 3:
        return False
    e = np.roll(xy, -1, axis=0) - xy
    en = np.roll(e, -1, axis=0)
    cross = e[:, 0] * en[:, 1] - e[:, 1] * en[:, 0]
    dot = np.sum(e * en, axis=1)
    if np.any(cross > 0) and np.any(cross < 0):
        return False
    # same-sign turns can still wind twice (star shapes)
    turning = np.sum(np.arctan2(cross, dot))
    return bool(abs(abs(turning) - 2 * math.pi) < 1e-6)


def _clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman; both inputs convex with positive signed area."""
    out = subject
    n = len(clip)
    for i in range(n):
        if len(out) == 0:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b - a
        side = ex * (out[:, 1] - a[1]) - ey * (out[:, 0] - a[0])
        nxt = []
        m = len(out)
        for j in range(m):
            p, q = out[j], out[(j + 1) % m]
            sp, sq = side[j], side[(j + 1) % m]
            if sp >= 0:
                nxt.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                nxt.append(p + t * (q - p))
        out = np.asarray(nxt).reshape(-1, 2)
    return out


def _positive(xy: np.ndarray) -> np.ndarray:
    return xy if signed_area(xy) >= 0 else xy[::-1]


def _convex_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _positive(_dedupe(a)), _positive(_dedupe(b))
    inter_poly = _clip_convex(a, b)
    inter = polygon_area(inter_poly) if len(inter_poly) >= 3 else 0.0
    union = polygon_area(a) + polygon_area(b) - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


# -- scanline rasterization -------------------------------------------------


def _row_spans(xy: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Even-odd crossings of each scanline, sorted; +inf pads missing ones."""
    p, q = xy, np.roll(xy, -1, axis=0)
    py, qy = p[None, :, 1], q[None, :, 1]
    y = ys[:, None]
    # half-open rule so a vertex on the scanline is counted once
    spans = ((py <= y) & (y < qy)) | ((qy <= y) & (y < py))
    with np.errstate(divide="ignore", invalid="ignore"):
        x = p[None, :, 0] + (y - py) * (q[None, :, 0] - p[None, :, 0]) / (qy - py)
    x = np.where(spans, x, np.inf)
    return np.sort(x, axis=1)


def _fill_rows(xy: np.ndarray, ys: np.ndarray, x0: float, step: float, nx: int) -> np.ndarray:
    cross = _row_spans(xy, ys)
    ny = len(ys)
    diff = np.zeros((ny, nx + 1), dtype=np.int16)
    for k in range(0, cross.shape[1] - 1, 2):
        xa, xb = cross[:, k], cross[:, k + 1]
        ok = np.isfinite(xa) & np.isfinite(xb)
        if not ok.any():
            continue
        rows = np.nonzero(ok)[0]
        # sample centre x0 + (i + 0.5) * step lies in [xa, xb)
        ia = np.clip(np.ceil((xa[ok] - x0) / step - 0.5), 0, nx).astype(np.int64)
        ib = np.clip(np.ceil((xb[ok] - x0) / step - 0.5), 0, nx).astype(np.int64)
        np.add.at(diff, (rows, ia), 1)
        np.add.at(diff, (rows, ib), -1)
    return np.cumsum(diff, axis=1)[:, :nx] > 0


def _raster_iou(a: np.ndarray, b: np.ndarray, resolution: int) -> float:
    lo = np.floor(np.minimum(a.min(axis=0), b.min(axis=0)))
    hi = np.ceil(np.maximum(a.max(axis=0), b.max(axis=0)))
    step = 1.0 / resolution
    nx = max(1, int(round((hi[0] - lo[0]) * resolution)))
    ny = max(1, int(round((hi[1] - lo[1]) * resolution)))
    inter = union = 0
    for r0 in range(0, ny, _RASTER_CHUNK_ROWS):
        rows = np.arange(r0, min(ny, r0 + _RASTER_CHUNK_ROWS))
        ys = lo[1] + (rows + 0.5) * step
        ma = _fill_rows(a, ys, lo[0], step, nx)
        mb = _fill_rows(b, ys, lo[0], step, nx)
        inter += int(np.count_nonzero(ma & mb))
        union += int(np.count_nonzero(ma | mb))
    return inter / union if union else 0.0


def polygon_iou(
    a: PolygonLike,
    b: PolygonLike,
    resolution: int = DEFAULT_RESOLUTION,
    method: str = "auto",
) -> float:
    """IoU of two filled outlines.

    Parameters
    ----------
    a, b : Polygon8 or point sequence
    resolution : int
        Samples per pixel along each axis for the scanline fill.
    method : {"auto", "raster", "exact"}
        ``"auto"`` clips exactly when both outlines are convex and rasterizes
        otherwise; ``"exact"`` requires convex inputs.

    Self-intersecting outlines are filled with the even-odd rule.
    """
    if resolution < 1:
        raise InvalidGeometry("resolution must be >= 1")
    xa, xb = _coords(a), _coords(b)
    area_a, area_b = polygon_area(xa), polygon_area(xb)
    if area_a == 0 and area_b == 0:
        raise InvalidGeometry("both polygons are degenerate")
    if area_a == 0 or area_b == 0:
        return 0.0
    if (
        xa[:, 0].max() <= xb[:, 0].min()
        or xb[:, 0].max() <= xa[:, 0].min()
        or xa[:, 1].max() <= xb[:, 1].min()
        or xb[:, 1].max() <= xa[:, 1].min()
    ):
        return 0.0
    if method not in ("auto", "raster", "exact"):
        raise ValueError(f"unknown method {method!r}")
    if method != "raster":
        convex = is_convex(xa) and is_convex(xb)
        if convex:
            return _convex_iou(xa, xb)
        if method == "exact":
            raise InvalidGeometry("exact polygon IoU needs convex outlines")
    return _raster_iou(xa, xb, int(resolution))


def validate_polygon(points, frame_w: float, frame_h: float) -> list[str]:
    """Return anomaly codes for a raw annotated outline; empty when clean."""
    try:
        pts = _as_points(points)
    except InvalidGeometry:
        return ["NonFinite"]
    codes = []
    if len(pts) != 8:
        codes.append("WrongPointCount")
    if any(not (0 <= p.x <= frame_w and 0 <= p.y <= frame_h) for p in pts):
        codes.append("OutOfFrame")
    if len(pts) == 8:
        s = signed_area(pts)
        if abs(s) <= _AREA_EPS:
            codes.append("ZeroArea")
        elif s < 0:
            codes.append("CounterClockwise")
    return codes
