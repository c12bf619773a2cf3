import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Polygon as ShapelyPolygon

from penwatch.geometry import (
    BBox,
    InvalidGeometry,
    Polygon8,
    bbox_iou,
    bbox_iou_matrix,
    bbox_to_polygon,
    is_convex,
    polygon_area,
    polygon_iou,
    polygon_to_bbox,
    signed_area,
    validate_polygon,
)

UNIT_SQUARE = [(0, 0), (0.5, 0), (1, 0), (1, 0.5), (1, 1), (0.5, 1), (0, 1), (0, 0.5)]


def pixel_count_iou(a, b):
    """IoU of integer boxes by counting unit cells."""
    cells = lambda box: {(x, y) for x in range(box[0], box[2]) for y in range(box[1], box[3])}
    ca, cb = cells(a), cells(b)
    return len(ca & cb) / len(ca | cb)


def star(cx, cy, radii, phase=0.0):
    ang = phase + np.arange(8) * 2 * math.pi / 8
    return [(cx + r * math.cos(t), cy + r * math.sin(t)) for r, t in zip(radii, ang)]


def test_unit_square_area():
    assert polygon_area(UNIT_SQUARE) == pytest.approx(1.0, abs=1e-12)
    assert signed_area(UNIT_SQUARE) > 0  # clockwise on screen


def test_right_triangle_padded_to_eight_points():
    tri = [(0, 0), (1, 0), (2, 0), (3, 0), (0, 4), (0, 3), (0, 2), (0, 1)]
    assert polygon_area(tri) == pytest.approx(6.0, abs=1e-12)


def test_collinear_outline_has_zero_area():
    line = [(i, 2 * i) for i in range(8)]
    assert polygon_area(line) == 0.0
    assert validate_polygon(line, 100, 100) == ["ZeroArea"]


def test_diamond_bbox():
    diamond = [(5, 0), (7.5, 2.5), (10, 5), (7.5, 7.5), (5, 10), (2.5, 7.5), (0, 5), (2.5, 2.5)]
    assert polygon_to_bbox(diamond) == BBox(0, 0, 10, 10)
    assert polygon_area(diamond) == pytest.approx(50.0)


def test_box_iou_overlapping_squares():
    assert bbox_iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)
    assert pixel_count_iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)


def test_box_iou_touching_and_disjoint():
    assert bbox_iou(BBox(0, 0, 1, 1), BBox(1, 0, 2, 1)) == 0.0
    assert bbox_iou(BBox(0, 0, 1, 1), BBox(5, 5, 6, 6)) == 0.0


def test_shifted_unit_squares():
    moved = [(x + 0.5, y) for x, y in UNIT_SQUARE]
    assert polygon_iou(UNIT_SQUARE, moved, method="exact") == pytest.approx(1 / 3, abs=1e-12)
    assert polygon_iou(UNIT_SQUARE, moved, method="raster", resolution=8) == pytest.approx(1 / 3, abs=1e-12)


def test_identical_polygons():
    p = star(50, 50, [30, 10, 30, 10, 30, 10, 30, 10])
    assert not is_convex(p)
    assert polygon_iou(p, p) == 1.0


@pytest.mark.parametrize(
    "a,b",
    [((0, 0, 2, 2), (1, 1, 3, 3)), ((0, 0, 10, 4), (3, 1, 7, 9)), ((2, 2, 5, 5), (0, 0, 8, 8))],
)
def test_box_iou_matches_cell_count(a, b):
    assert bbox_iou(BBox(*a), BBox(*b)) == pytest.approx(pixel_count_iou(a, b), abs=1e-12)
    # integer boxes are resolved exactly by the scanline fill too
    pa, pb = bbox_to_polygon(BBox(*a)), bbox_to_polygon(BBox(*b))
    assert polygon_iou(pa, pb, method="raster", resolution=1) == pytest.approx(pixel_count_iou(a, b), abs=1e-12)


def test_degenerate_inputs():
    line = [(i, i) for i in range(8)]
    with pytest.raises(InvalidGeometry):
        polygon_iou(line, line)
    assert polygon_iou(line, UNIT_SQUARE) == 0.0


def test_exact_needs_convex():
    p = star(50, 50, [30, 10, 30, 10, 30, 10, 30, 10])
    with pytest.raises(InvalidGeometry):
        polygon_iou(p, star(55, 50, [20] * 8), method="exact")


def test_star_with_same_sign_turns_is_not_convex():
    # a pentagram visits its vertices with consistent turns but winds twice
    pts = [(math.cos(t), math.sin(t)) for t in np.arange(5) * 4 * math.pi / 5]
    assert not is_convex(pts)
    assert is_convex(UNIT_SQUARE)


def test_polygon8_requires_eight_finite_points():
    with pytest.raises(InvalidGeometry):
        Polygon8(UNIT_SQUARE[:7])
    with pytest.raises(InvalidGeometry):
        Polygon8(UNIT_SQUARE[:7] + [(float("nan"), 0)])
    p = Polygon8(UNIT_SQUARE)
    assert p.head == (0, 0) and p.tail == (1, 1)
    assert Polygon8.from_flat(p.flat()) == p
    assert p.is_clockwise


def test_bbox_rejects_empty():
    with pytest.raises(InvalidGeometry):
        BBox(1, 0, 1, 5)


def test_validate_polygon_codes():
    assert validate_polygon(UNIT_SQUARE, 10, 10) == []
    assert validate_polygon(UNIT_SQUARE[:7], 10, 10) == ["WrongPointCount"]
    assert validate_polygon(UNIT_SQUARE[::-1], 10, 10) == ["CounterClockwise"]
    assert validate_polygon([(x + 9.5, y) for x, y in UNIT_SQUARE], 10, 10) == ["OutOfFrame"]
    assert validate_polygon(UNIT_SQUARE[:7] + [(float("inf"), 0)], 10, 10) == ["NonFinite"]


def test_box_matrix_matches_scalar():
    rng = np.random.default_rng(3)
    a = rng.uniform(0, 50, (6, 2))
    b = rng.uniform(0, 50, (9, 2))
    ba = np.hstack([a, a + rng.uniform(1, 30, (6, 2))])
    bb = np.hstack([b, b + rng.uniform(1, 30, (9, 2))])
    m = bbox_iou_matrix(ba, bb)
    for i in range(6):
        for j in range(9):
            assert m[i, j] == pytest.approx(bbox_iou(BBox(*ba[i]), BBox(*bb[j])), abs=1e-15)


def test_convex_clip_matches_shapely():
    rng = np.random.default_rng(11)
    for _ in range(200):
        a = star(*rng.uniform(40, 60, 2), [rng.uniform(10, 30)] * 8, rng.uniform(0, 1))
        b = star(*rng.uniform(40, 60, 2), [rng.uniform(10, 30)] * 8, rng.uniform(0, 1))
        sa, sb = ShapelyPolygon(a), ShapelyPolygon(b)
        ref = sa.intersection(sb).area / sa.union(sb).area
        assert polygon_iou(a, b, method="exact") == pytest.approx(ref, abs=1e-9)


def test_raster_close_to_shapely_for_concave():
    rng = np.random.default_rng(12)
    for _ in range(100):
        a = star(*rng.uniform(40, 60, 2), rng.uniform(8, 30, 8))
        b = star(*rng.uniform(40, 60, 2), rng.uniform(8, 30, 8))
        sa, sb = ShapelyPolygon(a), ShapelyPolygon(b)
        ref = sa.intersection(sb).area / sa.union(sb).area
        assert polygon_iou(a, b, method="raster") == pytest.approx(ref, abs=0.01)


coord = st.floats(0, 200, allow_nan=False)
size = st.floats(1, 100, allow_nan=False)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(size), draw(size)
    return BBox(x, y, x + w, y + h)


@settings(max_examples=300, deadline=None)
@given(boxes(), boxes())
def test_box_iou_properties(a, b):
    v = bbox_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == bbox_iou(b, a)
    assert bbox_iou(a, a) == 1.0


@settings(max_examples=100, deadline=None)
@given(boxes(), boxes())
def test_polygon_iou_properties(a, b):
    pa, pb = bbox_to_polygon(a), bbox_to_polygon(b)
    v = polygon_iou(pa, pb)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(polygon_iou(pb, pa), abs=1e-12)
    assert v == pytest.approx(bbox_iou(a, b), abs=1e-9)
    assert polygon_iou(pa, pa) == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(5, 40), min_size=8, max_size=8), st.floats(-20, 20), st.floats(-20, 20))
def test_iou_translation_invariant(radii, dx, dy):
    a = Polygon8(star(100, 100, radii))
    b = Polygon8(star(110, 95, radii[::-1]))
    # integer shifts keep the sampling grid aligned, so the raster count is unchanged
    dx, dy = round(dx), round(dy)
    assert polygon_iou(a, b) == pytest.approx(polygon_iou(a.translate(dx, dy), b.translate(dx, dy)), abs=1e-9)
