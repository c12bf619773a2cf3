"""Exit criteria for the toolkit.

Each test carries ``@pytest.mark.acceptance(<name>)``; the terminal summary
prints one PASS/FAIL line per name.
"""

import filecmp
import itertools
import json
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest
from matplotlib.path import Path as MplPath

from oracles import ap101
from penwatch.folds import make_folds
from penwatch.geometry import BBox, bbox_iou, bbox_to_polygon, polygon_iou
from penwatch.matching import MatchConfig, greedy_match, match_frame
from penwatch.metrics import (
    BEHAVIOR_CLASSES,
    COCO_THRESHOLDS,
    average_precision,
    classification_report,
    coco_evaluate,
    confusion,
    detection_pr,
)
from penwatch.report import build_report
from penwatch.schema import (
    ETHOGRAM_COLUMNS,
    Bird,
    DatasetManifest,
    FrameAnnotation,
    Prediction,
    load_dataset,
    parse_ethogram_csv,
    parse_polygon_json,
    parse_predictions,
    serialize_ethogram_csv,
    serialize_polygon_json,
    validate_rows,
)
from penwatch.synthetic import (
    NoiseConfig,
    SceneConfig,
    corrupt,
    generate_scene,
    ledger_ap,
    ledger_confusion,
    ledger_counts,
    ledger_f1,
    write_dataset,
)

# -- 1. geometry ---------------------------------------------------------------


def _random_outline(rng, cx, cy, radius):
    # star-shaped around the centre, so simple; often concave
    ang = np.linspace(0, 2 * np.pi, 8, endpoint=False) + rng.uniform(-0.3, 0.3, 8) + rng.uniform(0, 2 * np.pi)
    r = radius * rng.uniform(0.35, 1.0, 8)
    return np.column_stack([cx + r * np.cos(ang), cy + r * np.sin(ang)])


@pytest.mark.acceptance("geometry-oracle")
def test_polygon_iou_against_monte_carlo():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        r1, r2 = rng.uniform(8, 80, 2)
        c1 = rng.uniform(100, 500, 2)
        c2 = c1 + rng.uniform(-1, 1, 2) * (r1 + r2) * 0.6
        a, b = _random_outline(rng, *c1, r1), _random_outline(rng, *c2, r2)
        got = polygon_iou(a, b, method="raster")
        lo, hi = np.minimum(a.min(0), b.min(0)), np.maximum(a.max(0), b.max(0))
        pts = lo + rng.random((100_000, 2)) * (hi - lo)
        in_a, in_b = MplPath(a).contains_points(pts), MplPath(b).contains_points(pts)
        union = np.count_nonzero(in_a | in_b)
        mc = np.count_nonzero(in_a & in_b) / union if union else 0.0
        worst = max(worst, abs(got - mc))
        assert abs(got - mc) <= 0.01, (a, b, got, mc)
    elapsed = time.perf_counter() - start
    print(f"max |raster - MC| = {worst:.4f}, {elapsed:.1f}s")
    assert elapsed < 30


@pytest.mark.acceptance("geometry-oracle")
def test_box_iou_against_exact_arithmetic():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        x0, y0 = rng.uniform(0, 100, 2)
        a = (x0, y0, x0 + rng.uniform(0.5, 60), y0 + rng.uniform(0.5, 60))
        x1, y1 = rng.uniform(0, 100, 2)
        b = (x1, y1, x1 + rng.uniform(0.5, 60), y1 + rng.uniform(0.5, 60))
        fa, fb = [Fraction(v) for v in a], [Fraction(v) for v in b]
        iw = max(Fraction(0), min(fa[2], fb[2]) - max(fa[0], fb[0]))
        ih = max(Fraction(0), min(fa[3], fb[3]) - max(fa[1], fb[1]))
        inter = iw * ih
        union = (fa[2] - fa[0]) * (fa[3] - fa[1]) + (fb[2] - fb[0]) * (fb[3] - fb[1]) - inter
        assert abs(bbox_iou(BBox(*a), BBox(*b)) - float(inter / union)) <= 1e-12


# -- 2. matching ---------------------------------------------------------------

ALPHAS = (0.1, 0.3, 0.5, 0.75, 0.9)


def _random_boxes(rng, n):
    xy = rng.uniform(0, 200, (n, 2))
    wh = rng.uniform(10, 60, (n, 2))
    return [BBox(*p, *(p + s)) for p, s in zip(xy, wh)]


@pytest.mark.acceptance("matching-properties")
def test_greedy_matching_properties():
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    for _ in range(10_000):
        gts = [Bird(i + 1, polygon=bbox_to_polygon(b)) for i, b in enumerate(_random_boxes(rng, rng.integers(0, 9)))]
        preds = [Prediction("v", 0, b, "BIRD", 0.5) for b in _random_boxes(rng, rng.integers(0, 11))]
        counts = []
        for a in ALPHAS:
            res = match_frame(gts, preds, MatchConfig(a))
            g = [p[0] for p in res.pairs]
            p = [p[1] for p in res.pairs]
            assert len(set(g)) == len(g) and len(set(p)) == len(p)
            for gi, pj, iou in res.pairs:
                assert iou > a
                assert bbox_iou(BBox(*_box_of(gts[gi])), preds[pj].bbox) > a
            assert res.tp + res.fn == len(gts) and res.tp + res.fp == len(preds)
            counts.append(res.tp)
        assert counts == sorted(counts, reverse=True)
    elapsed = time.perf_counter() - start
    print(f"10000 frames x {len(ALPHAS)} thresholds in {elapsed:.1f}s")
    assert elapsed < 60


def _box_of(bird):
    xy = bird.polygon.as_array()
    return (*xy.min(0), *xy.max(0))


@pytest.mark.acceptance("matching-properties")
def test_matching_properties_on_raw_matrices_with_ties():
    rng = np.random.default_rng(12)
    levels = np.array([0.0, 0.1, 0.3, 0.5, 0.75, 0.9, 0.95, 1.0])
    for _ in range(10_000):
        iou = rng.choice(levels, (rng.integers(0, 7), rng.integers(0, 7)))
        tps = []
        for a in ALPHAS:
            res = greedy_match(iou, a)
            assert len({p[1] for p in res.pairs}) == len(res.pairs)
            assert all(iou[i, j] > a for i, j, _ in res.pairs)
            tps.append(res.tp)
        assert tps == sorted(tps, reverse=True)


# -- 3. ledger equivalence -------------------------------------------------------

CONFUSED = {
    "EAT": {"EAT": 0.85, "FOR": 0.1, "CTR": 0.05},
    "CTR": {"CTR": 0.9, "EAT": 0.1},
    "FOR": {"FOR": 0.5, "EAT": 0.3, "PRE": 0.2},
    "PRE": {"PRE": 0.6, "PRA": 0.3, "CTR": 0.1},
    "PRA": {"PRA": 0.3, "PRE": 0.7},
}


@pytest.mark.acceptance("ledger-equivalence")
def test_pipeline_matches_ledger_replay(tmp_path):
    start = time.perf_counter()
    alphas = sorted(set(COCO_THRESHOLDS) | {0.1})
    for seed in range(20):
        scene = generate_scene(SceneConfig(n_birds=20, n_frames=100), seed)
        preds, ledger = corrupt(scene.frames, NoiseConfig(label_confusion=CONFUSED), seed)
        # go through the files so parsing and merging are part of the pipeline
        out = tmp_path / f"s{seed}"
        write_dataset(scene, out, preds, ledger)
        ds = load_dataset(out / "manifest.json")
        assert not ds.report
        preds = parse_predictions((out / "predictions.ndjson").read_bytes())
        rep = build_report(ds.frames, preds, alphas=alphas, class_alpha=0.5)

        for a in alphas:
            assert rep.counts[a] == ledger_counts(ledger, a), (seed, a)
            assert abs(rep.ap.per_threshold[a] - ledger_ap(ledger, a)) <= 1e-9, (seed, a)
        ref_map = sum(ledger_ap(ledger, a) for a in COCO_THRESHOLDS) / len(COCO_THRESHOLDS)
        assert abs(rep.ap.coco_map - ref_map) <= 1e-9

        m = ledger_confusion(ledger, 0.5)
        blk = rep.classification["behavior"]
        assert blk.cm.counts.tolist() == m
        ref = ledger_f1(m)
        r = blk.report
        assert abs(r.accuracy - ref["accuracy"]) <= 1e-9
        assert abs(r.macro_f1 - ref["macro_f1"]) <= 1e-9
        assert abs(r.weighted_f1 - ref["weighted_f1"]) <= 1e-9
        for c, f in zip(BEHAVIOR_CLASSES, ref["f1"]):
            assert abs(r.per_class_f1[c] - f) <= 1e-9
    elapsed = time.perf_counter() - start
    print(f"20 seeds in {elapsed:.1f}s")
    assert elapsed < 120


# -- 4. COCO AP protocol ---------------------------------------------------------------

GT_SIZE = 50.0


def _gt(slot):
    x = slot * 100.0
    return BBox(x, 0, x + GT_SIZE, GT_SIZE)


def _det(kind, slot):
    b = _gt(slot)
    if kind == "tp":
        return b
    if kind == "dup":  # second box on an already claimed bird, IoU 0.9
        return b.translate(GT_SIZE * 0.1 / 1.9, 0)
    if kind == "loc":  # IoU exactly 0.6
        return b.translate(12.5, 0)
    if kind == "fp":
        return BBox(b.x_min, 500, b.x_max, 550)
    raise ValueError(kind)


# (ground-truth slots per frame, ranked detections (frame, kind, slot), expected hits per alpha)
SCRIPTED = {
    "worked example": (
        {0: 3}, [(0, "tp", 0), (0, "fp", 1), (0, "tp", 1)],
        {0.5: [1, 0, 1], 0.75: [1, 0, 1]},
    ),
    "duplicate and loose box": (
        {0: 3}, [(0, "tp", 0), (0, "dup", 0), (0, "tp", 1), (0, "fp", 0), (0, "loc", 2)],
        {0.5: [1, 0, 1, 0, 1], 0.75: [1, 0, 1, 0, 0]},
    ),
    "two frames": (
        {0: 2, 1: 1}, [(1, "tp", 0), (0, "fp", 0), (0, "loc", 0), (0, "tp", 1), (1, "dup", 0), (1, "fp", 0)],
        {0.5: [1, 0, 1, 1, 0, 0], 0.75: [1, 0, 0, 1, 0, 0]},
    ),
    "only false positives": ({0: 2}, [(0, "fp", 0), (0, "fp", 1), (0, "fp", 2)], {0.5: [0, 0, 0]}),
    "ten perfect": ({0: 10}, [(0, "tp", i) for i in range(10)], {0.5: [1] * 10, 0.95: [1] * 10}),
    "late hit": ({0: 1}, [(0, "fp", 0), (0, "fp", 1), (0, "fp", 2), (0, "tp", 0)], {0.5: [0, 0, 0, 1]}),
    "low recall": ({0: 4}, [(0, "tp", 2)], {0.5: [1]}),
    "loose first": (
        {0: 2}, [(0, "loc", 0), (0, "tp", 0), (0, "tp", 1)],
        {0.5: [1, 0, 1], 0.75: [0, 1, 1]},
    ),
}


@pytest.mark.acceptance("coco-ap-protocol")
@pytest.mark.parametrize("name", list(SCRIPTED))
def test_scripted_rankings_match_brute_force(name):
    gt_slots, dets, expected = SCRIPTED[name]
    assert len(dets) <= 10
    frames = [FrameAnnotation("v", f, [Bird(s + 1, polygon=bbox_to_polygon(_gt(s))) for s in range(n)])
              for f, n in gt_slots.items()]
    n = len(dets)
    preds = [Prediction("v", f, _det(kind, slot), "BIRD", 1.0 - i / (n + 1)) for i, (f, kind, slot) in enumerate(dets)]
    n_gt = sum(gt_slots.values())
    ap = coco_evaluate(frames, preds, "bbox", alphas=list(expected))
    for a, hits in expected.items():
        ref = ap101(hits, n_gt)
        assert abs(ap.per_threshold[a] - ref) <= 1e-9, (name, a)
        assert abs(average_precision(detection_pr([(p.score, h) for p, h in zip(preds, hits)], n_gt)) - ref) <= 1e-9


@pytest.mark.acceptance("coco-ap-protocol")
def test_worked_example_value():
    assert ap101([1, 0, 1], 3) == pytest.approx(56 / 101, abs=1e-12)
    curve = detection_pr([(0.9, True), (0.8, False), (0.7, True)], 3)
    assert abs(average_precision(curve) - 56 / 101) <= 1e-9
    assert abs(average_precision(curve, "all_point") - 5 / 9) <= 1e-9


@pytest.mark.acceptance("coco-ap-protocol")
def test_every_short_ranking_matches_brute_force():
    for n in range(1, 11):
        for hits in itertools.product([0, 1], repeat=n):
            n_gt = max(1, sum(hits)) + n % 3
            curve = detection_pr([(1.0 - i / (n + 1), h) for i, h in enumerate(hits)], n_gt)
            assert abs(average_precision(curve) - ap101(hits, n_gt)) <= 1e-9


# -- 5. formats -----------------------------------------------------------------------


@pytest.mark.acceptance("format-fidelity")
def test_golden_files(golden_dir):
    csv_raw = (golden_dir / "ethogram.csv").read_bytes()
    header = csv_raw.decode().splitlines()[0].split(",")
    assert header == list(ETHOGRAM_COLUMNS) and len(header) == 15
    rows = parse_ethogram_csv(csv_raw)
    assert not validate_rows(rows)
    assert serialize_ethogram_csv(rows) == csv_raw
    for p in sorted((golden_dir / "polygons").glob("*.json")):
        assert serialize_polygon_json(parse_polygon_json(p.read_bytes())) == p.read_bytes()
    ds = load_dataset(golden_dir / "manifest.json")
    assert not ds.report
    assert [len(f.gt_birds()) for f in ds.frames] == [2, 3]


@pytest.mark.acceptance("format-fidelity")
def test_count_three_row_is_rejected(golden_dir):
    lines = (golden_dir / "ethogram.csv").read_text().splitlines(keepends=True)
    lines[1] = lines[1].rsplit(",", 1)[0] + ",3\n"
    rows = parse_ethogram_csv("".join(lines))
    assert validate_rows(rows).codes() == ["CountRule"]


@pytest.mark.acceptance("format-fidelity")
def test_seven_point_polygon_is_rejected(golden_dir, tmp_path):
    import shutil

    root = tmp_path / "g"
    shutil.copytree(golden_dir, root)
    p = root / "polygons" / "281_00000.json"
    pf = parse_polygon_json(p.read_bytes())
    bid, pts = pf.shapes[0]
    pf.shapes[0] = (bid, pts[:7])
    p.write_bytes(serialize_polygon_json(pf))
    ds = load_dataset(root / "manifest.json")
    assert ds.report.codes() == ["WrongPointCount"]
    assert ds.frames[0].birds[0].polygon is None


# -- 6. folds ---------------------------------------------------------------------------


@pytest.mark.acceptance("fold-reproduction")
def test_camera_one_blocks():
    m = DatasetManifest(camera_id=1, video_ids=[str(v) for v in range(281, 291)], frame_width=1, frame_height=1)
    assert make_folds(m, 5).test_sets() == [
        ("281", "282"), ("283", "284"), ("285", "286"), ("287", "288"), ("289", "290")
    ]


@pytest.mark.acceptance("fold-reproduction")
def test_fold_invariants_on_random_manifests():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        n = int(rng.integers(2, 41))
        videos = [str(v) for v in rng.choice(10_000, n, replace=False)]
        k = int(rng.integers(2, n + 1))
        seed = None if rng.random() < 0.5 else int(rng.integers(1 << 31))
        m = DatasetManifest(camera_id=int(rng.integers(1, 4)), video_ids=videos, frame_width=1, frame_height=1)
        spec = make_folds(m, k, seed)
        assert spec == make_folds(m, k, seed)
        tests = spec.test_sets()
        assert len(tests) == k
        flat = [v for t in tests for v in t]
        assert sorted(flat) == sorted(videos) and len(set(flat)) == n
        sizes = [len(t) for t in tests]
        assert max(sizes) - min(sizes) <= 1
        for test, train in spec.folds:
            assert not set(test) & set(train)
            assert set(test) | set(train) == set(videos)


# -- 7. class imbalance -------------------------------------------------------------------

IMBALANCED = np.array([
    # CTR  EAT  FOR  PRA  PRE   (rows: truth)
    [900, 0, 0, 0, 0],
    [0, 870, 20, 2, 8],
    [0, 18, 10, 0, 2],
    [0, 3, 1, 2, 4],
    [0, 25, 3, 4, 28],
])


def _labels(matrix, classes):
    gt, pr = [], []
    for i, row in enumerate(matrix):
        for j, n in enumerate(row):
            gt += [classes[i]] * int(n)
            pr += [classes[j]] * int(n)
    return gt, pr


@pytest.mark.acceptance("class-imbalance")
def test_weighted_f1_exceeds_macro_and_majority_replication_is_neutral():
    classes = ["CTR", "EAT", "FOR", "PRA", "PRE"]
    assert IMBALANCED.sum(axis=1).tolist() == [900, 900, 30, 10, 60]
    gt, pr = _labels(IMBALANCED, classes)
    base = classification_report(confusion(gt, pr, classes))
    assert base.weighted_f1 > base.macro_f1
    assert base.accuracy > base.macro_f1
    majority = [(g, p) for g, p in zip(gt, pr) if g == "CTR"]
    for copies in (1, 2, 9):
        g2 = gt + [g for g, _ in majority] * copies
        p2 = pr + [p for _, p in majority] * copies
        rep = classification_report(confusion(g2, p2, classes))
        assert abs(rep.macro_f1 - base.macro_f1) <= 1e-12
        assert rep.weighted_f1 > base.weighted_f1


# -- 8. determinism -------------------------------------------------------------------------


def _cli(*args):
    proc = subprocess.run([sys.executable, "-m", "penwatch", *map(str, args)], capture_output=True, text=True)
    assert proc.returncode in (0, 1), proc.stderr
    return proc.returncode


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    assert not cmp.left_only and not cmp.right_only, (cmp.left_only, cmp.right_only)
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    assert not mismatch and not errors, mismatch
    for d in cmp.common_dirs:
        _same_tree(a / d, b / d)


@pytest.mark.acceptance("determinism")
def test_every_command_is_byte_reproducible(tmp_path):
    runs = {}

    def twice(name, *args, workers=None):
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{name}_{rep}"
            extra = ["--workers", workers] if workers is not None else []
            _cli(*args, "--out", out, *extra)
            outs.append(out)
        _same_tree(*outs)
        runs[name] = outs[0]
        return outs[0]

    data = twice("generate", "generate", "--birds", 10, "--frames", 20, "--videos", "281,282,283,284,285",
                 "--seed", 13)
    m = data / "manifest.json"
    pred = data / "predictions.ndjson"
    twice("validate", "validate", "--manifest", m)
    folds = twice("split", "split", "--manifest", m, "--seed", 5)
    twice("split_blocks", "split", "--manifest", m)
    for i in (1, 2, 3, 4, 5):
        (tmp_path / f"fold{i}.ndjson").write_bytes(pred.read_bytes())
    for workers in (1, -1):
        twice(f"match_{workers}", "match", "--manifest", m, "--predictions", pred, "--alpha", 0.5, "--alpha", 0.75,
              workers=workers)
        twice(f"evaluate_{workers}", "evaluate", "--manifest", m, "--predictions", pred, "--per-class", "behavior",
              workers=workers)
        twice(f"segm_{workers}", "evaluate", "--manifest", m, "--predictions", pred, "--mode", "segm",
              workers=workers)
        twice(f"folds_{workers}", "evaluate", "--manifest", m, "--folds", folds / "folds.json",
              "--fold-predictions", tmp_path / "fold{fold}.ndjson", workers=workers)
    twice("welfare", "welfare", "--manifest", m, "--window", 5, "--rule", "DRK<0.05@10")
    # parallel runs agree with serial ones too
    for name in ("match", "evaluate", "segm", "folds"):
        _same_tree(runs[f"{name}_1"], runs[f"{name}_-1"])
