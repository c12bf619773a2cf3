import json

import pytest

from penwatch.geometry import BBox, bbox_to_polygon
from penwatch.report import build_report, csv_bytes
from penwatch.schema import Behavior, Bird, FrameAnnotation, Posture, Prediction


def bird(bid, box, posture, behavior=Behavior.CONTROL):
    return Bird(bid, polygon=bbox_to_polygon(BBox(*box)), posture=posture, behavior=behavior)


@pytest.fixture
def frames():
    return [
        FrameAnnotation("281", 0, [bird(1, (0, 0, 10, 10), Posture.SITTING), bird(2, (20, 0, 30, 10), Posture.WALKING)]),
        FrameAnnotation("281", 1, [bird(1, (0, 0, 10, 10), Posture.STANDING)]),
    ]


def test_posture_labels_are_binarized(frames):
    preds = [
        Prediction("281", 0, BBox(0, 0, 10, 10), "STD", 0.9),  # SIT vs STD: both stationary
        Prediction("281", 0, BBox(20, 0, 30, 10), "STN", 0.8),  # walking bird called stationary
        Prediction("281", 1, BBox(0, 0, 10, 10), "WLK", 0.7),
    ]
    rep = build_report(frames, preds)
    blk = rep.classification["posture"]
    assert blk.cm.classes == ("STN", "WLK")
    assert blk.cm.counts.tolist() == [[1, 1], [1, 0]]
    assert "behavior" not in rep.classification
    assert rep.counts[0.5] == {"tp": 3, "fp": 0, "fn": 0}


def test_generic_label_skips_classification(frames):
    preds = [Prediction("281", 0, BBox(0, 0, 10, 10), "BIRD", 0.9)]
    rep = build_report(frames, preds)
    assert rep.classification == {}
    assert rep.counts[0.1] == {"tp": 1, "fp": 0, "fn": 2}


def test_report_files_are_stable(frames):
    preds = [Prediction("281", 0, BBox(0, 0, 10, 10), "CTR", 0.9)]
    a = build_report(frames, preds).files()
    b = build_report(frames, preds).files()
    assert a == b
    doc = json.loads(a["report.json"])
    assert doc["ap"]["requested"] == {"0.10": round(34 / 101, 4), "0.50": round(34 / 101, 4),
                                      "0.75": round(34 / 101, 4)}


def test_csv_float_format():
    assert csv_bytes(["a", "b"], [[1 / 3, 2]]) == b"a,b\n0.3333,2\n"
