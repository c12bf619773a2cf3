"""Evaluation toolkit for pen-animal posture and behaviour annotations."""

__version__ = "0.1.0"

from .geometry import BBox, InvalidGeometry, Polygon8, bbox_iou, polygon_area, polygon_iou, polygon_to_bbox, validate_polygon
from .matching import MatchConfig, MatchResult, match_dataset, match_frame
from .metrics import (
    average_precision,
    classification_report,
    classifier_pr,
    coco_evaluate,
    confusion,
    detection_pr,
    posture_binarize,
)
from .folds import FoldSpec, VideoKFold, fold_evaluate, make_folds
from .report import MetricReport, build_report
from .schema import (
    DatasetManifest,
    FrameAnnotation,
    Prediction,
    load_dataset,
    merge_annotations,
    parse_ethogram_csv,
    parse_polygon_json,
    parse_predictions,
    validate_rows,
)
from .synthetic import NoiseConfig, SceneConfig, corrupt, generate_scene
from .welfare import WelfareRule, behavior_budget, evaluate_rules, sliding_budgets
