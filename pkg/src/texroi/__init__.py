"""Patellar texture classification pipeline.

Public surface: dataset ingestion (`data`), image preprocessing (`imaging`),
landmark geometry and ROIs (`geometry`), LBP features (`lbp`), the boosted
tree and CNN learners (`gbm`, `cnn`), evaluation statistics (`metrics`),
experiment orchestration (`experiment`), the synthetic cohort generator
(`synth`), and the `texroi` CLI (`cli`).
"""

from .cnn import CnnClassifier, CnnConfig, TrainConfig
from .data import ClinicalRecord, Dataset, KneeSample, load_manifest, validate_dataset
from .experiment import (ExperimentConfig, FoldAssignment, ModelSpec,
                         OofPredictions, run_experiment,
                         stratified_subject_kfold)
from .gbm import GbmClassifier, GbmConfig, GbmModel, predict_gbm, train_gbm
from .geometry import LandmarkSet, RoiPatch, align_patella, extract_roi, load_landmarks
from .imaging import ImageGrid, load_image, preprocess
from .lbp import LbpConfig, LbpFeatures, LbpHistogram, lbp_code, lbp_histogram
from .metrics import (PredictionSet, average_precision, bootstrap_ci, brier,
                      delong_test, pr_curve, roc_auc, roc_curve)
from .synth import SynthConfig, generate_cohort

__version__ = "0.1.0"

__all__ = [
    "ClinicalRecord", "CnnClassifier", "CnnConfig", "Dataset",
    "ExperimentConfig", "FoldAssignment", "GbmClassifier", "GbmConfig",
    "GbmModel", "ImageGrid", "KneeSample", "LandmarkSet", "LbpConfig",
    "LbpFeatures", "LbpHistogram", "ModelSpec", "OofPredictions",
    "PredictionSet", "RoiPatch", "SynthConfig", "TrainConfig",
    "align_patella", "average_precision", "bootstrap_ci", "brier",
    "delong_test", "extract_roi", "generate_cohort", "lbp_code",
    "lbp_histogram", "load_image", "load_landmarks", "load_manifest",
    "pr_curve", "predict_gbm", "preprocess", "roc_auc", "roc_curve",
    "run_experiment", "stratified_subject_kfold", "train_gbm",
    "validate_dataset",
]
