"""Cross-validated experiment orchestration.

Builds subject-wise stratified folds, prepares per-knee features once
(preprocessing -> alignment -> ROIs -> LBP histograms / CNN patches), runs
each model out-of-fold with the same fold assignment, stacks level-1
predictions, and assembles the evaluation report.
"""

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, imaging
from .cnn import CnnConfig, TrainConfig, predict_cnn, train_cnn
from .data import CLINICAL_COLUMNS, Dataset
from .errors import DataError, FoldError
from .gbm import GbmConfig, predict_gbm, train_gbm
from .lbp import PROFILES, LbpConfig, lbp_histogram
from .metrics import (PredictionSet, average_precision, bootstrap_ci, brier,
                      delong_test, fold_t_interval, pr_curve, roc_auc, roc_curve)
from .plots import svg_curve_plot, write_curve_csv

log = logging.getLogger("texroi")

ROI_KINDS = ("superior", "inferior", "whole")
PREDICTION_HEADER = "knee_id,score,label"


# ---------------------------------------------------------------------------
# fold assignment

@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of: dict
    seed: int

    def __post_init__(self):
        folds = set(self.fold_of.values())
        if not folds or max(folds) >= self.k or min(folds) < 0:
            raise FoldError("fold indices out of range")

    def assignment_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(f"k={self.k};seed={self.seed}".encode())
        for knee_id in sorted(self.fold_of):
            digest.update(f";{knee_id}:{self.fold_of[knee_id]}".encode())
        return digest.hexdigest()[:16]

    def test_ids(self, fold: int) -> list[str]:
        return [kid for kid, f in self.fold_of.items() if f == fold]


def stratified_subject_kfold(ds: Dataset, k: int, seed: int) -> FoldAssignment:
    """Greedy subject-wise stratified folds.

    Subjects (all their knees together) are shuffled by `seed`, then each is
    assigned to the fold with the fewest positives so far, breaking ties by
    fewest total knees and then lowest fold index. This keeps per-fold
    prevalence near the global rate without ever splitting a subject.
    """
    if k < 2:
        raise FoldError("k must be >= 2")
    subjects: dict[str, list] = {}
    for s in ds.samples:
        subjects.setdefault(s.subject_id, []).append(s)
    with_pos = sum(1 for knees in subjects.values() if any(s.label for s in knees))
    with_neg = sum(1 for knees in subjects.values()
                   if any(s.label == 0 for s in knees))
    if with_pos < k or with_neg < k:
        raise FoldError(
            f"need at least {k} subjects with positives and {k} with "
            f"negatives, got {with_pos} and {with_neg}"
        )
    order = sorted(subjects)
    rng = np.random.default_rng(seed)
    shuffled = [order[i] for i in rng.permutation(len(order))]
    fold_pos = [0] * k
    fold_tot = [0] * k
    fold_of = {}
    for subject_id in shuffled:
        knees = subjects[subject_id]
        n_pos = sum(s.label for s in knees)
        if n_pos > 0:
            # fold furthest below its positive target, then emptiest
            f = min(range(k), key=lambda i: (fold_pos[i], fold_tot[i], i))
        else:
            # a zero-positive subject cannot reduce any positive deficit, so
            # the total-count tie-break decides
            f = min(range(k), key=lambda i: (fold_tot[i], i))
        fold_pos[f] += n_pos
        fold_tot[f] += len(knees)
        for s in knees:
            fold_of[s.knee_id] = f
    if min(fold_tot) == 0:
        raise FoldError("a fold ended up empty")
    return FoldAssignment(k, fold_of, seed)


# ---------------------------------------------------------------------------
# model registry

@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    learner: str                  # gbm | cnn | stack
    features: tuple[str, ...]     # "lbp", clinical column names, "patch"
    roi: str = "superior"
    level1: tuple[str, str] = ()  # stack inputs

    def __post_init__(self):
        if self.learner not in ("gbm", "cnn", "stack"):
            raise ValueError(f"unknown learner {self.learner!r}")
        if self.roi not in ROI_KINDS:
            raise ValueError(f"unknown ROI kind {self.roi!r}")


MODEL_SPECS = {
    "model1": ModelSpec("model1", "gbm", ("lbp",), roi="superior"),
    "model2": ModelSpec("model2", "gbm", ("age", "sex", "bmi")),
    "model3": ModelSpec("model3", "gbm", ("age", "sex", "bmi", "womac")),
    "model4": ModelSpec("model4", "gbm", ("age", "sex", "bmi", "kl")),
    "model5": ModelSpec("model5", "gbm", ("age", "sex", "bmi", "womac", "kl")),
    "model6": ModelSpec("model6", "cnn", ("patch",), roi="superior"),
    "model7": ModelSpec("model7", "gbm",
                        ("lbp", "age", "sex", "bmi", "womac", "kl"),
                        roi="superior"),
    "model8": ModelSpec("model8", "stack", (), level1=("model5", "model6")),
    # extra specs for the ROI comparison
    "lbp-inferior": ModelSpec("lbp-inferior", "gbm", ("lbp",), roi="inferior"),
    "lbp-whole": ModelSpec("lbp-whole", "gbm", ("lbp",), roi="whole"),
}
MODEL_ORDER = ("model1", "model2", "model3", "model4", "model5", "model6",
               "model7", "lbp-inferior", "lbp-whole", "model8")
DEFAULT_MODELS = ("model1", "model2", "model3", "model4", "model5", "model6",
                  "model7", "model8")


# ---------------------------------------------------------------------------
# feature preparation

@dataclass(frozen=True)
class FeatureBlock:
    knee_ids: tuple[str, ...]
    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.shape != (len(self.knee_ids), len(self.names)):
            raise DataError(
                f"feature block shape {values.shape} does not match "
                f"{len(self.knee_ids)} ids x {len(self.names)} names"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "knee_ids", tuple(self.knee_ids))
        object.__setattr__(self, "names", tuple(self.names))


def fuse_features(lbp: FeatureBlock, clinical: FeatureBlock) -> FeatureBlock:
    """Row-wise concatenation of two feature blocks over identical knees."""
    if lbp.knee_ids != clinical.knee_ids:
        raise DataError("cannot fuse feature blocks with mismatched knee ids")
    return FeatureBlock(
        lbp.knee_ids,
        np.hstack([lbp.values, clinical.values]),
        lbp.names + clinical.names,
    )


@dataclass
class ExperimentConfig:
    manifest: Path
    output_dir: Path
    models: tuple[str, ...] = DEFAULT_MODELS
    k: int = 5
    seed: int = 0
    image_spacing: float = imaging.DEFAULT_SPACING_MM
    preprocess_order: str = "truncate-first"
    lbp_profile: str = "paper"
    roi_width_mode: str = "bbox"
    patch_size: int = 64
    gbm: GbmConfig = field(default_factory=GbmConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ci_method: str = "bootstrap"
    n_boot: int = 2000
    ci_level: float = 0.95
    threads: int = 1
    dump_preprocessed: Path | None = None

    def __post_init__(self):
        unknown = [m for m in self.models if m not in MODEL_SPECS]
        if unknown:
            raise DataError(f"unknown model ids: {unknown}")
        if self.lbp_profile not in PROFILES:
            raise DataError(f"unknown lbp profile {self.lbp_profile!r}")
        if self.ci_method not in ("bootstrap", "fold-t"):
            raise DataError(f"unknown ci method {self.ci_method!r}")

    @property
    def lbp_config(self) -> LbpConfig:
        return PROFILES[self.lbp_profile]


def _needed_rois(model_ids) -> tuple[str, ...]:
    kinds = []
    for mid in model_ids:
        spec = MODEL_SPECS[mid]
        if "lbp" in spec.features or "patch" in spec.features:
            if spec.roi not in kinds:
                kinds.append(spec.roi)
    return tuple(kinds)


def prepare_knee(sample_args: dict) -> dict:
    """Preprocess one knee and extract its ROI features (top level so it can
    run in worker processes)."""
    img = imaging.load_image(sample_args["image_path"], sample_args["spacing"])
    pre = imaging.preprocess(img, sample_args["side"],
                             order=sample_args["order"])
    lm = geometry.load_landmarks(sample_args["landmark_path"])
    lm = geometry.rescale_landmarks(lm, sample_args["spacing"],
                                    imaging.DEFAULT_SPACING_MM)
    if sample_args["side"] == "right":
        lm = geometry.hflip_landmarks(lm, pre.width)
    aligned, lm = geometry.align_patella(pre, lm)
    if sample_args["dump_dir"]:
        dump = Path(sample_args["dump_dir"])
        imaging.dump_pgm(aligned, dump / f"{sample_args['knee_id']}.pgm")

    cfg = LbpConfig(**sample_args["lbp"])
    out = {"knee_id": sample_args["knee_id"], "lbp": {}, "patch": None}
    for kind in sample_args["roi_kinds"]:
        if kind == "whole":
            patch = geometry.extract_whole_patella(aligned, lm,
                                                   sample_args["knee_id"])
        else:
            patch = geometry.extract_roi(aligned, lm, kind,
                                         sample_args["knee_id"],
                                         width_mode=sample_args["width_mode"])
        out["lbp"][kind] = lbp_histogram(patch, cfg).values
    if sample_args["patch_size"]:
        sup = geometry.extract_roi(aligned, lm, "superior",
                                   sample_args["knee_id"],
                                   width_mode=sample_args["width_mode"])
        out["patch"] = imaging.resize_bilinear(
            sup.pixels.pixels, sample_args["patch_size"], sample_args["patch_size"]
        )
    return out


@dataclass
class FeatureStore:
    knee_ids: tuple[str, ...]
    labels: np.ndarray
    subject_ids: tuple[str, ...]
    clinical: FeatureBlock
    lbp: dict
    patches: np.ndarray | None

    def lbp_block(self, kind: str, profile_bins: int) -> FeatureBlock:
        if kind not in self.lbp:
            raise DataError(f"no LBP features prepared for ROI kind {kind!r}")
        return FeatureBlock(
            self.knee_ids, self.lbp[kind],
            tuple(f"bin_{i}" for i in range(profile_bins)),
        )

    def clinical_block(self, columns) -> FeatureBlock:
        idx = [CLINICAL_COLUMNS.index(c) for c in columns]
        return FeatureBlock(
            self.knee_ids, self.clinical.values[:, idx], tuple(columns)
        )


def prepare_features(ds: Dataset, cfg: ExperimentConfig,
                     roi_kinds=None, with_patches=None) -> FeatureStore:
    """Run the imaging pipeline once per knee and collect every feature the
    configured models need."""
    model_specs = [MODEL_SPECS[m] for m in cfg.models]
    if roi_kinds is None:
        roi_kinds = _needed_rois(cfg.models)
    if with_patches is None:
        with_patches = any(s.learner == "cnn" for s in model_specs)
    if cfg.dump_preprocessed:
        Path(cfg.dump_preprocessed).mkdir(parents=True, exist_ok=True)
    lbp_cfg = cfg.lbp_config
    args = [{
        "knee_id": s.knee_id,
        "image_path": str(s.image_path),
        "landmark_path": str(s.landmark_path),
        "side": s.side,
        "spacing": cfg.image_spacing,
        "order": cfg.preprocess_order,
        "roi_kinds": roi_kinds,
        "width_mode": cfg.roi_width_mode,
        "patch_size": cfg.patch_size if with_patches else 0,
        "lbp": {"radius": lbp_cfg.radius, "neighbors": lbp_cfg.neighbors,
                "bins": lbp_cfg.bins, "tie_rule": lbp_cfg.tie_rule},
        "dump_dir": str(cfg.dump_preprocessed) if cfg.dump_preprocessed else "",
    } for s in ds.samples]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(prepare_knee, args, chunksize=8))
    else:
        results = [prepare_knee(a) for a in args]

    knee_ids = tuple(s.knee_id for s in ds.samples)
    labels = np.array([s.label for s in ds.samples], dtype=np.int64)
    clinical = FeatureBlock(
        knee_ids,
        np.array([s.clinical.as_vector() for s in ds.samples]),
        CLINICAL_COLUMNS,
    )
    lbp = {
        kind: np.vstack([r["lbp"][kind] for r in results])
        for kind in roi_kinds
    }
    patches = (np.stack([r["patch"] for r in results])
               if with_patches else None)
    return FeatureStore(knee_ids, labels, tuple(s.subject_id for s in ds.samples),
                        clinical, lbp, patches)


# ---------------------------------------------------------------------------
# out-of-fold model runs

@dataclass(frozen=True)
class OofPredictions:
    """One out-of-fold probability per knee, aligned with the dataset order;
    `fold_of` records which fold model produced each prediction."""

    model_id: str
    predictions: PredictionSet
    fold_of: tuple[int, ...]
    fold_hash: str

    def __post_init__(self):
        if len(self.fold_of) != len(self.predictions):
            raise DataError("fold provenance does not match predictions")


@dataclass
class RunResult:
    oof: OofPredictions
    fold_models: list
    train_ids: list  # per fold: set of training knee_ids


def _model_features(spec: ModelSpec, store: FeatureStore,
                    cfg: ExperimentConfig) -> FeatureBlock:
    clinical_cols = tuple(c for c in spec.features if c in CLINICAL_COLUMNS)
    block = None
    if "lbp" in spec.features:
        block = store.lbp_block(spec.roi, cfg.lbp_config.bins)
    if clinical_cols:
        cl = store.clinical_block(clinical_cols)
        block = fuse_features(block, cl) if block is not None else cl
    if block is None:
        raise DataError(f"model {spec.model_id} has no feature sources")
    return block


def _fold_masks(folds: FoldAssignment, knee_ids):
    fold_idx = np.array([folds.fold_of[kid] for kid in knee_ids])
    return fold_idx


def _inner_validation_split(train_rows, subject_ids, labels, seed, fold):
    """Subject-wise 90/10 split of a fold's training rows for CNN epoch
    selection; retries the shuffle until validation has both classes."""
    subjects = sorted({subject_ids[i] for i in train_rows})
    by_subject = {}
    for i in train_rows:
        by_subject.setdefault(subject_ids[i], []).append(i)
    n_val = max(1, len(subjects) // 10)
    for attempt in range(20):
        rng = np.random.default_rng([seed, fold, attempt])
        order = rng.permutation(len(subjects))
        val_subjects = {subjects[i] for i in order[:n_val]}
        val_rows = np.array([i for s in sorted(val_subjects) for i in by_subject[s]])
        fit_rows = np.array([i for i in train_rows if subject_ids[i] not in val_subjects])
        val_labels = labels[val_rows]
        if val_labels.min() != val_labels.max():
            return fit_rows, val_rows
    raise FoldError("could not build a two-class CNN validation split")


def run_model(spec: ModelSpec, ds: Dataset, folds: FoldAssignment,
              cfg: ExperimentConfig, store: FeatureStore) -> RunResult:
    """Train spec's learner once per fold on the out-of-fold knees and
    predict the held-out fold; concatenates into one OOF prediction set."""
    if spec.learner == "stack":
        raise DataError("stacked models are run via stack_models")
    knee_ids = store.knee_ids
    labels = store.labels
    fold_idx = _fold_masks(folds, knee_ids)
    scores = np.full(len(knee_ids), np.nan)
    fold_models = []
    train_ids = []

    if spec.learner == "gbm":
        block = _model_features(spec, store, cfg)
        for f in range(folds.k):
            train_rows = np.flatnonzero(fold_idx != f)
            test_rows = np.flatnonzero(fold_idx == f)
            model = train_gbm(block.values[train_rows], labels[train_rows],
                              cfg.gbm, feature_schema=block.names)
            scores[test_rows] = predict_gbm(model, block.values[test_rows])
            fold_models.append(model)
            train_ids.append({knee_ids[i] for i in train_rows})
    elif spec.learner == "cnn":
        if store.patches is None:
            raise DataError("no CNN patches prepared")
        for f in range(folds.k):
            train_rows = np.flatnonzero(fold_idx != f)
            test_rows = np.flatnonzero(fold_idx == f)
            fit_rows, val_rows = _inner_validation_split(
                train_rows, store.subject_ids, labels, cfg.seed, f
            )
            cnn_cfg = CnnConfig(
                input_size=cfg.cnn.input_size,
                conv_channels=cfg.cnn.conv_channels,
                fc_hidden=cfg.cnn.fc_hidden,
                dropout_rate=cfg.cnn.dropout_rate,
                bn_momentum=cfg.cnn.bn_momentum,
                bn_epsilon=cfg.cnn.bn_epsilon,
                seed=cfg.cnn.seed + f,
            )
            model, _ = train_cnn(
                store.patches[fit_rows], labels[fit_rows],
                store.patches[val_rows], labels[val_rows],
                cnn_cfg, cfg.train,
            )
            scores[test_rows] = predict_cnn(model, store.patches[test_rows])
            fold_models.append(model)
            train_ids.append({knee_ids[i] for i in train_rows})
    else:
        raise DataError(f"unknown learner {spec.learner!r}")

    oof = OofPredictions(
        spec.model_id,
        PredictionSet(knee_ids, scores, labels),
        tuple(int(f) for f in fold_idx),
        folds.assignment_hash(),
    )
    return RunResult(oof, fold_models, train_ids)


def stack_models(level1: tuple[OofPredictions, OofPredictions], ds: Dataset,
                 folds: FoldAssignment, gbm_cfg: GbmConfig,
                 model_id: str = "model8") -> RunResult:
    """Level-2 classifier on the level-1 out-of-fold probability columns.

    Reuses the same fold assignment: the level-2 model for fold f trains on
    rows outside f, whose level-1 scores came from models that never saw
    those rows' subjects, so no label information leaks through the features.
    """
    a, b = level1
    fold_hash = folds.assignment_hash()
    expected_ids = tuple(s.knee_id for s in ds.samples)
    for oof in (a, b):
        if oof.fold_hash != fold_hash:
            raise DataError(
                f"{oof.model_id} predictions were made under a different "
                f"fold assignment"
            )
        if oof.predictions.knee_ids != expected_ids:
            raise DataError(f"{oof.model_id} predictions incomplete or misordered")
        if tuple(folds.fold_of[k] for k in expected_ids) != oof.fold_of:
            raise DataError(f"{oof.model_id} fold provenance is inconsistent")
    labels = a.predictions.labels
    features = np.column_stack([a.predictions.scores, b.predictions.scores])
    names = (f"{a.model_id}_pred", f"{b.model_id}_pred")
    fold_idx = np.array([folds.fold_of[k] for k in expected_ids])
    scores = np.full(len(expected_ids), np.nan)
    fold_models = []
    train_ids = []
    for f in range(folds.k):
        train_rows = np.flatnonzero(fold_idx != f)
        test_rows = np.flatnonzero(fold_idx == f)
        model = train_gbm(features[train_rows], labels[train_rows], gbm_cfg,
                          feature_schema=names)
        scores[test_rows] = predict_gbm(model, features[test_rows])
        fold_models.append(model)
        train_ids.append({expected_ids[i] for i in train_rows})
    oof = OofPredictions(
        model_id, PredictionSet(expected_ids, scores, labels),
        tuple(int(f) for f in fold_idx), fold_hash,
    )
    return RunResult(oof, fold_models, train_ids)


def verify_oof_integrity(result: RunResult, ds: Dataset,
                         folds: FoldAssignment) -> list[str]:
    """Structural audit: no knee's subject may appear in the training ids of
    the fold model that predicted it. Returns violation descriptions."""
    subject_of = {s.knee_id: s.subject_id for s in ds.samples}
    train_subjects = [
        {subject_of[kid] for kid in ids} for ids in result.train_ids
    ]
    violations = []
    for knee_id, fold in zip(result.oof.predictions.knee_ids, result.oof.fold_of):
        if folds.fold_of[knee_id] != fold:
            violations.append(f"{knee_id}: prediction fold {fold} != assigned fold")
        if subject_of[knee_id] in train_subjects[fold]:
            violations.append(
                f"{knee_id}: subject {subject_of[knee_id]} leaked into fold "
                f"{fold} training set"
            )
    return violations


def compare_models(a: OofPredictions, b: OofPredictions):
    """DeLong comparison of two pooled OOF prediction sets."""
    return delong_test(a.predictions, b.predictions)


# ---------------------------------------------------------------------------
# report

@dataclass
class EvalReport:
    models: dict
    delong: dict
    folds: dict
    meta: dict

    def to_dict(self) -> dict:
        return {"models": self.models, "delong": self.delong,
                "folds": self.folds, "meta": self.meta}

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(models=doc["models"], delong=doc["delong"],
                   folds=doc["folds"], meta=doc["meta"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _per_fold_values(oof: OofPredictions, metric_fn):
    values = []
    pred = oof.predictions
    fold_arr = np.array(oof.fold_of)
    for f in sorted(set(oof.fold_of)):
        rows = np.flatnonzero(fold_arr == f)
        subset = PredictionSet(
            tuple(pred.knee_ids[i] for i in rows),
            pred.scores[rows], pred.labels[rows],
        )
        values.append(metric_fn(subset))
    return values


def _metric_with_ci(entry, metric: str, cfg) -> dict:
    pred = entry.predictions if isinstance(entry, OofPredictions) else entry
    fn = roc_auc if metric == "auc" else average_precision
    point = fn(pred)
    if cfg.ci_method == "bootstrap":
        lo, hi = bootstrap_ci(pred, metric, n_boot=cfg.n_boot,
                              level=cfg.ci_level, seed=cfg.seed)
    else:
        if not isinstance(entry, OofPredictions):
            raise DataError("fold-t intervals need fold provenance")
        lo, hi = fold_t_interval(_per_fold_values(entry, fn), level=cfg.ci_level)
    return {"value": point, "ci_lo": lo, "ci_hi": hi}


def build_report(oofs: dict, ds: Dataset | None, folds: FoldAssignment | None,
                 cfg: ExperimentConfig, out_dir=None) -> EvalReport:
    """Per-model AUC/AP (with CIs) and Brier, the pairwise DeLong matrix,
    and curve exports (CSV + SVG) when `out_dir` is given.

    Accepts either OofPredictions or bare PredictionSet values; the folds
    section is omitted when no assignment is given (report rebuilt from
    stored predictions).
    """
    if not oofs:
        raise DataError("report needs at least one model run")
    models = {}
    roc_curves = []
    pr_curves = []
    pred_of = {
        mid: (e.predictions if isinstance(e, OofPredictions) else e)
        for mid, e in oofs.items()
    }
    for model_id in sorted(oofs):
        pred = pred_of[model_id]
        models[model_id] = {
            "auc": _metric_with_ci(oofs[model_id], "auc", cfg),
            "ap": _metric_with_ci(oofs[model_id], "ap", cfg),
            "brier": brier(pred),
            "n": len(pred),
        }
        roc_curves.append((model_id, roc_curve(pred)))
        pr_curves.append((model_id, pr_curve(pred)))

    delong = {}
    ids = sorted(oofs)
    for i, ma in enumerate(ids):
        for mb in ids[i + 1:]:
            r = delong_test(pred_of[ma], pred_of[mb])
            delong[f"{ma}|{mb}"] = {
                "auc_a": r.auc_a, "auc_b": r.auc_b,
                "z": r.z, "p_value": r.p_value,
            }

    first = pred_of[ids[0]]
    prevalence = ds.prevalence if ds is not None else first.prevalence
    n_samples = len(ds) if ds is not None else len(first)
    report = EvalReport(
        models=models,
        delong=delong,
        folds=(None if folds is None else
               {"k": folds.k, "seed": folds.seed,
                "hash": folds.assignment_hash()}),
        meta={"n_samples": n_samples, "prevalence": prevalence,
              "ci_method": cfg.ci_method, "ci_level": cfg.ci_level,
              "n_boot": cfg.n_boot if cfg.ci_method == "bootstrap" else None},
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        curves_dir = out_dir / "curves"
        curves_dir.mkdir(parents=True, exist_ok=True)
        for model_id, curve in roc_curves:
            write_curve_csv(curve, curves_dir / f"{model_id}_roc.csv")
        for model_id, curve in pr_curves:
            write_curve_csv(curve, curves_dir / f"{model_id}_pr.csv")
        svg_curve_plot(roc_curves, "roc", curves_dir / "roc.svg",
                       title="ROC (pooled out-of-fold)")
        svg_curve_plot(pr_curves, "pr", curves_dir / "pr.svg",
                       title="PR (pooled out-of-fold)",
                       prevalence=prevalence)
        save_report(report, out_dir / "report.json")
    return report


def save_report(report: EvalReport, path) -> None:
    Path(path).write_text(report.to_json() + "\n")


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def save_predictions(oof: OofPredictions, path) -> None:
    pred = oof.predictions
    lines = [PREDICTION_HEADER]
    for kid, score, label in zip(pred.knee_ids, pred.scores, pred.labels):
        lines.append(f"{kid},{score!r},{label}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_predictions(path) -> PredictionSet:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read predictions {path}: {exc}") from exc
    if not lines or lines[0] != PREDICTION_HEADER:
        raise DataError(f"{path}: expected header {PREDICTION_HEADER!r}")
    ids, scores, labels = [], [], []
    for line_no, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3:
            raise DataError(f"{path}:{line_no}: expected 3 columns")
        ids.append(parts[0])
        try:
            scores.append(float(parts[1]))
            labels.append(int(parts[2]))
        except ValueError:
            raise DataError(f"{path}:{line_no}: bad score or label") from None
    return PredictionSet(tuple(ids), np.array(scores), np.array(labels))


# ---------------------------------------------------------------------------
# end-to-end driver

def run_experiment(ds: Dataset, cfg: ExperimentConfig):
    """Run every configured model with one shared fold assignment.

    Models run in a canonical order with stack dependencies auto-included;
    each model's predictions are written to `<output_dir>/predictions/` as
    soon as it finishes so a later failure cannot discard them. Returns
    (report, oofs, errors).
    """
    wanted = list(cfg.models)
    for mid in list(wanted):
        spec = MODEL_SPECS[mid]
        for dep in spec.level1:
            if dep not in wanted:
                log.info("adding %s (needed by %s)", dep, mid)
                wanted.append(dep)
    ordered = [m for m in MODEL_ORDER if m in wanted]

    folds = stratified_subject_kfold(ds, cfg.k, cfg.seed)
    log.info("folds: k=%d seed=%d hash=%s", cfg.k, cfg.seed,
             folds.assignment_hash())
    store = prepare_features(ds, cfg, roi_kinds=_needed_rois(ordered),
                             with_patches=any(
                                 MODEL_SPECS[m].learner == "cnn" for m in ordered))
    out_dir = Path(cfg.output_dir)
    pred_dir = out_dir / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)

    oofs = {}
    errors = {}
    for mid in ordered:
        spec = MODEL_SPECS[mid]
        try:
            if spec.learner == "stack":
                missing = [d for d in spec.level1 if d not in oofs]
                if missing:
                    raise DataError(
                        f"stack inputs missing (failed earlier?): {missing}"
                    )
                result = stack_models(
                    tuple(oofs[d] for d in spec.level1), ds, folds, cfg.gbm,
                    model_id=mid,
                )
            else:
                result = run_model(spec, ds, folds, cfg, store)
            violations = verify_oof_integrity(result, ds, folds)
            if violations:
                raise DataError(
                    f"fold integrity audit failed: {violations[:3]}"
                )
            oofs[mid] = result.oof
            save_predictions(result.oof, pred_dir / f"{mid}.csv")
            log.info("%s done (oof auc %.3f)", mid, roc_auc(result.oof.predictions))
        except Exception as exc:  # keep completed models on any failure
            log.error("model %s failed: %s", mid, exc)
            errors[mid] = exc

    report = build_report(oofs, ds, folds, cfg, out_dir=out_dir) if oofs else None
    return report, oofs, errors
