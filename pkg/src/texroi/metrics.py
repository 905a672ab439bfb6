"""Classifier evaluation statistics: ROC/PR curves, AUC, average precision,
Brier score, DeLong's paired AUC test, and bootstrap confidence intervals."""

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sstats

from .errors import DataError


@dataclass(frozen=True)
class PredictionSet:
    """Scores and binary labels for a set of knees, aligned by position."""

    knee_ids: tuple[str, ...]
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.ascontiguousarray(self.scores, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        ids = tuple(self.knee_ids)
        if not (len(ids) == scores.shape[0] == labels.shape[0]):
            raise DataError("knee_ids, scores, and labels must have equal length")
        if scores.ndim != 1 or labels.ndim != 1:
            raise DataError("scores and labels must be 1-D")
        if scores.size == 0:
            raise DataError("prediction set is empty")
        if not np.isfinite(scores).all() or scores.min() < 0 or scores.max() > 1:
            raise DataError("scores must lie in [0, 1]")
        if not np.isin(labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        scores.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "knee_ids", ids)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.knee_ids)

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self) - self.n_pos

    @property
    def prevalence(self) -> float:
        return self.n_pos / len(self)


@dataclass(frozen=True)
class CurveData:
    points: tuple[tuple[float, float], ...]
    kind: str
    area: float

    def __post_init__(self):
        if self.kind not in ("roc", "pr"):
            raise ValueError(f"bad curve kind {self.kind!r}")
        if not (0.0 <= self.area <= 1.0 + 1e-12):
            raise ValueError(f"area out of [0, 1]: {self.area}")
        if self.kind == "roc":
            xs = [p[0] for p in self.points]
            if any(b < a for a, b in zip(xs, xs[1:])):
                raise ValueError("roc x coordinates must be nondecreasing")

    def xs(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    def ys(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def _require_both_classes(p: PredictionSet):
    if p.n_pos == 0 or p.n_neg == 0:
        raise DataError("metric needs both classes present")


def _win_matrix(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """(n_pos, n_neg) matrix of 1/0.5/0 ranking outcomes."""
    pos = scores[labels == 1][:, None]
    neg = scores[labels == 0][None, :]
    return np.where(pos > neg, 1.0, np.where(pos == neg, 0.5, 0.0))


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their average rank."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    n = len(x)
    bounds = np.flatnonzero(np.diff(xs) != 0)
    starts = np.concatenate([[0], bounds + 1])
    ends = np.concatenate([bounds, [n - 1]])
    mid = (starts + ends) / 2.0 + 1.0
    out = np.empty(n)
    out[order] = np.repeat(mid, ends - starts + 1)
    return out


def roc_auc(p: PredictionSet) -> float:
    """Mann-Whitney AUC: (wins + half-ties) / (n_pos * n_neg), computed via
    midranks."""
    _require_both_classes(p)
    n_pos, n_neg = p.n_pos, p.n_neg
    rank_sum = float(_midranks(p.scores)[p.labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _threshold_counts(p: PredictionSet):
    """Cumulative TP/FP counts at each unique descending score threshold."""
    order = np.argsort(-p.scores, kind="stable")
    scores = p.scores[order]
    labels = p.labels[order]
    # indices of the last occurrence of each unique score
    last = np.flatnonzero(np.diff(scores) != 0)
    last = np.append(last, len(scores) - 1)
    tp = np.cumsum(labels)[last].astype(np.float64)
    fp = np.cumsum(1 - labels)[last].astype(np.float64)
    return tp, fp


def roc_curve(p: PredictionSet) -> CurveData:
    """ROC by descending-threshold sweep, anchored at (0,0) and (1,1); area
    by the trapezoid rule (equal to the Mann-Whitney AUC)."""
    _require_both_classes(p)
    tp, fp = _threshold_counts(p)
    tpr = np.concatenate([[0.0], tp / p.n_pos])
    fpr = np.concatenate([[0.0], fp / p.n_neg])
    area = float(np.sum(np.diff(fpr) * (tpr[:-1] + tpr[1:]) / 2.0))
    points = tuple(zip(fpr.tolist(), tpr.tolist()))
    return CurveData(points, "roc", area)


def pr_curve(p: PredictionSet) -> CurveData:
    """Precision-recall by descending-threshold sweep; area by the step rule
    (equal to average precision)."""
    _require_both_classes(p)
    tp, fp = _threshold_counts(p)
    recall = tp / p.n_pos
    precision = tp / (tp + fp)
    area = float(np.sum(np.diff(recall, prepend=0.0) * precision))
    points = [(0.0, float(precision[0]))]
    points += list(zip(recall.tolist(), precision.tolist()))
    return CurveData(tuple(points), "pr", area)


def average_precision(p: PredictionSet) -> float:
    """Step-wise AP: sum of (recall step) * precision over descending unique
    score thresholds."""
    if p.n_pos == 0:
        raise DataError("average precision needs at least one positive")
    tp, fp = _threshold_counts(p)
    recall = tp / p.n_pos
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(recall, prepend=0.0) * precision))


def brier(p: PredictionSet) -> float:
    """Mean squared error of the predicted probabilities."""
    return float(np.mean((p.scores - p.labels) ** 2))


@dataclass(frozen=True)
class DeLongResult:
    auc_a: float
    auc_b: float
    z: float
    p_value: float


def delong_test(a: PredictionSet, b: PredictionSet) -> DeLongResult:
    """DeLong's paired test for the difference of two correlated AUCs.

    Uses the structural components: for each positive, its mean win rate
    against all negatives (and vice versa for negatives); the variance of
    the AUC difference comes from the 2x2 sample covariances of those
    component vectors. Zero variance with equal AUCs yields z = 0, p = 1.
    """
    if a.knee_ids != b.knee_ids or not np.array_equal(a.labels, b.labels):
        raise DataError("DeLong test needs paired predictions on the same cases")
    _require_both_classes(a)
    n_pos, n_neg = a.n_pos, a.n_neg
    if n_pos < 2 or n_neg < 2:
        raise DataError("DeLong test needs at least 2 cases of each class")

    psi_a = _win_matrix(a.scores, a.labels)
    psi_b = _win_matrix(b.scores, b.labels)
    auc_a = float(psi_a.mean())
    auc_b = float(psi_b.mean())
    v10 = np.vstack([psi_a.mean(axis=1), psi_b.mean(axis=1)])  # per positive
    v01 = np.vstack([psi_a.mean(axis=0), psi_b.mean(axis=0)])  # per negative
    s10 = np.cov(v10)
    s01 = np.cov(v01)
    s = s10 / n_pos + s01 / n_neg
    var = float(s[0, 0] + s[1, 1] - 2.0 * s[0, 1])
    diff = auc_a - auc_b
    if var <= 0.0:
        if diff == 0.0:
            return DeLongResult(auc_a, auc_b, 0.0, 1.0)
        z = math.inf if diff > 0 else -math.inf
        return DeLongResult(auc_a, auc_b, z, 0.0)
    z = diff / math.sqrt(var)
    p_value = float(2.0 * sstats.norm.sf(abs(z)))
    return DeLongResult(auc_a, auc_b, z, p_value)


_METRIC_FNS = {"auc": roc_auc, "ap": average_precision}


def bootstrap_ci(
    p: PredictionSet,
    metric: str = "auc",
    n_boot: int = 2000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Stratified percentile bootstrap interval for AUC or AP.

    Resamples positives and negatives separately with replacement (class
    counts preserved), recomputes the metric, and returns the percentile
    interval at `level`. Deterministic given `seed`.
    """
    if metric not in _METRIC_FNS:
        raise ValueError(f"metric must be one of {sorted(_METRIC_FNS)}")
    if n_boot < 100:
        raise ValueError("n_boot must be >= 100")
    if not (0.0 < level < 1.0):
        raise ValueError("level must be in (0, 1)")
    _require_both_classes(p)
    fn = _METRIC_FNS[metric]
    rng = np.random.default_rng(seed)
    pos_idx = np.flatnonzero(p.labels == 1)
    neg_idx = np.flatnonzero(p.labels == 0)
    values = np.empty(n_boot)
    for i in range(n_boot):
        for _attempt in range(10):
            take = np.concatenate([
                rng.choice(pos_idx, size=pos_idx.size, replace=True),
                rng.choice(neg_idx, size=neg_idx.size, replace=True),
            ])
            labels = p.labels[take]
            if labels.min() != labels.max():
                break
        else:
            raise DataError("bootstrap resampling degenerated to one class")
        resample = PredictionSet(
            tuple(p.knee_ids[j] for j in take), p.scores[take], labels
        )
        values[i] = fn(resample)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def fold_t_interval(per_fold_values, level: float = 0.95) -> tuple[float, float]:
    """Across-fold mean +- t interval, the alternative CI mode."""
    vals = np.asarray(per_fold_values, dtype=np.float64)
    if vals.size < 2:
        raise DataError("t interval needs at least 2 fold values")
    mean = float(vals.mean())
    sem = float(vals.std(ddof=1)) / math.sqrt(vals.size)
    t = float(sstats.t.ppf(1.0 - (1.0 - level) / 2.0, df=vals.size - 1))
    return mean - t * sem, mean + t * sem
