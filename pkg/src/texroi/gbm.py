"""Gradient-boosted decision trees with binary logistic loss.

Trees are grown leaf-wise (best first) over histogram-quantized feature
thresholds. Split gain is the usual second-order formula
0.5 * [GL^2/(HL+l2) + GR^2/(HR+l2) - G^2/(H+l2)] with gradients g = p - y
and hessians h = p(1-p); leaf values are Newton steps scaled by the
learning rate. Training is fully deterministic: ties break on the lowest
feature index, then the lowest threshold, then leaf creation order.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import DataError, ModelFormatError, SchemaMismatchError

_FORMAT_TAG = "texroi-gbm"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GbmConfig:
    n_trees: int = 200
    max_leaves: int = 31
    min_samples_leaf: int = 20
    learning_rate: float = 0.1
    l2_reg: float = 1.0
    feature_bins: int = 255
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not (0.0 < self.learning_rate <= 1.0):
            raise ValueError("learning_rate must be in (0, 1]")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be >= 0")
        if self.feature_bins < 2:
            raise ValueError("feature_bins must be >= 2")


@dataclass(frozen=True)
class GbmModel:
    """Additive tree ensemble: trees hold nodes as {'f','t','l','r'} dicts
    (child entries index into the same node list) or {'leaf': value}."""

    base_score: float
    trees: tuple
    feature_schema: tuple[str, ...]

    def __post_init__(self):
        d = len(self.feature_schema)
        for tree in self.trees:
            for node in tree:
                if "leaf" not in node and not (0 <= node["f"] < d):
                    raise ValueError(
                        f"node feature index {node['f']} outside schema of size {d}"
                    )

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _check_features(X, n_features=None) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise DataError("feature matrix contains non-finite values")
    if n_features is not None and X.shape[1] != n_features:
        raise SchemaMismatchError(
            f"expected {n_features} features, got {X.shape[1]}"
        )
    return X


def _check_labels(y, n) -> np.ndarray:
    y = np.ascontiguousarray(y, dtype=np.int64)
    if y.shape != (n,):
        raise DataError(f"labels must be a vector of length {n}")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    if y.min() == y.max():
        raise DataError("training labels contain a single class")
    return y


def _bin_thresholds(col: np.ndarray, feature_bins: int) -> np.ndarray:
    """Candidate split thresholds for one feature column.

    Few distinct values: midpoints between consecutive uniques. Otherwise:
    deduped equal-frequency quantile edges (ties collapse bins). A sample
    goes left when value <= threshold.
    """
    u = np.unique(col)
    if u.size <= 1:
        return np.empty(0)
    if u.size <= feature_bins:
        return (u[:-1] + u[1:]) / 2.0
    qs = np.arange(1, feature_bins) / feature_bins
    edges = np.unique(np.quantile(col, qs))
    return edges[edges < u[-1]]


class _Binned:
    """Training-time histogram quantization of a feature matrix."""

    def __init__(self, X: np.ndarray, feature_bins: int):
        n, d = X.shape
        self.thresholds = [_bin_thresholds(X[:, j], feature_bins) for j in range(d)]
        self.n_bins = np.array([t.size + 1 for t in self.thresholds])
        self.stride = int(self.n_bins.max())
        self.codes = np.empty((n, d), dtype=np.int32)
        for j, t in enumerate(self.thresholds):
            # bin index = number of thresholds < x, so bin <= b iff x <= t[b]
            self.codes[:, j] = np.searchsorted(t, X[:, j], side="left")


def _leaf_histograms(binned: _Binned, rows, g, h):
    """Per-(feature, bin) sums of gradients, hessians, and counts."""
    d = binned.codes.shape[1]
    stride = binned.stride
    codes = binned.codes[rows]
    m = codes.shape[0]
    flat = (codes + np.arange(d, dtype=np.int32) * stride).ravel()
    gw = np.broadcast_to(g[rows][:, None], (m, d)).ravel()
    hw = np.broadcast_to(h[rows][:, None], (m, d)).ravel()
    size = d * stride
    hist_g = np.bincount(flat, weights=gw, minlength=size).reshape(d, stride)
    hist_h = np.bincount(flat, weights=hw, minlength=size).reshape(d, stride)
    hist_c = np.bincount(flat, minlength=size).reshape(d, stride)
    return hist_g, hist_h, hist_c


def _best_split(binned: _Binned, rows, g, h, cfg: GbmConfig):
    """Best (gain, feature, bin) for a leaf, or None when no split has
    positive gain under the min-samples constraint."""
    hist_g, hist_h, hist_c = _leaf_histograms(binned, rows, g, h)
    gl = np.cumsum(hist_g, axis=1)
    hl = np.cumsum(hist_h, axis=1)
    cl = np.cumsum(hist_c, axis=1)
    g_tot = gl[:, -1:]
    h_tot = hl[:, -1:]
    c_tot = cl[:, -1:]
    lam = cfg.l2_reg
    gr = g_tot - gl
    hr = h_tot - hl
    cr = c_tot - cl
    parent = g_tot * g_tot / (h_tot + lam)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent)
    # bin b splits at thresholds[b]; bins past the candidate range are invalid
    d, stride = gain.shape
    valid = np.arange(stride)[None, :] < (binned.n_bins - 1)[:, None]
    valid &= (cl >= cfg.min_samples_leaf) & (cr >= cfg.min_samples_leaf)
    gain = np.where(valid & np.isfinite(gain), gain, -np.inf)
    best_flat = int(np.argmax(gain))  # first max in C order = tie-break rule
    best_gain = gain.ravel()[best_flat]
    if not (best_gain > 0.0):
        return None
    f, b = divmod(best_flat, stride)
    return float(best_gain), int(f), int(b)


class _Leaf:
    __slots__ = ("node_idx", "rows", "g_sum", "h_sum", "split", "order")

    def __init__(self, node_idx, rows, g, h, order):
        self.node_idx = node_idx
        self.rows = rows
        self.g_sum = float(g[rows].sum())
        self.h_sum = float(h[rows].sum())
        self.split = None
        self.order = order


def _grow_tree(binned: _Binned, g, h, cfg: GbmConfig):
    """One leaf-wise tree; returns (nodes, leaf_values_by_rows)."""
    n = binned.codes.shape[0]
    nodes = [{"leaf": 0.0}]
    root = _Leaf(0, np.arange(n), g, h, order=0)
    root.split = _best_split(binned, root.rows, g, h, cfg)
    leaves = [root]
    counter = 1
    while len(leaves) < cfg.max_leaves:
        candidates = [lf for lf in leaves if lf.split is not None]
        if not candidates:
            break
        # highest gain; ties: lowest feature, lowest bin, earliest leaf
        best = min(candidates,
                   key=lambda lf: (-lf.split[0], lf.split[1], lf.split[2], lf.order))
        _, f, b = best.split
        go_left = binned.codes[best.rows, f] <= b
        left_rows = best.rows[go_left]
        right_rows = best.rows[~go_left]
        left = _Leaf(len(nodes), left_rows, g, h, order=counter)
        right = _Leaf(len(nodes) + 1, right_rows, g, h, order=counter + 1)
        counter += 2
        nodes[best.node_idx] = {
            "f": f, "t": float(binned.thresholds[f][b]),
            "l": left.node_idx, "r": right.node_idx,
        }
        nodes.append({"leaf": 0.0})
        nodes.append({"leaf": 0.0})
        leaves.remove(best)
        for child in (left, right):
            child.split = _best_split(binned, child.rows, g, h, cfg)
            leaves.append(child)
    updates = np.zeros(n)
    for lf in leaves:
        value = -cfg.learning_rate * lf.g_sum / (lf.h_sum + cfg.l2_reg)
        nodes[lf.node_idx] = {"leaf": value}
        updates[lf.rows] = value
    return nodes, updates


def train_gbm(features, labels, cfg: GbmConfig = GbmConfig(),
              feature_schema=None) -> GbmModel:
    """Fit a boosted-tree classifier on a feature matrix and binary labels.

    Requires both classes present and finite features. The base score is the
    log-odds of the label mean; every subsequent tree fits the current
    gradients until `n_trees` trees are grown (trees stop early at
    `max_leaves` or when no split has positive gain).
    """
    X = _check_features(features)
    n, d = X.shape
    if n < 2:
        raise DataError("need at least 2 training samples")
    y = _check_labels(labels, n)
    if feature_schema is None:
        feature_schema = tuple(f"f{j}" for j in range(d))
    else:
        feature_schema = tuple(feature_schema)
        if len(feature_schema) != d:
            raise SchemaMismatchError(
                f"schema names {len(feature_schema)} features, matrix has {d}"
            )
    binned = _Binned(X, cfg.feature_bins)
    mean = float(y.mean())
    base_score = math.log(mean / (1.0 - mean))
    margins = np.full(n, base_score)
    trees = []
    yf = y.astype(np.float64)
    for _ in range(cfg.n_trees):
        p = expit(margins)
        g = p - yf
        h = p * (1.0 - p)
        nodes, updates = _grow_tree(binned, g, h, cfg)
        trees.append(tuple(nodes))
        margins += updates
    return GbmModel(base_score, tuple(trees), feature_schema)


def _tree_margins(nodes, X: np.ndarray) -> np.ndarray:
    out = np.zeros(X.shape[0])
    stack = [(0, np.arange(X.shape[0]))]
    while stack:
        idx, rows = stack.pop()
        if rows.size == 0:
            continue
        node = nodes[idx]
        if "leaf" in node:
            out[rows] = node["leaf"]
            continue
        go_left = X[rows, node["f"]] <= node["t"]
        stack.append((node["l"], rows[go_left]))
        stack.append((node["r"], rows[~go_left]))
    return out


def decision_margins(model: GbmModel, features) -> np.ndarray:
    """Raw additive log-odds margins (base score plus tree outputs)."""
    X = _check_features(features, n_features=len(model.feature_schema))
    margins = np.full(X.shape[0], model.base_score)
    for nodes in model.trees:
        margins += _tree_margins(nodes, X)
    return margins


def predict_gbm(model: GbmModel, features) -> np.ndarray:
    """Predicted positive-class probabilities, strictly inside (0, 1)."""
    p = expit(decision_margins(model, features))
    return np.clip(p, 1e-12, 1.0 - 1e-12)


def serialize_gbm(model: GbmModel) -> bytes:
    doc = {
        "format": _FORMAT_TAG,
        "version": _FORMAT_VERSION,
        "base_score": model.base_score,
        "feature_schema": list(model.feature_schema),
        "trees": [list(tree) for tree in model.trees],
    }
    return json.dumps(doc, separators=(",", ":"), sort_keys=True).encode("utf-8")


def deserialize_gbm(payload: bytes) -> GbmModel:
    try:
        doc = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt or truncated model payload: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != _FORMAT_TAG:
        raise ModelFormatError("payload is not a serialized boosted-tree model")
    if doc.get("version") != _FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model version {doc.get('version')!r}, "
            f"expected {_FORMAT_VERSION}"
        )
    try:
        trees = tuple(tuple(dict(node) for node in tree) for tree in doc["trees"])
        model = GbmModel(
            base_score=float(doc["base_score"]),
            trees=trees,
            feature_schema=tuple(doc["feature_schema"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from exc
    return model


class GbmClassifier(BaseEstimator, ClassifierMixin):
    """Estimator-style wrapper over :func:`train_gbm` / :func:`predict_gbm`."""

    def __init__(self, n_trees=200, max_leaves=31, min_samples_leaf=20,
                 learning_rate=0.1, l2_reg=1.0, feature_bins=255, seed=0):
        self.n_trees = n_trees
        self.max_leaves = max_leaves
        self.min_samples_leaf = min_samples_leaf
        self.learning_rate = learning_rate
        self.l2_reg = l2_reg
        self.feature_bins = feature_bins
        self.seed = seed

    def _config(self) -> GbmConfig:
        return GbmConfig(
            n_trees=self.n_trees, max_leaves=self.max_leaves,
            min_samples_leaf=self.min_samples_leaf,
            learning_rate=self.learning_rate, l2_reg=self.l2_reg,
            feature_bins=self.feature_bins, seed=self.seed,
        )

    def fit(self, X, y):
        self.model_ = train_gbm(X, y, self._config())
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        p = predict_gbm(self.model_, X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (predict_gbm(self.model_, X) >= 0.5).astype(np.int64)
