"""A small convolutional network trained from scratch with SGD + momentum.

Three conv blocks (3x3 conv, stride 1, pad 1 -> batch norm -> 2x2 max pool
-> ReLU) feed two fully connected layers with dropout after the first; the
single output logit is trained with mean sigmoid cross-entropy. Forward,
backward, and the update rule are explicit numpy so gradients can be checked
against finite differences.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import DataError, ModelFormatError

_FORMAT_TAG = "texroi-cnn"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class CnnConfig:
    input_size: int = 64
    conv_channels: tuple[int, int, int] = (32, 64, 128)
    fc_hidden: int = 256
    dropout_rate: float = 0.5
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if len(self.conv_channels) != 3 or any(c < 1 for c in self.conv_channels):
            raise ValueError("conv_channels must be 3 counts >= 1")
        if self.input_size < 8 or self.input_size % 8 != 0:
            raise ValueError("input_size must be a positive multiple of 8")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.fc_hidden < 1:
            raise ValueError("fc_hidden must be >= 1")

    @property
    def flat_features(self) -> int:
        side = self.input_size // 8
        return side * side * self.conv_channels[2]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_initial: float = 0.01
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 8
    epochs: int = 40
    selection: str = "val_auc"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        if self.selection != "val_auc":
            raise ValueError("only val_auc selection is supported")

    def learning_rate_at(self, epoch: int) -> float:
        return self.lr_initial / self.lr_decay_factor ** (epoch // self.lr_decay_every)


class CnnModel:
    """Parameter container: `params` and `buffers` are name -> float64 array."""

    def __init__(self, config: CnnConfig, params: dict, buffers: dict,
                 mode: str = "train"):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.mode = mode

    def clone(self) -> "CnnModel":
        return CnnModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.mode,
        )

    def parameter_count(self) -> int:
        return sum(v.size for v in self.params.values())


_PARAM_ORDER = (
    "conv1_w", "conv1_b", "bn1_gamma", "bn1_beta",
    "conv2_w", "conv2_b", "bn2_gamma", "bn2_beta",
    "conv3_w", "conv3_b", "bn3_gamma", "bn3_beta",
    "fc1_w", "fc1_b", "fc2_w", "fc2_b",
)
_BUFFER_ORDER = (
    "bn1_mean", "bn1_var", "bn2_mean", "bn2_var", "bn3_mean", "bn3_var",
)


def init_cnn(cfg: CnnConfig) -> CnnModel:
    """Seeded He-style uniform fan-in initialization; biases zero, batch-norm
    scale 1 / shift 0, running mean 0 / variance 1."""
    rng = np.random.default_rng(cfg.seed)
    c1, c2, c3 = cfg.conv_channels

    def he_uniform(shape, fan_in):
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = {}
    for i, (c_out, c_in) in enumerate(((c1, 1), (c2, c1), (c3, c2)), start=1):
        params[f"conv{i}_w"] = he_uniform((c_out, c_in, 3, 3), c_in * 9)
        params[f"conv{i}_b"] = np.zeros(c_out)
        params[f"bn{i}_gamma"] = np.ones(c_out)
        params[f"bn{i}_beta"] = np.zeros(c_out)
    flat = cfg.flat_features
    params["fc1_w"] = he_uniform((cfg.fc_hidden, flat), flat)
    params["fc1_b"] = np.zeros(cfg.fc_hidden)
    params["fc2_w"] = he_uniform((1, cfg.fc_hidden), cfg.fc_hidden)
    params["fc2_b"] = np.zeros(1)
    buffers = {}
    for i, c_out in enumerate((c1, c2, c3), start=1):
        buffers[f"bn{i}_mean"] = np.zeros(c_out)
        buffers[f"bn{i}_var"] = np.ones(c_out)
    return CnnModel(cfg, params, buffers, mode="train")


def _as_batch(x, input_size: int) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == 4 and x.shape[1] == 1:
        x = x[:, 0]
    if x.ndim != 3 or x.shape[1] != input_size or x.shape[2] != input_size:
        raise DataError(
            f"expected batch of {input_size}x{input_size} patches, got {x.shape}"
        )
    if not np.isfinite(x).all():
        raise DataError("input patches contain non-finite values")
    return x


def _im2col(x: np.ndarray) -> np.ndarray:
    """(b, c, h, w) -> (b*h*w, c*9) patch matrix for a 3x3/stride-1/pad-1
    convolution."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (b, c, h, w, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * 9)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    b, c, h, w = shape
    d6 = dcols.reshape(b, h, w, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((b, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + w] += d6[:, :, :, :, i, j]
    return dxp[:, :, 1:h + 1, 1:w + 1]


def _conv_forward(x, w, b):
    bsz, c_in, h, wd = x.shape
    c_out = w.shape[0]
    cols = _im2col(x)
    out = cols @ w.reshape(c_out, -1).T + b
    out = out.reshape(bsz, h, wd, c_out).transpose(0, 3, 1, 2)
    return out, cols


def _conv_backward(dout, cols, w, x_shape):
    bsz, c_in, h, wd = x_shape
    c_out = w.shape[0]
    dout2 = dout.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dw = (dout2.T @ cols).reshape(w.shape)
    db = dout2.sum(axis=0)
    dcols = dout2 @ w.reshape(c_out, -1)
    return _col2im(dcols, x_shape), dw, db


def _bn_forward(x, gamma, beta, running_mean, running_var, eps, mode):
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, mean, var)


def _bn_backward(dout, cache, gamma):
    xhat, inv_std, _, _ = cache
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = inv_std[None, :, None, None] / m * (
        m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat
    )
    return dx, dgamma, dbeta


def _pool_forward(x):
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(b, c, h // 2, w // 2, 4)
    # ties break to the first index in the row-major scan of each window
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, arg, x_shape):
    b, c, h, w = x_shape
    dflat = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(dflat, arg[..., None], dout[..., None], axis=-1)
    dwin = dflat.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dwin.reshape(b, c, h, w)


def forward(model: CnnModel, batch, mode: str, dropout_rng=None,
            update_stats: bool = False):
    """Run the network on a batch; returns (logits, cache).

    Train mode normalizes with batch statistics (batch size >= 2 required)
    and applies an inverted-scaling dropout mask drawn from `dropout_rng`;
    eval mode uses running statistics and no dropout. Running stats are only
    touched when `update_stats` is set, keeping plain forwards pure.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = model.config
    x = _as_batch(batch, cfg.input_size)
    bsz = x.shape[0]
    if mode == "train" and bsz < 2:
        raise DataError("train-mode forward needs a batch of at least 2")
    p = model.params
    cache = {"mode": mode, "blocks": [], "batch_size": bsz}
    cur = x[:, None, :, :]
    for i in (1, 2, 3):
        conv_out, cols = _conv_forward(cur, p[f"conv{i}_w"], p[f"conv{i}_b"])
        bn_out, bn_cache = _bn_forward(
            conv_out, p[f"bn{i}_gamma"], p[f"bn{i}_beta"],
            model.buffers[f"bn{i}_mean"], model.buffers[f"bn{i}_var"],
            cfg.bn_epsilon, mode,
        )
        if mode == "train" and update_stats:
            _, _, mean, var = bn_cache
            mom = cfg.bn_momentum
            model.buffers[f"bn{i}_mean"] *= 1.0 - mom
            model.buffers[f"bn{i}_mean"] += mom * mean
            model.buffers[f"bn{i}_var"] *= 1.0 - mom
            model.buffers[f"bn{i}_var"] += mom * var
        pool_out, pool_arg = _pool_forward(bn_out)
        relu_out = np.maximum(pool_out, 0.0)
        cache["blocks"].append({
            "x_shape": cur.shape, "cols": cols, "bn": bn_cache,
            "pool_arg": pool_arg, "pool_shape": bn_out.shape,
            "pool_out": pool_out,
        })
        cur = relu_out
    flat = cur.reshape(bsz, -1)
    fc1 = flat @ p["fc1_w"].T + p["fc1_b"]
    fc1_relu = np.maximum(fc1, 0.0)
    if mode == "train" and cfg.dropout_rate > 0.0:
        if dropout_rng is None:
            dropout_rng = np.random.default_rng(cfg.seed)
        keep = dropout_rng.random(fc1_relu.shape) >= cfg.dropout_rate
        dropped = fc1_relu * keep / (1.0 - cfg.dropout_rate)
    else:
        keep = None
        dropped = fc1_relu
    logits = (dropped @ p["fc2_w"].T + p["fc2_b"])[:, 0]
    cache.update(flat=flat, fc1=fc1, fc1_relu=fc1_relu, keep=keep,
                 dropped=dropped, conv_shape=cur.shape, logits=logits)
    return logits, cache


def sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def mean_log_loss(logits, labels) -> float:
    """Mean sigmoid cross-entropy from raw logits (numerically stable)."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def backward(model: CnnModel, cache, labels) -> dict:
    """Gradients of the mean sigmoid cross-entropy loss for every parameter,
    with exact batch-statistics backprop through batch norm and argmax
    routing through the pools."""
    if cache["mode"] != "train":
        raise DataError("backward needs a cache from a train-mode forward")
    cfg = model.config
    p = model.params
    y = np.ascontiguousarray(labels, dtype=np.float64)
    bsz = cache["batch_size"]
    if y.shape != (bsz,):
        raise DataError("labels do not match the cached batch")
    dz = (sigmoid(cache["logits"]) - y)[:, None] / bsz

    grads = {}
    grads["fc2_w"] = dz.T @ cache["dropped"]
    grads["fc2_b"] = dz.sum(axis=0)
    ddropped = dz @ p["fc2_w"]
    if cache["keep"] is not None:
        ddropped = ddropped * cache["keep"] / (1.0 - cfg.dropout_rate)
    dfc1 = ddropped * (cache["fc1"] > 0.0)
    grads["fc1_w"] = dfc1.T @ cache["flat"]
    grads["fc1_b"] = dfc1.sum(axis=0)
    dcur = (dfc1 @ p["fc1_w"]).reshape(cache["conv_shape"])
    for i, blk in zip((3, 2, 1), reversed(cache["blocks"])):
        drelu = dcur * (blk["pool_out"] > 0.0)
        dpool = _pool_backward(drelu, blk["pool_arg"], blk["pool_shape"])
        dbn, dgamma, dbeta = _bn_backward(dpool, blk["bn"], p[f"bn{i}_gamma"])
        grads[f"bn{i}_gamma"] = dgamma
        grads[f"bn{i}_beta"] = dbeta
        dcur, dw, db = _conv_backward(dbn, blk["cols"], p[f"conv{i}_w"],
                                      blk["x_shape"])
        grads[f"conv{i}_w"] = dw
        grads[f"conv{i}_b"] = db
    return grads


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float,
             momentum: float = 0.9) -> None:
    """In-place momentum update: v <- momentum*v + g; theta <- theta - lr*v."""
    for name, g in grads.items():
        v = velocity[name]
        v *= momentum
        v += g
        params[name] -= lr * v


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_lr: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    best_epoch: int = -1


def train_cnn(train_x, train_y, val_x, val_y, cfg: CnnConfig = CnnConfig(),
              tcfg: TrainConfig = TrainConfig()) -> tuple[CnnModel, TrainHistory]:
    """Train for `epochs` epochs of seeded shuffled mini-batches and return
    the parameter snapshot with the best validation ROC AUC (earliest epoch
    on ties) together with the per-epoch history."""
    from .metrics import PredictionSet, roc_auc

    train_x = _as_batch(train_x, cfg.input_size)
    train_y = np.ascontiguousarray(train_y, dtype=np.int64)
    val_x = _as_batch(val_x, cfg.input_size)
    val_y = np.ascontiguousarray(val_y, dtype=np.int64)
    if train_x.shape[0] == 0 or val_x.shape[0] == 0:
        raise DataError("train and validation splits must be nonempty")
    if val_y.min() == val_y.max():
        raise DataError("validation split needs both classes for AUC selection")

    seq = np.random.SeedSequence(cfg.seed)
    shuffle_seed, dropout_seed = seq.spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)

    model = init_cnn(cfg)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    history = TrainHistory()
    best_auc = -1.0
    best_model = None
    n = train_x.shape[0]
    val_ids = tuple(str(i) for i in range(val_x.shape[0]))

    for epoch in range(tcfg.epochs):
        lr = tcfg.learning_rate_at(epoch)
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, tcfg.batch_size):
            take = order[start:start + tcfg.batch_size]
            if take.size < 2:
                continue  # batch norm needs at least 2 samples
            logits, cache = forward(model, train_x[take], "train",
                                    dropout_rng=dropout_rng, update_stats=True)
            losses.append(mean_log_loss(logits, train_y[take]))
            grads = backward(model, cache, train_y[take])
            if tcfg.weight_decay:
                for name, g in grads.items():
                    g += tcfg.weight_decay * model.params[name]
            sgd_step(model.params, grads, velocity, lr, tcfg.momentum)
        val_scores = predict_cnn(model, val_x, _allow_train_mode=True)
        auc = roc_auc(PredictionSet(val_ids, val_scores, val_y))
        history.epoch_loss.append(float(np.mean(losses)) if losses else math.nan)
        history.epoch_lr.append(lr)
        history.val_auc.append(auc)
        if auc > best_auc:
            best_auc = auc
            best_model = model.clone()
            history.best_epoch = epoch
    best_model.mode = "eval"
    return best_model, history


def predict_cnn(model: CnnModel, patches, batch_size: int = 256,
                _allow_train_mode: bool = False) -> np.ndarray:
    """Eval-mode probabilities for a batch of patches (deterministic)."""
    if model.mode != "eval" and not _allow_train_mode:
        raise DataError("predict_cnn needs an eval-mode model")
    x = _as_batch(patches, model.config.input_size)
    out = np.empty(x.shape[0])
    for start in range(0, x.shape[0], batch_size):
        logits, _ = forward(model, x[start:start + batch_size], "eval")
        out[start:start + batch_size] = sigmoid(logits)
    return out


def save_cnn(model: CnnModel, path) -> None:
    """Write parameters and buffers as flat little-endian float64 binary plus
    a JSON sidecar (`<path>.json`) describing shapes, offsets, and config."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name in _PARAM_ORDER + _BUFFER_ORDER:
        arr = model.params.get(name)
        if arr is None:
            arr = model.buffers[name]
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    sidecar = {
        "format": _FORMAT_TAG,
        "version": _FORMAT_VERSION,
        "mode": model.mode,
        "config": {
            "input_size": model.config.input_size,
            "conv_channels": list(model.config.conv_channels),
            "fc_hidden": model.config.fc_hidden,
            "dropout_rate": model.config.dropout_rate,
            "bn_momentum": model.config.bn_momentum,
            "bn_epsilon": model.config.bn_epsilon,
            "seed": model.config.seed,
        },
        "entries": entries,
        "total_bytes": offset,
    }
    path.write_bytes(b"".join(blobs))
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True)
    )


def load_cnn(path) -> CnnModel:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    try:
        sidecar = json.loads(sidecar_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read model sidecar {sidecar_path}: {exc}") from exc
    if sidecar.get("format") != _FORMAT_TAG:
        raise ModelFormatError("sidecar does not describe a CNN model file")
    if sidecar.get("version") != _FORMAT_VERSION:
        raise ModelFormatError(f"unsupported CNN model version {sidecar.get('version')!r}")
    raw = path.read_bytes()
    if len(raw) != sidecar["total_bytes"]:
        raise ModelFormatError(
            f"model payload is {len(raw)} bytes, expected {sidecar['total_bytes']}"
        )
    cfg = CnnConfig(
        input_size=sidecar["config"]["input_size"],
        conv_channels=tuple(sidecar["config"]["conv_channels"]),
        fc_hidden=sidecar["config"]["fc_hidden"],
        dropout_rate=sidecar["config"]["dropout_rate"],
        bn_momentum=sidecar["config"]["bn_momentum"],
        bn_epsilon=sidecar["config"]["bn_epsilon"],
        seed=sidecar["config"]["seed"],
    )
    params = {}
    buffers = {}
    for entry in sidecar["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        arr = arr.reshape(shape).astype(np.float64)
        if entry["name"] in _BUFFER_ORDER:
            buffers[entry["name"]] = arr
        else:
            params[entry["name"]] = arr
    missing = set(_PARAM_ORDER) - set(params) | set(_BUFFER_ORDER) - set(buffers)
    if missing:
        raise ModelFormatError(f"model file missing entries: {sorted(missing)}")
    return CnnModel(cfg, params, buffers, mode=sidecar.get("mode", "eval"))


class CnnClassifier(BaseEstimator, ClassifierMixin):
    """Estimator-style wrapper over :func:`train_cnn` / :func:`predict_cnn`.

    When no validation split is passed to fit, a seeded 90/10 split of the
    training data drives epoch selection.
    """

    def __init__(self, input_size=64, conv_channels=(32, 64, 128),
                 fc_hidden=256, dropout_rate=0.5, bn_momentum=0.1,
                 bn_epsilon=1e-5, seed=0, batch_size=64, momentum=0.9,
                 weight_decay=0.0, lr_initial=0.01, lr_decay_factor=10.0,
                 lr_decay_every=8, epochs=40):
        self.input_size = input_size
        self.conv_channels = conv_channels
        self.fc_hidden = fc_hidden
        self.dropout_rate = dropout_rate
        self.bn_momentum = bn_momentum
        self.bn_epsilon = bn_epsilon
        self.seed = seed
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_initial = lr_initial
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_every = lr_decay_every
        self.epochs = epochs

    def _configs(self) -> tuple[CnnConfig, TrainConfig]:
        cfg = CnnConfig(
            input_size=self.input_size, conv_channels=tuple(self.conv_channels),
            fc_hidden=self.fc_hidden, dropout_rate=self.dropout_rate,
            bn_momentum=self.bn_momentum, bn_epsilon=self.bn_epsilon,
            seed=self.seed,
        )
        tcfg = TrainConfig(
            batch_size=self.batch_size, momentum=self.momentum,
            weight_decay=self.weight_decay, lr_initial=self.lr_initial,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_every=self.lr_decay_every, epochs=self.epochs,
        )
        return cfg, tcfg

    def fit(self, X, y, X_val=None, y_val=None):
        cfg, tcfg = self._configs()
        y = np.ascontiguousarray(y, dtype=np.int64)
        if X_val is None:
            rng = np.random.default_rng(cfg.seed)
            n = len(y)
            order = rng.permutation(n)
            n_val = max(1, n // 10)
            val_idx, train_idx = order[:n_val], order[n_val:]
            X = np.asarray(X)
            X_val, y_val = X[val_idx], y[val_idx]
            X, y = X[train_idx], y[train_idx]
        self.model_, self.history_ = train_cnn(X, y, X_val, y_val, cfg, tcfg)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        p = predict_cnn(self.model_, X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (predict_cnn(self.model_, X) >= 0.5).astype(np.int64)
