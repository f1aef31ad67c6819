"""LSTM-CNN cascade classifier and its mini-batch SGD training loop.

The same machinery also builds the two ablated variants used as baselines:
``arch="lstm"`` drops the conv/pool stage and classifies from the last
hidden state, ``arch="cnn"`` drops the LSTM stack and convolves the raw
``features x time`` window.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from flowclass import nn_core as nn
from flowclass import serialization
from flowclass.features import FeatureScaler, WindowDataset, WindowedSample

logger = logging.getLogger(__name__)

ARCHITECTURES = ("cascade", "lstm", "cnn")


class DataError(ValueError):
    pass


class TrainingDivergenceError(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged in epoch {epoch}: loss = {loss}")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class CascadeConfig:
    num_features: int = 6
    window: int = 6
    lstm_hidden: int = 32
    lstm_hidden_2: int | None = None
    lstm_layers: int = 2
    conv_filters: int = 32
    kernel: tuple[int, int] = (2, 2)
    conv_stride: tuple[int, int] = (1, 1)
    pool: tuple[int, int] = (2, 2)
    pool_stride: tuple[int, int] = (2, 2)
    keep_prob: float = 0.8
    num_classes: int | None = None
    learning_rate: float = 0.05
    l2_lambda: float = 0.01
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    early_stop_patience: int = 10
    early_stop_tol: float = 1e-5
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be at least 2")
        if self.lstm_hidden < 2 or (self.lstm_hidden_2 is not None and self.lstm_hidden_2 < 2):
            raise ValueError("LSTM hidden width must be at least 2")
        if self.lstm_layers < 1:
            raise ValueError("need at least one LSTM layer")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        if self.num_classes is not None and self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if tuple(self.conv_stride) != (1, 1):
            raise ValueError("only 1x1 convolution stride is supported")
        if tuple(self.pool_stride) != tuple(self.pool):
            raise ValueError("pool stride must equal the pool size")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0 or self.l2_lambda < 0:
            raise ValueError("invalid optimisation settings")

    @property
    def hidden_sizes(self) -> list[int]:
        sizes = [self.lstm_hidden] * self.lstm_layers
        if self.lstm_hidden_2 is not None and self.lstm_layers > 1:
            sizes[1:] = [self.lstm_hidden_2] * (self.lstm_layers - 1)
        return sizes

    def header(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_mapping(cls, values: dict[str, str | object]) -> CascadeConfig:
        known = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in known:
                raise KeyError(f"unknown config key: {key}")
            kw[key] = _coerce(key, raw)
        return cls(**kw)


_PAIR_KEYS = {"kernel", "conv_stride", "pool", "pool_stride"}
_INT_KEYS = {"num_features", "window", "lstm_hidden", "lstm_hidden_2", "lstm_layers",
             "conv_filters", "num_classes", "batch_size", "epochs", "seed", "early_stop_patience"}


def _coerce(key: str, raw):
    if not isinstance(raw, str):
        return tuple(raw) if key in _PAIR_KEYS else raw
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    if key in _PAIR_KEYS:
        return serialization.parse_pair(raw)
    if key in _INT_KEYS:
        return int(raw)
    return float(raw)


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class CascadeModel:
    config: CascadeConfig
    arch: str
    params: dict[str, np.ndarray]
    epochs_run: int = 0
    final_loss: float | None = None
    scaler: FeatureScaler | None = None
    _cache: dict | None = field(default=None, repr=False, compare=False)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def weight_names(self) -> list[str]:
        """Parameters subject to the L2 penalty (every weight tensor, no biases)."""
        return [k for k in self.params if k.rsplit(".", 1)[1].startswith("W")]

    def lstm_params(self, layer: int) -> nn.LstmCellParams:
        prefix = f"lstm{layer + 1}."
        return nn.LstmCellParams(**{k[len(prefix):]: v for k, v in self.params.items()
                                    if k.startswith(prefix)})


def _head_shape(config: CascadeConfig, arch: str) -> tuple[int, int]:
    """(rows, cols) of the map fed to the conv stage."""
    if arch == "cascade":
        return config.hidden_sizes[-1], config.window
    return config.num_features, config.window


def _flat_size(config: CascadeConfig, arch: str) -> int:
    if arch == "lstm":
        return config.hidden_sizes[-1]
    rows, cols = _head_shape(config, arch)
    kh, kw = config.kernel
    ph, pw = config.pool
    ho, wo = (rows - kh + 1) // ph, (cols - kw + 1) // pw
    if rows < kh or cols < kw or ho < 1 or wo < 1:
        raise ValueError(f"a {rows}x{cols} map is too small for kernel {config.kernel} and pool {config.pool}")
    return config.conv_filters * ho * wo


def init_model(config: CascadeConfig, arch: str = "cascade", rng: np.random.Generator | None = None) -> CascadeModel:
    """Glorot-uniform weights, zero biases and a forget-gate bias of ``config.forget_bias``."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    if config.num_classes is None:
        raise ValueError("num_classes must be set before building a model")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    if arch in ("cascade", "lstm"):
        n_in = config.num_features
        for layer, hsz in enumerate(config.hidden_sizes):
            cell = nn.LstmCellParams.init(rng, n_in, hsz, config.forget_bias)
            params.update({f"lstm{layer + 1}.{k}": v for k, v in cell.as_dict().items()})
            n_in = hsz
    if arch in ("cascade", "cnn"):
        kh, kw = config.kernel
        K = config.conv_filters
        params["conv.W"] = nn.glorot_uniform(rng, (K, kh, kw), kh * kw, K * kh * kw)
        params["conv.b"] = np.zeros(K)
    d = _flat_size(config, arch)
    params["dense.W"] = nn.glorot_uniform(rng, (config.num_classes, d), d, config.num_classes)
    params["dense.b"] = np.zeros(config.num_classes)
    return CascadeModel(config, arch, params)


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(data, WindowDataset):
        return data.X, data.labels
    if isinstance(data, WindowedSample):
        return data.values[None], np.array([data.label])
    if isinstance(data, tuple):
        return np.asarray(data[0], dtype=np.float64), np.asarray(data[1])
    if isinstance(data, np.ndarray):
        return data.astype(np.float64, copy=False), None
    if len(data) and isinstance(data[0], WindowedSample):
        ds = WindowDataset.from_samples(data)
        return ds.X, ds.labels
    raise TypeError(f"cannot interpret {type(data).__name__} as samples")


def _check_input(model: CascadeModel, X: np.ndarray) -> None:
    cfg = model.config
    if X.ndim != 3 or X.shape[1:] != (cfg.window, cfg.num_features):
        raise nn.ShapeError(f"samples of shape {X.shape[1:]} do not match the model's "
                            f"(window={cfg.window}, features={cfg.num_features})")


def forward_logits(model: CascadeModel, X: np.ndarray, training: bool = False,
                   rng: np.random.Generator | None = None, keep_cache: bool = False) -> np.ndarray:
    _check_input(model, X)
    p, cfg = model.params, model.config
    cache: dict = {}
    h = X
    if model.arch in ("cascade", "lstm"):
        cache["lstm"] = []
        for layer in range(cfg.lstm_layers):
            h, c = nn.lstm_layer_forward(model.lstm_params(layer), h)
            cache["lstm"].append(c)
    if model.arch == "lstm":
        flat = h[:, -1, :]
    else:
        # hidden units (or features) as rows, time steps as columns
        grid = h.transpose(0, 2, 1)
        conv, cache["conv"] = nn.conv2d_forward(grid, p["conv.W"], p["conv.b"], relu=True)
        pooled, cache["pool"] = nn.maxpool_forward(conv, cfg.pool)
        cache["pooled_shape"] = pooled.shape
        flat = pooled.reshape(len(X), -1)
    dropped, cache["mask"] = nn.dropout(flat, cfg.keep_prob, rng, training)
    cache["dense_in"] = dropped
    cache["lstm_out_shape"] = h.shape
    logits = nn.dense_forward(p["dense.W"], p["dense.b"], dropped)
    model._cache = cache if keep_cache else None
    return logits


def forward(model: CascadeModel, data, training: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probabilities, ``(n_samples, num_classes)``."""
    X, _ = _as_arrays(data)
    return nn.softmax(forward_logits(model, X, training, rng))


def backward(model: CascadeModel, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the data term for every parameter, from the last forward cache."""
    cache = model._cache
    if cache is None:
        raise nn.UsageError("backward called without a cached forward pass")
    p, cfg = model.params, model.config
    grads: dict[str, np.ndarray] = {}
    grads["dense.W"], grads["dense.b"], dflat = nn.dense_backward(p["dense.W"], cache["dense_in"], dlogits)
    dflat = nn.dropout_backward(cache["mask"], dflat)
    if model.arch == "lstm":
        dh = np.zeros(cache["lstm_out_shape"])
        dh[:, -1, :] = dflat
    else:
        dpooled = dflat.reshape(cache["pooled_shape"])
        dconv = nn.maxpool_backward(cache["pool"], dpooled)
        grads["conv.W"], grads["conv.b"], dgrid = nn.conv2d_backward(cache["conv"], dconv)
        dh = dgrid.transpose(0, 2, 1)
    if model.arch in ("cascade", "lstm"):
        for layer in reversed(range(cfg.lstm_layers)):
            g, dh = nn.lstm_layer_backward(cache["lstm"][layer], dh)
            grads.update({f"lstm{layer + 1}.{k}": v for k, v in g.as_dict().items()})
    return {k: grads[k] for k in p}


def loss_and_grads(model: CascadeModel, X: np.ndarray, y: np.ndarray, training: bool = True,
                   rng: np.random.Generator | None = None) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Mean cross-entropy plus L2 and its gradients; ``y`` holds 1-based labels.

    Also returns the batch's class probabilities.
    """
    y0 = np.asarray(y) - 1
    logits = forward_logits(model, X, training, rng, keep_cache=True)
    probs = nn.softmax(logits)
    weights = model.weight_names()
    lam = model.config.l2_lambda
    loss = nn.cross_entropy_l2(probs, y0, lam, [model.params[w] for w in weights])
    grads = backward(model, nn.softmax_cross_entropy_backward(probs, y0))
    model._cache = None
    for w in weights:
        grads[w] = grads[w] + 2.0 * lam * model.params[w]
    return loss, grads, probs


def _check_labels(y: np.ndarray, num_classes: int) -> None:
    if len(y) and (y.min() < 1 or y.max() > num_classes):
        raise DataError(f"labels must lie in [1, {num_classes}], got range [{y.min()}, {y.max()}]")


def train(data, config: CascadeConfig, arch: str = "cascade") -> tuple[CascadeModel, list[EpochStats]]:
    """Mini-batch SGD on the mean per-sample gradient.

    Samples are reshuffled every epoch from an RNG seeded with
    ``config.seed``; the same RNG drives initialisation and dropout, so a
    run is fully determined by the data order and the seed.  Training stops
    early once the epoch loss has improved by less than
    ``early_stop_tol`` over ``early_stop_patience`` epochs.
    """
    X, y = _as_arrays(data)
    if y is None or len(y) == 0:
        raise DataError("training needs a non-empty labelled dataset")
    y = np.asarray(y, dtype=np.int64)
    if config.num_classes is None:
        config = dataclasses.replace(config, num_classes=max(2, int(y.max())))
    _check_labels(y, config.num_classes)
    rng = np.random.default_rng(config.seed)
    model = init_model(config, arch, rng)
    _check_input(model, X)

    trace: list[EpochStats] = []
    lr, bs = config.learning_rate, config.batch_size
    for epoch in range(config.epochs):
        order = rng.permutation(len(y))
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            loss, grads, probs = loss_and_grads(model, X[idx], y[idx], True, rng)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(epoch, loss)
            for k, g in grads.items():
                model.params[k] -= lr * g
            total_loss += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) + 1 == y[idx]))
        stats = EpochStats(epoch, total_loss / len(y), correct / len(y))
        trace.append(stats)
        logger.debug("epoch %d loss %.6f acc %.4f", epoch, stats.loss, stats.accuracy)
        if not all(np.all(np.isfinite(v)) for v in model.params.values()):
            raise TrainingDivergenceError(epoch, float("nan"))
        pat = config.early_stop_patience
        if pat and len(trace) > pat:
            recent = min(s.loss for s in trace[-pat:])
            if trace[-pat - 1].loss - recent < config.early_stop_tol:
                logger.info("early stop after epoch %d", epoch)
                break
    model.epochs_run = len(trace)
    model.final_loss = trace[-1].loss if trace else None
    return model, trace


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    """1-based argmax; ties resolve to the lowest class id."""
    return np.argmax(probs, axis=-1) + 1


def predict(model: CascadeModel, data, batch_size: int = 1024) -> np.ndarray:
    X, _ = _as_arrays(data)
    if len(X) == 0:
        return np.zeros(0, dtype=np.int64)
    out = [argmax_lowest(nn.softmax(forward_logits(model, X[s:s + batch_size])))
           for s in range(0, len(X), batch_size)]
    return np.concatenate(out)


def save_model(model: CascadeModel, path: str | Path) -> None:
    header = model.config.header()
    header.update(arch=model.arch, epochs_run=model.epochs_run,
                  final_loss=model.final_loss)
    tensors = dict(model.params)
    if model.scaler is not None:
        tensors["scaler.minimum"] = model.scaler.minimum
        tensors["scaler.span"] = model.scaler.span
    serialization.save(path, "neural", header, tensors)


def model_from_blocks(header: dict[str, str], tensors: dict[str, np.ndarray]) -> CascadeModel:
    header = dict(header)
    arch = header.pop("arch")
    epochs_run = int(header.pop("epochs_run"))
    final_loss = _coerce("final_loss", header.pop("final_loss"))
    config = CascadeConfig.from_mapping(header)
    scaler = None
    if "scaler.minimum" in tensors:
        scaler = FeatureScaler(tensors.pop("scaler.minimum"), tensors.pop("scaler.span"))
    model = CascadeModel(config, arch, tensors, epochs_run, final_loss, scaler)
    expected = init_model(config, arch, np.random.default_rng(0)).params
    for k, v in expected.items():
        if k not in tensors or tensors[k].shape != v.shape:
            raise serialization.ModelFormatError(f"parameter {k} missing or misshapen")
    return model


def load_model(path: str | Path) -> CascadeModel:
    kind, header, tensors = serialization.load(path)
    if kind != "neural":
        raise serialization.ModelFormatError(f"expected a neural model file, got kind={kind}")
    return model_from_blocks(header, tensors)


def samples_to_arrays(samples: Sequence[WindowedSample]) -> tuple[np.ndarray, np.ndarray]:
    ds = WindowDataset.from_samples(samples)
    return ds.X, ds.labels
