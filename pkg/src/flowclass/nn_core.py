"""Dense float64 layers with hand-written forward and backward passes.

Every function takes a leading batch axis.  Forward functions return their
output together with a cache object; the matching backward function takes
that cache and the upstream gradient and returns gradients as fresh arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit

GATES = ("g", "i", "f", "o")


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


def sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# --------------------------------------------------------------------------- LSTM

@dataclass
class LstmCellParams:
    W_gx: np.ndarray
    W_gh: np.ndarray
    W_ix: np.ndarray
    W_ih: np.ndarray
    W_fx: np.ndarray
    W_fh: np.ndarray
    W_ox: np.ndarray
    W_oh: np.ndarray
    b_g: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        h, n_in = self.W_gx.shape
        for g in GATES:
            wx, wh, b = getattr(self, f"W_{g}x"), getattr(self, f"W_{g}h"), getattr(self, f"b_{g}")
            if wx.shape != (h, n_in) or wh.shape != (h, h) or b.shape != (h,):
                raise ShapeError(f"inconsistent LSTM parameter shapes for gate {g}")

    @property
    def hidden_size(self) -> int:
        return self.W_gx.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_gx.shape[1]

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> LstmCellParams:
        kw = {}
        for g in GATES:
            kw[f"W_{g}x"] = np.zeros((hidden_size, input_size))
            kw[f"W_{g}h"] = np.zeros((hidden_size, hidden_size))
            kw[f"b_{g}"] = np.zeros(hidden_size)
        return cls(**kw)

    @classmethod
    def init(cls, rng: np.random.Generator, input_size: int, hidden_size: int,
             forget_bias: float = 1.0) -> LstmCellParams:
        kw = {}
        for g in GATES:
            kw[f"W_{g}x"] = glorot_uniform(rng, (hidden_size, input_size), input_size, hidden_size)
            kw[f"W_{g}h"] = glorot_uniform(rng, (hidden_size, hidden_size), hidden_size, hidden_size)
            kw[f"b_{g}"] = np.zeros(hidden_size)
        kw["b_f"] = np.full(hidden_size, float(forget_bias))
        return cls(**kw)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gate-stacked ``(Wx (4h, in), Wh (4h, h), b (4h,))`` in g, i, f, o order."""
        Wx = np.concatenate([getattr(self, f"W_{g}x") for g in GATES])
        Wh = np.concatenate([getattr(self, f"W_{g}h") for g in GATES])
        b = np.concatenate([getattr(self, f"b_{g}") for g in GATES])
        return Wx, Wh, b

    @classmethod
    def from_stacked(cls, Wx: np.ndarray, Wh: np.ndarray, b: np.ndarray) -> LstmCellParams:
        h = Wh.shape[1]
        kw = {}
        for k, g in enumerate(GATES):
            kw[f"W_{g}x"] = Wx[k * h:(k + 1) * h]
            kw[f"W_{g}h"] = Wh[k * h:(k + 1) * h]
            kw[f"b_{g}"] = b[k * h:(k + 1) * h]
        return cls(**kw)


@dataclass
class LstmState:
    h: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        if self.h.shape != self.s.shape:
            raise ShapeError("hidden and cell state must have the same shape")

    @classmethod
    def zeros(cls, batch: int, hidden_size: int) -> LstmState:
        return cls(np.zeros((batch, hidden_size)), np.zeros((batch, hidden_size)))


@dataclass
class LstmStepCache:
    x: np.ndarray
    h_prev: np.ndarray
    s_prev: np.ndarray
    g: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    tanh_s: np.ndarray


def _lstm_step(Wx, Wh, b, x, h_prev, s_prev):
    hs = h_prev.shape[1]
    z = x @ Wx.T + h_prev @ Wh.T + b
    g = np.tanh(z[:, :hs])
    ifo = sigmoid(z[:, hs:])
    i, f, o = ifo[:, :hs], ifo[:, hs:2 * hs], ifo[:, 2 * hs:]
    s = g * i + s_prev * f
    tanh_s = np.tanh(s)
    h = tanh_s * o
    return h, s, LstmStepCache(x, h_prev, s_prev, g, i, f, o, tanh_s)


def _check_lstm_input(params: LstmCellParams, x: np.ndarray, prev: LstmState):
    if x.ndim != 2 or x.shape[1] != params.input_size:
        raise ShapeError(f"LSTM input of shape {x.shape} does not match input size {params.input_size}")
    if prev.h.shape != (x.shape[0], params.hidden_size):
        raise ShapeError(f"LSTM state of shape {prev.h.shape} does not match hidden size {params.hidden_size}")


def lstm_cell_forward(params: LstmCellParams, x: np.ndarray, prev: LstmState) -> tuple[LstmState, LstmStepCache]:
    """One LSTM step: ``x`` is ``(batch, input)``, ``prev`` holds ``(batch, hidden)`` arrays."""
    _check_lstm_input(params, x, prev)
    h, s, cache = _lstm_step(*params.stacked(), x, prev.h, prev.s)
    return LstmState(h, s), cache


def _lstm_step_backward(Wx, Wh, cache: LstmStepCache, dh, ds):
    ds = ds + dh * cache.o * (1.0 - cache.tanh_s ** 2)
    do = dh * cache.tanh_s
    dg = ds * cache.i
    di = ds * cache.g
    df = ds * cache.s_prev
    ds_prev = ds * cache.f
    dz = np.concatenate([
        dg * (1.0 - cache.g ** 2),
        di * cache.i * (1.0 - cache.i),
        df * cache.f * (1.0 - cache.f),
        do * cache.o * (1.0 - cache.o),
    ], axis=1)
    dWx = dz.T @ cache.x
    dWh = dz.T @ cache.h_prev
    db = dz.sum(axis=0)
    dx = dz @ Wx
    dh_prev = dz @ Wh
    return dx, dh_prev, ds_prev, dWx, dWh, db


def lstm_cell_backward(params: LstmCellParams, cache: LstmStepCache, dh: np.ndarray, ds: np.ndarray):
    """Gradients of one step given upstream ``dL/dh_k`` and ``dL/ds_k``.

    Returns ``(param_grads, dx, d_prev_state)``.
    """
    Wx, Wh, _ = params.stacked()
    dx, dh_prev, ds_prev, dWx, dWh, db = _lstm_step_backward(Wx, Wh, cache, dh, ds)
    return LstmCellParams.from_stacked(dWx, dWh, db), dx, LstmState(dh_prev, ds_prev)


@dataclass
class LstmLayerCache:
    steps: list[LstmStepCache]
    Wx: np.ndarray
    Wh: np.ndarray


def lstm_layer_forward(params: LstmCellParams, xs: np.ndarray, initial: LstmState | None = None):
    """Run the cell over ``xs`` of shape ``(batch, t, input)``.

    Returns every hidden state, ``(batch, t, hidden)``, plus the cache.
    The initial state defaults to zeros.
    """
    if xs.ndim != 3:
        raise ShapeError(f"expected (batch, t, input) sequence, got shape {xs.shape}")
    batch, t, _ = xs.shape
    state = initial or LstmState.zeros(batch, params.hidden_size)
    _check_lstm_input(params, xs[:, 0, :] if t else np.zeros((batch, params.input_size)), state)
    Wx, Wh, b = params.stacked()
    hs = np.empty((batch, t, params.hidden_size))
    steps = []
    h, s = state.h, state.s
    for k in range(t):
        h, s, cache = _lstm_step(Wx, Wh, b, xs[:, k, :], h, s)
        hs[:, k, :] = h
        steps.append(cache)
    return hs, LstmLayerCache(steps, Wx, Wh)


def lstm_layer_backward(cache: LstmLayerCache, dhs: np.ndarray):
    """Backpropagation through time.

    ``dhs`` is ``dL/dh`` for every step, ``(batch, t, hidden)``.  Returns
    ``(param_grads, dxs)``.
    """
    if cache is None:
        raise UsageError("lstm_layer_backward called without a forward cache")
    batch, t, hsz = dhs.shape
    dWx = np.zeros_like(cache.Wx)
    dWh = np.zeros_like(cache.Wh)
    db = np.zeros(cache.Wx.shape[0])
    dxs = np.empty((batch, t, cache.Wx.shape[1]))
    dh_next = np.zeros((batch, hsz))
    ds_next = np.zeros((batch, hsz))
    for k in reversed(range(t)):
        dx, dh_next, ds_next, gWx, gWh, gb = _lstm_step_backward(
            cache.Wx, cache.Wh, cache.steps[k], dhs[:, k, :] + dh_next, ds_next)
        dWx += gWx
        dWh += gWh
        db += gb
        dxs[:, k, :] = dx
    return LstmCellParams.from_stacked(dWx, dWh, db), dxs


# --------------------------------------------------------------------------- convolution

@dataclass
class ConvCache:
    cols: np.ndarray  # (batch, Ho, Wo, kh*kw) input patches
    filters: np.ndarray
    input_shape: tuple[int, ...]
    out: np.ndarray | None  # post-ReLU output, None when no ReLU was applied


def conv2d_forward(x: np.ndarray, filters: np.ndarray, bias: np.ndarray, relu: bool = True):
    """Valid 2-D cross-correlation, stride 1, one input channel.

    ``x`` is ``(batch, H, W)``, ``filters`` ``(K, kh, kw)``; the output is
    ``(batch, K, H-kh+1, W-kw+1)`` with ReLU applied when ``relu`` is set.
    The result is a transposed view of channel-last storage.
    """
    if x.ndim != 3 or filters.ndim != 3 or bias.shape != (filters.shape[0],):
        raise ShapeError(f"bad conv shapes: input {x.shape}, filters {filters.shape}, bias {bias.shape}")
    B, H, W = x.shape
    K, kh, kw = filters.shape
    if H < kh or W < kw:
        raise ShapeError(f"input {H}x{W} is smaller than the {kh}x{kw} kernel")
    Ho, Wo = H - kh + 1, W - kw + 1
    cols = np.empty((B, Ho, Wo, kh * kw))
    for p in range(kh):
        for q in range(kw):
            cols[..., p * kw + q] = x[:, p:p + Ho, q:q + Wo]
    z = (cols.reshape(-1, kh * kw) @ filters.reshape(K, kh * kw).T + bias).reshape(B, Ho, Wo, K)
    if relu:
        np.maximum(z, 0.0, out=z)
    out = z.transpose(0, 3, 1, 2)
    return out, ConvCache(cols, filters, x.shape, out if relu else None)


def conv2d_backward(cache: ConvCache, dout: np.ndarray):
    """Returns ``(dfilters, dbias, dx)``; ``dout`` is the gradient of the conv output."""
    if cache is None:
        raise UsageError("conv2d_backward called without a forward cache")
    if cache.out is not None:
        dout = dout * (cache.out > 0)
    K, kh, kw = cache.filters.shape
    B, Ho, Wo, taps = cache.cols.shape
    dz = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, K)
    cols = cache.cols.reshape(-1, taps)
    dfilters = (dz.T @ cols).reshape(K, kh, kw)
    dbias = dz.sum(axis=0)
    dcols = (dz @ cache.filters.reshape(K, taps)).reshape(B, Ho, Wo, taps)
    dx = np.zeros(cache.input_shape)
    for p in range(kh):
        for q in range(kw):
            dx[:, p:p + Ho, q:q + Wo] += dcols[..., p * kw + q]
    return dfilters, dbias, dx


# --------------------------------------------------------------------------- pooling

@dataclass
class PoolCache:
    winners: list[np.ndarray]  # one boolean map per tile offset, row-major order
    x: np.ndarray
    pool: tuple[int, int]


def maxpool_forward(x: np.ndarray, pool: tuple[int, int] = (2, 2)):
    """Non-overlapping max pooling (stride = pool size) over the last two axes.

    Trailing rows/columns that do not fill a tile are dropped.  Ties go to
    the first position in row-major tile order.
    """
    ph, pw = pool
    H, W = x.shape[-2:]
    Ho, Wo = H // ph, W // pw
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"map {H}x{W} is smaller than the {ph}x{pw} pool")
    parts = [x[..., a:Ho * ph:ph, b:Wo * pw:pw] for a in range(ph) for b in range(pw)]
    out = parts[0].copy(order="K")
    for part in parts[1:]:
        np.maximum(out, part, out=out)
    taken = np.zeros_like(out, dtype=bool)
    winners = []
    for part in parts:
        win = (part == out) & ~taken
        taken |= win
        winners.append(win)
    return out, PoolCache(winners, x, pool)


def maxpool_backward(cache: PoolCache, dout: np.ndarray) -> np.ndarray:
    if cache is None:
        raise UsageError("maxpool_backward called without a forward cache")
    ph, pw = cache.pool
    Ho, Wo = dout.shape[-2:]
    dx = np.zeros_like(cache.x)  # keeps the input's memory layout
    k = 0
    for a in range(ph):
        for b in range(pw):
            dx[..., a:Ho * ph:ph, b:Wo * pw:pw] = dout * cache.winners[k]
            k += 1
    return dx


# --------------------------------------------------------------------------- dense, dropout, softmax

def dense_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense layer {W.shape} cannot take input {x.shape}")
    return x @ W.T + b


def dense_backward(W: np.ndarray, x: np.ndarray, dout: np.ndarray):
    """Returns ``(dW, db, dx)``."""
    return dout.T @ x, dout.sum(axis=0), dout @ W


def _check_keep_prob(keep_prob: float) -> None:
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")


def dropout(x: np.ndarray, keep_prob: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout.  Returns ``(output, mask)``; the mask is ``None`` when inactive."""
    _check_keep_prob(keep_prob)
    if not training or keep_prob == 1.0:
        return x, None
    if rng is None:
        raise UsageError("training-mode dropout needs an RNG")
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return x * mask, mask


def dropout_backward(mask: np.ndarray | None, dout: np.ndarray) -> np.ndarray:
    return dout if mask is None else dout * mask


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def l2_penalty(weights, lam: float) -> float:
    if lam < 0:
        raise ValueError(f"L2 coefficient must be non-negative, got {lam}")
    return lam * sum(float(np.sum(w * w)) for w in weights)


def cross_entropy_l2(probs: np.ndarray, labels, lam: float, weights=()) -> float:
    """Mean of ``-log p[label]`` over the batch plus ``lam * sum ||W||^2``.

    ``labels`` are 0-based class indices.  A single probability vector with
    a scalar label is accepted too.
    """
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(np.asarray(labels))
    picked = probs[np.arange(len(labels)), labels]
    with np.errstate(divide="ignore"):  # p = 0 gives an infinite loss, caught by the trainer
        data_term = float(-np.mean(np.log(picked)))
    return data_term + l2_penalty(weights, lam)


def softmax_cross_entropy_backward(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the logits."""
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)
