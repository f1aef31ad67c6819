"""Slow reference implementations used only by the tests.

Each one is written independently of the package code: plain Python loops,
exact rationals or mpmath, no shared helpers.
"""

from __future__ import annotations

import math
from fractions import Fraction

import mpmath
import numpy as np

mpmath.mp.dps = 50


def floor_segment(t: float, T: float) -> int:
    return math.floor(Fraction(t) / Fraction(T))


def moments(values: list[float]) -> dict[str, float]:
    """Two-pass population statistics of a list; all zero when empty."""
    n = len(values)
    if n == 0:
        return dict.fromkeys(("max", "min", "mean", "sum", "std", "var", "skew", "kurt"), 0.0)
    total = math.fsum(values)
    mean = total / n
    m2 = math.fsum((v - mean) ** 2 for v in values) / n
    m3 = math.fsum((v - mean) ** 3 for v in values) / n
    m4 = math.fsum((v - mean) ** 4 for v in values) / n
    return {
        "max": max(values), "min": min(values), "mean": mean, "sum": total,
        "std": math.sqrt(m2), "var": m2,
        "skew": m3 / m2 ** 1.5 if m2 > 0 else 0.0,
        "kurt": m4 / (m2 * m2) if m2 > 0 else 0.0,
    }


def segment_features(records, device_mac: str, control: set[str], protocols) -> dict[str, float]:
    """Full feature dictionary of one segment, straight from its record list."""
    pops = {"all": [], "user": [], "control": [], "received": [], "transmitted": []}
    proto_counts = {p: 0 for p in protocols}
    for r in records:
        label = r.protocol.strip().upper()
        kind = "control" if label in control else "user"
        direction = "transmitted" if r.eth_src == device_mac else "received"
        for pop in ("all", kind, direction):
            pops[pop].append(float(r.length))
        for p in protocols:
            if label == p.upper():
                proto_counts[p] += 1
    out = {("total_count" if p == "all" else f"{p}_count"): float(len(v)) for p, v in pops.items()}
    out.update({f"{p.lower()}_count": float(c) for p, c in proto_counts.items()})
    for pop, vals in pops.items():
        for stat, v in moments(vals).items():
            out[f"{pop}_length_{stat}"] = v
    return out


def conv2d_naive(x, filters, bias, relu=True):
    """Valid cross-correlation with quadruple loops; x (C?, H, W) single channel."""
    H, W = len(x), len(x[0])
    K, kh, kw = filters.shape
    out = np.zeros((K, H - kh + 1, W - kw + 1))
    for k in range(K):
        for i in range(H - kh + 1):
            for j in range(W - kw + 1):
                acc = math.fsum(x[i + a][j + b] * filters[k, a, b] for a in range(kh) for b in range(kw))
                acc += bias[k]
                out[k, i, j] = max(acc, 0.0) if relu else acc
    return out


def maxpool_naive(m, ph=2, pw=2):
    K, H, W = m.shape
    out = np.zeros((K, H // ph, W // pw))
    for k in range(K):
        for i in range(H // ph):
            for j in range(W // pw):
                out[k, i, j] = max(m[k, i * ph + a, j * pw + b] for a in range(ph) for b in range(pw))
    return out


def softmax_mp(z):
    zs = [mpmath.mpf(float(v)) for v in z]
    exps = [mpmath.exp(v) for v in zs]
    s = mpmath.fsum(exps)
    return [float(e / s) for e in exps]


def lstm_cell_mp(W: dict, b: dict, x, h_prev, s_prev):
    """One LSTM step in 50-digit arithmetic, gate by gate."""
    def affine(gate):
        Wx, Wh, bb = W[gate + "x"], W[gate + "h"], b[gate]
        rows = len(bb)
        return [mpmath.fsum([mpmath.mpf(float(Wx[r][c])) * mpmath.mpf(float(x[c])) for c in range(len(x))]
                            + [mpmath.mpf(float(Wh[r][c])) * h_prev[c] for c in range(len(h_prev))])
                + mpmath.mpf(float(bb[r])) for r in range(rows)]

    sig = lambda v: 1 / (1 + mpmath.exp(-v))
    g = [mpmath.tanh(v) for v in affine("g")]
    i = [sig(v) for v in affine("i")]
    f = [sig(v) for v in affine("f")]
    o = [sig(v) for v in affine("o")]
    s = [g[k] * i[k] + s_prev[k] * f[k] for k in range(len(g))]
    h = [mpmath.tanh(s[k]) * o[k] for k in range(len(g))]
    return h, s
