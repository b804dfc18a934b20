"""Differentiable primitives with hand-written backward passes.

Everything here is plain numpy. Forward functions return (output, cache);
the matching *_bwd function consumes the upstream gradient plus that cache.
Reductions (means, scatter sums) accumulate in float64 and cast back to the
input dtype, so float32 runs stay accurate while float64 runs (used by the
finite-difference gradient oracle) remain exact.

No residual framework, no tape: the model assembles these by hand, which
keeps the analytic gradients and the finite-difference check genuinely
independent implementations.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
COS_EPS = 1e-8


def linear(x, w, b):
    """y = x @ w + b over the last axis; x may have any leading shape."""
    y = x @ w + b
    return y, (x, w)


def linear_bwd(dy, cache):
    x, w = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0, dtype=np.float64).astype(dy.dtype)
    return dx, dw, db


def relu(x):
    y = np.maximum(x, 0)
    return y, x


def relu_bwd(dy, cache):
    return dy * (cache > 0)


def layernorm(x, g, b):
    """Normalize over the last axis; g, b broadcast over leading axes."""
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = np.square(x.astype(np.float64) - mu).mean(axis=-1, keepdims=True)
    istd = (1.0 / np.sqrt(var + LN_EPS)).astype(x.dtype)
    xhat = ((x - mu) * istd).astype(x.dtype)
    y = g * xhat + b
    return y, (xhat, istd, g)


def layernorm_bwd(dy, cache):
    xhat, istd, g = cache
    d = xhat.shape[-1]
    flat = dy.reshape(-1, d)
    xflat = xhat.reshape(-1, d)
    dg = (flat * xflat).sum(axis=0, dtype=np.float64).astype(dy.dtype)
    db = flat.sum(axis=0, dtype=np.float64).astype(dy.dtype)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float64).astype(dy.dtype)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(dy.dtype)
    dx = istd * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def segment_maxpool(x, offsets):
    """Coordinate-wise max over row segments [offsets[s], offsets[s+1]).

    Ties resolve to the first row, which makes duplicated points a no-op in
    both directions of the pass. Returns (S, D) maxima and absolute row
    indices of the winners.
    """
    n = len(offsets) - 1
    d = x.shape[1]
    out = np.empty((n, d), dtype=x.dtype)
    idx = np.empty((n, d), dtype=np.int64)
    for s in range(n):
        lo, hi = offsets[s], offsets[s + 1]
        seg = x[lo:hi]
        win = seg.argmax(axis=0)
        idx[s] = lo + win
        out[s] = seg[win, np.arange(d)]
    return out, (idx, x.shape)


def segment_maxpool_bwd(dy, cache):
    idx, shape = cache
    dx = np.zeros(shape, dtype=dy.dtype)
    cols = np.arange(shape[1])
    np.add.at(dx, (idx, cols[None, :]), dy)
    return dx


def segment_maxpool_gaps(x, offsets):
    """Per-column gap between the top two values of each segment (inf if one row)."""
    gaps = []
    for s in range(len(offsets) - 1):
        seg = x[offsets[s]:offsets[s + 1]]
        if seg.shape[0] < 2:
            gaps.append(np.inf)
            continue
        top2 = np.partition(seg, -2, axis=0)[-2:]
        gaps.append(float(np.min(top2[1] - top2[0])))
    return min(gaps) if gaps else np.inf


def scatter_mean(values, groups, n):
    """Mean of value rows per group id; empty groups yield zero rows."""
    d = values.shape[1]
    acc = np.zeros((n, d), dtype=np.float64)
    np.add.at(acc, groups, values.astype(np.float64))
    counts = np.bincount(groups, minlength=n)
    denom = np.maximum(counts, 1)
    out = (acc / denom[:, None]).astype(values.dtype)
    return out, (groups, denom, values.dtype)


def scatter_mean_bwd(dy, cache):
    groups, denom, dtype = cache
    return (dy / denom[:, None].astype(dy.dtype))[groups].astype(dtype)


def mean_rows(x):
    """Mean over the second-to-last axis with float64 accumulation."""
    return x.mean(axis=-2, dtype=np.float64).astype(x.dtype), (x.shape, x.dtype)


def mean_rows_bwd(dy, cache):
    shape, dtype = cache
    n = shape[-2]
    return np.broadcast_to(np.expand_dims(dy, -2) / dtype.type(n), shape).astype(dtype)


def softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def softmax_bwd(dy, y):
    return (dy - (dy * y).sum(axis=-1, keepdims=True)) * y


def attention(q, k, v):
    """Single-head scaled dot-product attention over (..., T, A) tensors."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * q.dtype.type(scale)
    attn, _ = softmax(scores)
    out = attn @ v
    return out, (q, k, v, attn, scale)


def attention_bwd(dout, cache):
    q, k, v, attn, scale = cache
    dattn = dout @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ dout
    dscores = softmax_bwd(dattn, attn) * q.dtype.type(scale)
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    return dq, dk, dv


def cosine_rows(a, b):
    """Row-wise cosine with epsilon-guarded norms; never NaN."""
    na = np.sqrt(np.sum(a * a, axis=-1, dtype=np.float64)).astype(a.dtype)
    nb = np.sqrt(np.sum(b * b, axis=-1, dtype=np.float64)).astype(a.dtype)
    p = na + a.dtype.type(COS_EPS)
    q = nb + a.dtype.type(COS_EPS)
    s = np.sum(a * b, axis=-1, dtype=np.float64).astype(a.dtype)
    cos = s / (p * q)
    return cos, (a, b, na, nb, p, q, cos)


def cosine_rows_bwd(dcos, cache):
    a, b, na, nb, p, q, cos = cache
    na_safe = np.where(na > 0, na, 1).astype(a.dtype)
    nb_safe = np.where(nb > 0, nb, 1).astype(a.dtype)
    da = dcos[..., None] * (b / (p * q)[..., None] - (cos / p)[..., None] * (a / na_safe[..., None]))
    db = dcos[..., None] * (a / (p * q)[..., None] - (cos / q)[..., None] * (b / nb_safe[..., None]))
    return da.astype(a.dtype), db.astype(a.dtype)


def sinusoidal_tag(tokens: int, dim: int) -> np.ndarray:
    """Fixed positional tag: interleaved sin/cos over geometric wavelengths."""
    pos = np.arange(tokens, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / dim)
    tag = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return tag
