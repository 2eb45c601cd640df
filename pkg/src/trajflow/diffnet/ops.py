"""Forward and backward passes for every layer the forecaster needs.

Each function takes and returns :class:`DiffTensor` nodes. Backward
closures are hand-written and exact; the finite-difference checker in
:mod:`.gradcheck` is the referee. Recurrent cells, attention blocks and
normalizations are fused into single tape nodes to keep the graph
small.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import as_tensor, make_node

_EXPM_SERIES_CUTOFF = 1e-4


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[:, None] * b[None, :]


# ---------------------------------------------------------------------------
# elementwise and structural

def add(x, y):
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"add: {x.shape} vs {y.shape}")

    def bwd(g):
        x.accumulate(g)
        y.accumulate(g)
    return make_node(x.data + y.data, (x, y), bwd)


def sub(x, y):
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"sub: {x.shape} vs {y.shape}")

    def bwd(g):
        x.accumulate(g)
        y.accumulate(-g)
    return make_node(x.data - y.data, (x, y), bwd)


def mul(x, y):
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"mul: {x.shape} vs {y.shape}")

    def bwd(g):
        x.accumulate(g * y.data)
        y.accumulate(g * x.data)
    return make_node(x.data * y.data, (x, y), bwd)


def scale(x, c: float):
    x = as_tensor(x)

    def bwd(g):
        x.accumulate(g * c)
    return make_node(x.data * c, (x,), bwd)


def affine_const(x, scale_arr, shift_arr):
    """y = scale * x + shift with constant coefficients (unit changes)."""
    x = as_tensor(x)
    scale_arr = np.asarray(scale_arr, dtype=np.float64)

    def bwd(g):
        x.accumulate(g * scale_arr)
    return make_node(x.data * scale_arr + np.asarray(shift_arr), (x,), bwd)


def concat(parts):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.accumulate(g[lo:hi])
    return make_node(np.concatenate([p.data for p in parts]), tuple(parts), bwd)


def stack_rows(rows):
    """Stack (D,) vectors into an (A, D) matrix."""
    rows = [as_tensor(r) for r in rows]

    def bwd(g):
        for i, r in enumerate(rows):
            r.accumulate(g[i])
    return make_node(np.stack([r.data for r in rows]), tuple(rows), bwd)


def slice_vec(x, start: int, stop: int):
    x = as_tensor(x)

    def bwd(g):
        buf = np.zeros_like(x.data)
        buf[start:stop] = g
        x.accumulate(buf)
    return make_node(x.data[start:stop].copy(), (x,), bwd)


def reshape(x, shape):
    x = as_tensor(x)

    def bwd(g):
        x.accumulate(g.reshape(x.data.shape))
    return make_node(x.data.reshape(shape), (x,), bwd)


def vsum(x):
    x = as_tensor(x)

    def bwd(g):
        x.accumulate(np.full_like(x.data, float(g)))
    return make_node(np.asarray(x.data.sum()), (x,), bwd)


def mean_of(nodes):
    """Mean of scalar nodes; the usual reduction for per-step losses."""
    nodes = [as_tensor(n) for n in nodes]
    inv = 1.0 / len(nodes)

    def bwd(g):
        for n in nodes:
            n.accumulate(np.asarray(float(g) * inv))
    return make_node(np.asarray(sum(float(n.data) for n in nodes) * inv),
                     tuple(nodes), bwd)


# ---------------------------------------------------------------------------
# activations

def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)

    def bwd(g):
        x.accumulate(g * (1.0 - y * y))
    return make_node(y, (x,), bwd)


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)

    def bwd(g):
        x.accumulate(g * y * (1.0 - y))
    return make_node(y, (x,), bwd)


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def bwd(g):
        x.accumulate(g * mask)
    return make_node(x.data * mask, (x,), bwd)


def softplus(x):
    """log(1 + e^x) in the overflow-safe form max(x, 0) + log1p(e^-|x|)."""
    x = as_tensor(x)
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    sig = _sigmoid(x.data)

    def bwd(g):
        x.accumulate(g * sig)
    return make_node(y, (x,), bwd)


def softmax(x):
    x = as_tensor(x)
    shifted = x.data - x.data.max()
    e = np.exp(shifted)
    y = e / e.sum()

    def bwd(g):
        x.accumulate(y * (g - float(g @ y)))
    return make_node(y, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra

def linear(x, w, b):
    """y = x @ w + b for a (N,) or (B, N) input."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear: x {x.shape} incompatible with W {w.shape}")
    if w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"linear: W {w.shape} incompatible with b {b.shape}")
    y = x.data @ w.data + b.data

    def bwd(g):
        if x.data.ndim == 1:
            x.accumulate(g @ w.data.T)
            w.accumulate(_outer(x.data, g))
            b.accumulate(g)
        else:
            x.accumulate(g @ w.data.T)
            w.accumulate(x.data.T @ g)
            b.accumulate(g.sum(axis=0))
    return make_node(y, (x, w, b), bwd)


def matvec(a, v):
    a, v = as_tensor(a), as_tensor(v)
    if a.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"matvec: A {a.shape} incompatible with v {v.shape}")

    def bwd(g):
        a.accumulate(_outer(g, v.data))
        v.accumulate(a.data.T @ g)
    return make_node(a.data @ v.data, (a, v), bwd)


def inverse2x2(m):
    m = as_tensor(m)
    det = m.data[0, 0] * m.data[1, 1] - m.data[0, 1] * m.data[1, 0]
    inv = np.array([[m.data[1, 1], -m.data[0, 1]],
                    [-m.data[1, 0], m.data[0, 0]]]) / det

    def bwd(g):
        m.accumulate(-inv.T @ g @ inv.T)
    return make_node(inv, (m,), bwd)


def _expm2x2_parts(m: np.ndarray):
    """Shared closed-form pieces: u = e^(tau/2), c, f, and df/ddelta."""
    tau = m[0, 0] + m[1, 1]
    half_diff = 0.5 * (m[0, 0] - m[1, 1])
    delta = half_diff * half_diff + m[0, 1] * m[1, 0]
    if abs(delta) < _EXPM_SERIES_CUTOFF:
        c = 1.0 + delta / 2.0 + delta**2 / 24.0 + delta**3 / 720.0
        f = 1.0 + delta / 6.0 + delta**2 / 120.0 + delta**3 / 5040.0
        dfdd = 1.0 / 6.0 + delta / 60.0 + delta**2 / 1680.0
    elif delta > 0:
        s = np.sqrt(delta)
        c = np.cosh(s)
        f = np.sinh(s) / s
        dfdd = (c - f) / (2.0 * delta)
    else:
        s = np.sqrt(-delta)
        c = np.cos(s)
        f = np.sin(s) / s
        dfdd = (c - f) / (2.0 * delta)
    return tau, delta, np.exp(0.5 * tau), c, f, dfdd


def expm2x2_value(m: np.ndarray) -> np.ndarray:
    """Closed-form exponential of a real 2x2 matrix.

    Splits m into (tau/2) I + N with traceless N, where N^2 = delta I;
    then expm(m) = e^(tau/2) (cosh(sqrt(delta)) I + sinh(sqrt(delta)) /
    sqrt(delta) N), with the trigonometric branch for negative delta and
    a truncated series when delta is near zero.
    """
    tau, _, u, c, f, _ = _expm2x2_parts(m)
    n = m - 0.5 * tau * np.eye(2)
    return u * (c * np.eye(2) + f * n)


def expm2x2(m):
    """Matrix exponential as a differentiable op (2x2 only)."""
    m = as_tensor(m)
    if m.shape != (2, 2):
        raise ShapeError(f"expm2x2: expected (2, 2), got {m.shape}")
    tau, _, u, c, f, dfdd = _expm2x2_parts(m.data)
    eye = np.eye(2)
    n = m.data - 0.5 * tau * eye
    p = c * eye + f * n
    y = u * p

    def bwd(g):
        tr_g = g[0, 0] + g[1, 1]
        g_tau = 0.5 * u * float((g * p).sum()) - 0.5 * u * f * tr_g
        g_delta = 0.5 * u * f * tr_g + u * float((g * n).sum()) * dfdd
        dm = u * f * g
        dm = dm + g_tau * eye
        half_diff = 0.5 * (m.data[0, 0] - m.data[1, 1])
        dm = dm + g_delta * np.array([[half_diff, m.data[1, 0]],
                                      [m.data[0, 1], -half_diff]])
        m.accumulate(dm)
    return make_node(y, (m,), bwd)


# ---------------------------------------------------------------------------
# normalization and recurrent cells

def layer_norm(x, gain, bias, eps: float = 1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[0]
    if d < 2:
        raise ShapeError("layer_norm needs a feature dimension >= 2")
    mu = x.data.mean()
    centered = x.data - mu
    var = (centered * centered).mean()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = gain.data * xhat + bias.data

    def bwd(g):
        dxhat = g * gain.data
        dvar = float((dxhat * centered).sum()) * (-0.5) * inv_std**3
        dmu = float(dxhat.sum()) * (-inv_std) + dvar * (-2.0 / d) * float(centered.sum())
        x.accumulate(dxhat * inv_std + dvar * 2.0 * centered / d + dmu / d)
        gain.accumulate(g * xhat)
        bias.accumulate(g)
    return make_node(y, (x, gain, bias), bwd)


def lstm_cell(x, h, c, wx, wh, b):
    """One LSTM step; gate order (input, forget, cell, output).

    Returns (h_next, c_next). The two outputs carry independent backward
    closures over the shared pre-activation cache, so chained steps
    backpropagate exactly through time.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    wx, wh, b = as_tensor(wx), as_tensor(wh), as_tensor(b)
    hidden = h.data.shape[0]
    if wx.data.shape != (x.data.shape[0], 4 * hidden) or \
            wh.data.shape != (hidden, 4 * hidden) or b.data.shape != (4 * hidden,):
        raise ShapeError(
            f"lstm_cell: x {x.shape}, h {h.shape}, Wx {wx.shape}, Wh {wh.shape}, b {b.shape}")
    z = x.data @ wx.data + h.data @ wh.data + b.data
    i = _sigmoid(z[:hidden])
    f = _sigmoid(z[hidden:2 * hidden])
    g_gate = np.tanh(z[2 * hidden:3 * hidden])
    o = _sigmoid(z[3 * hidden:])
    c_next = f * c.data + i * g_gate
    tanh_c = np.tanh(c_next)
    h_next = o * tanh_c
    parents = (x, h, c, wx, wh, b)

    def route(dz, dc_direct):
        x.accumulate(dz @ wx.data.T)
        h.accumulate(dz @ wh.data.T)
        c.accumulate(dc_direct)
        wx.accumulate(_outer(x.data, dz))
        wh.accumulate(_outer(h.data, dz))
        b.accumulate(dz)

    def gate_grads(dc):
        di = dc * g_gate * i * (1 - i)
        df = dc * c.data * f * (1 - f)
        dg = dc * i * (1 - g_gate * g_gate)
        return di, df, dg

    def bwd_h(g):
        do = g * tanh_c * o * (1 - o)
        dc = g * o * (1 - tanh_c * tanh_c)
        di, df, dg = gate_grads(dc)
        route(np.concatenate([di, df, dg, do]), dc * f)

    def bwd_c(g):
        di, df, dg = gate_grads(g)
        route(np.concatenate([di, df, dg, np.zeros(hidden)]), g * f)

    return (make_node(h_next, parents, bwd_h),
            make_node(c_next, parents, bwd_c))


def gru_cell(x, h, wx, wh, bx, bh):
    """One GRU step; gate order (reset, update, candidate)."""
    x, h = as_tensor(x), as_tensor(h)
    wx, wh, bx, bh = as_tensor(wx), as_tensor(wh), as_tensor(bx), as_tensor(bh)
    hidden = h.data.shape[0]
    if wx.data.shape != (x.data.shape[0], 3 * hidden) or \
            wh.data.shape != (hidden, 3 * hidden):
        raise ShapeError(
            f"gru_cell: x {x.shape}, h {h.shape}, Wx {wx.shape}, Wh {wh.shape}")
    zx = x.data @ wx.data + bx.data
    zh = h.data @ wh.data + bh.data
    r = _sigmoid(zx[:hidden] + zh[:hidden])
    u = _sigmoid(zx[hidden:2 * hidden] + zh[hidden:2 * hidden])
    hn_pre = zh[2 * hidden:]
    n = np.tanh(zx[2 * hidden:] + r * hn_pre)
    h_next = (1 - u) * n + u * h.data

    def bwd(g):
        dn = g * (1 - u)
        du = g * (h.data - n) * u * (1 - u)
        dpre_n = dn * (1 - n * n)
        dr = dpre_n * hn_pre * r * (1 - r)
        dzx = np.concatenate([dr, du, dpre_n])
        dzh = np.concatenate([dr, du, dpre_n * r])
        x.accumulate(dzx @ wx.data.T)
        h.accumulate(dzh @ wh.data.T + g * u)
        wx.accumulate(_outer(x.data, dzx))
        wh.accumulate(_outer(h.data, dzh))
        bx.accumulate(dzx)
        bh.accumulate(dzh)
    return make_node(h_next, (x, h, wx, wh, bx, bh), bwd)


# ---------------------------------------------------------------------------
# attention

def scaled_dot_attention(q, keys, values):
    """Softmax(q . k / sqrt(dim))-weighted sum of value rows."""
    q, keys, values = as_tensor(q), as_tensor(keys), as_tensor(values)
    if keys.data.shape != values.data.shape:
        raise ShapeError(f"attention: K {keys.shape} vs V {values.shape}")
    if keys.data.shape[0] == 0:
        raise ShapeError("attention over zero agents")
    dim = q.data.shape[0]
    scores = keys.data @ q.data / np.sqrt(dim)
    shifted = scores - scores.max()
    e = np.exp(shifted)
    w = e / e.sum()
    out = w @ values.data

    def bwd(g):
        dw = values.data @ g
        ds = w * (dw - float(dw @ w))
        q.accumulate(keys.data.T @ ds / np.sqrt(dim))
        keys.accumulate(_outer(ds, q.data) / np.sqrt(dim))
        values.accumulate(_outer(w, g))
    return make_node(out, (q, keys, values), bwd)


def additive_attention(fh, f_grid, score_w):
    """Location scores ReLU(fh + f_grid[i]) . w, softmaxed over pixels.

    ``f_grid`` is the flattened projected feature map, (P, D); the
    output is the (P,) attention map.
    """
    fh, f_grid, score_w = as_tensor(fh), as_tensor(f_grid), as_tensor(score_w)
    if fh.data.shape[0] != f_grid.data.shape[1] or \
            score_w.data.shape[0] != fh.data.shape[0]:
        raise ShapeError(
            f"additive_attention: fh {fh.shape}, grid {f_grid.shape}, w {score_w.shape}")
    rel = f_grid.data + fh.data
    np.maximum(rel, 0.0, out=rel)
    scores = rel @ score_w.data
    shifted = scores - scores.max()
    e = np.exp(shifted)
    alpha = e / e.sum()

    def bwd(g):
        ds = alpha * (g - float(g @ alpha))
        dpre = _outer(ds, score_w.data)
        dpre *= rel > 0
        fh.accumulate(dpre.sum(axis=0))
        f_grid.accumulate(dpre)
        score_w.accumulate(rel.T @ ds)
    return make_node(alpha, (fh, f_grid, score_w), bwd)


def attention_pool(grid, alpha):
    """Pixel-wise sum of grid rows weighted by the attention map."""
    grid, alpha = as_tensor(grid), as_tensor(alpha)
    if grid.data.shape[0] != alpha.data.shape[0]:
        raise ShapeError(f"attention_pool: grid {grid.shape} vs alpha {alpha.shape}")

    def bwd(g):
        grid.accumulate(_outer(alpha.data, g))
        alpha.accumulate(grid.data @ g)
    return make_node(grid.data.T @ alpha.data, (grid, alpha), bwd)


# ---------------------------------------------------------------------------
# spatial sampling

def bilinear_sample(feature, pos):
    """Sample a (H, W, C) feature map at fractional (row, col) coords.

    Out-of-range queries clamp to the border; both gradient paths
    (features, position) are exact, with the position gradient zeroed in
    a clamped direction.
    """
    feature, pos = as_tensor(feature), as_tensor(pos)
    h, w, _ = feature.data.shape
    r = float(np.clip(pos.data[0], 0.0, h - 1))
    c = float(np.clip(pos.data[1], 0.0, w - 1))
    r_free = 0.0 <= pos.data[0] <= h - 1
    c_free = 0.0 <= pos.data[1] <= w - 1
    r0 = min(int(np.floor(r)), h - 2) if h > 1 else 0
    c0 = min(int(np.floor(c)), w - 2) if w > 1 else 0
    r1, c1 = min(r0 + 1, h - 1), min(c0 + 1, w - 1)
    fr, fc = r - r0, c - c0
    f00, f01 = feature.data[r0, c0], feature.data[r0, c1]
    f10, f11 = feature.data[r1, c0], feature.data[r1, c1]
    top = f00 * (1 - fc) + f01 * fc
    bot = f10 * (1 - fc) + f11 * fc
    out = top * (1 - fr) + bot * fr

    def bwd(g):
        buf = np.zeros_like(feature.data)
        buf[r0, c0] += g * (1 - fr) * (1 - fc)
        buf[r0, c1] += g * (1 - fr) * fc
        buf[r1, c0] += g * fr * (1 - fc)
        buf[r1, c1] += g * fr * fc
        feature.accumulate(buf)
        dr = float(g @ (bot - top)) if r_free else 0.0
        dc = float(g @ ((f01 - f00) * (1 - fr) + (f11 - f10) * fr)) if c_free else 0.0
        pos.accumulate(np.array([dr, dc]))
    return make_node(out, (feature, pos), bwd)


def external_lookup(pos, lookup_fn):
    """Wrap a pure (value, grad) position lookup as a tape node.

    ``lookup_fn(xy) -> (float, (2,) grad)`` supplies both the value and
    its position gradient; used for map-prior log-density queries.
    """
    pos = as_tensor(pos)
    value, grad = lookup_fn(pos.data)
    grad = np.asarray(grad, dtype=np.float64)

    def bwd(g):
        pos.accumulate(float(g) * grad)
    return make_node(np.asarray(float(value)), (pos,), bwd)
