"""Differentiable primitives for 1-D signal networks.

Conventions:
  * signal tensors are (batch, channels, time)
  * conv1d computes cross-correlation (no kernel flip), weight (out, in/groups, k)
  * conv_transpose1d weight is (in, out, k) and is the exact adjoint of conv1d
    for matching stride when padding="none"
  * recurrent features are (batch, time, features)
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, as_tensor, make_node

LEAKY_SLOPE = 0.3

_EINSUM_PATHS: dict = {}


def _einsum(subs: str, *operands: np.ndarray) -> np.ndarray:
    """einsum with a memoized contraction path (keyed on signature+shapes)."""
    key = (subs, tuple(op.shape for op in operands))
    path = _EINSUM_PATHS.get(key)
    if path is None:
        path = np.einsum_path(subs, *operands, optimize="optimal")[0]
        _EINSUM_PATHS[key] = path
    return np.einsum(subs, *operands, optimize=path)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_node(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return make_node(out, (a, b), vjp)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return make_node(x.data * c, (x,), lambda g: (g * c,))


def concat(xs, axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat of empty sequence")
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.data.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(out, tuple(xs), vjp)


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)

    def vjp(g):
        return (np.where(pos, g, slope * g),)

    return make_node(out, (x,), vjp)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return make_node(s, (x,), vjp)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # stable in both tails
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - t * t),)

    return make_node(t, (x,), vjp)


def dense(x, w, b=None) -> Tensor:
    """x (..., f_in) @ w (f_in, f_out) + b."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"dense: {x.data.shape} x {w.data.shape}")
    out = x.data @ w.data
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gx = g @ w.data.T
        x2 = x.data.reshape(-1, x.data.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, _unbroadcast(g, b.data.shape)

    return make_node(out, parents, vjp)


# ---------------------------------------------------------------------------
# convolutions

def _frame_view(xp: np.ndarray, k: int, stride: int, dilation: int, out_t: int):
    """Read-only view xp[b, c, t*stride + j*dilation] of shape (B, C, k, out_t)."""
    sb, sc, st = xp.strides
    return as_strided(
        xp,
        shape=(xp.shape[0], xp.shape[1], k, out_t),
        strides=(sb, sc, st * dilation, st * stride),
        writeable=False,
    )


def _same_padding(k: int, dilation: int) -> tuple[int, int]:
    total = dilation * (k - 1)
    return total // 2, total - total // 2


def conv1d(x, weight, bias=None, stride: int = 1, dilation: int = 1,
           groups: int = 1, padding: str = "none") -> Tensor:
    """Cross-correlation along the last axis.

    x (B, C_in, T), weight (C_out, C_in/groups, K) -> (B, C_out, T_out) with
    T_out = floor((T_padded - dilation*(K-1) - 1)/stride) + 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be positive")
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError("conv1d expects 3-d input and weight")
    batch, c_in, t = x.data.shape
    c_out, c_in_g, k = weight.data.shape
    if c_in % groups or c_out % groups:
        raise ValueError(f"channels ({c_in}->{c_out}) not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise ValueError(f"weight expects {c_in_g * groups} input channels, got {c_in}")
    if padding == "same":
        if stride != 1:
            raise ValueError("same-padding requires stride 1")
        left, right = _same_padding(k, dilation)
    elif padding == "none":
        left = right = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")

    t_pad = t + left + right
    span = dilation * (k - 1) + 1
    if t_pad < span:
        raise ValueError(f"kernel span {span} exceeds padded input length {t_pad}")
    out_t = (t_pad - span) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if (left or right) else x.data
    col = _frame_view(xp, k, stride, dilation, out_t)
    if groups == 1:
        out = _einsum("oik,bikt->bot", weight.data, col)
    else:
        colg = col.reshape(batch, groups, c_in // groups, k, out_t)
        wg = weight.data.reshape(groups, c_out // groups, c_in // groups, k)
        out = _einsum("goik,bgikt->bgot", wg, colg)
        out = out.reshape(batch, c_out, out_t)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (c_out,):
            raise ValueError("bias must be (C_out,)")
        out = out + bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        if groups == 1:
            gw = _einsum("bot,bikt->oik", g, col)
            dcol = _einsum("oik,bot->bikt", weight.data, g)
        else:
            colg = col.reshape(batch, groups, c_in // groups, k, out_t)
            gg = g.reshape(batch, groups, c_out // groups, out_t)
            wg = weight.data.reshape(groups, c_out // groups, c_in // groups, k)
            gw = _einsum("bgot,bgikt->goik", gg, colg).reshape(weight.data.shape)
            dcol = _einsum("goik,bgot->bgikt", wg, gg)
            dcol = dcol.reshape(batch, c_in, k, out_t)
        gxp = np.zeros((batch, c_in, t_pad), dtype=g.dtype)
        for j in range(k):
            start = j * dilation
            gxp[:, :, start:start + stride * out_t:stride] += dcol[:, :, j, :]
        gx = gxp[:, :, left:t_pad - right] if (left or right) else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return make_node(out, parents, vjp)


def conv_transpose1d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Adjoint of conv1d: x (B, C_in, T), weight (C_in, C_out, K) -> (B, C_out, (T-1)*stride + K)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1:
        raise ValueError("stride must be positive")
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError("conv_transpose1d expects 3-d input and weight")
    batch, c_in, t = x.data.shape
    c_in_w, c_out, k = weight.data.shape
    if c_in != c_in_w:
        raise ValueError(f"weight expects {c_in_w} input channels, got {c_in}")
    out_t = (t - 1) * stride + k
    col = _einsum("iok,bit->bokt", weight.data, x.data)
    out = np.zeros((batch, c_out, out_t), dtype=col.dtype)
    for j in range(k):
        out[:, :, j:j + stride * t:stride] += col[:, :, j, :]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (c_out,):
            raise ValueError("bias must be (C_out,)")
        out = out + bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gcol = _frame_view(np.ascontiguousarray(g), k, stride, 1, t)  # (B, C_out, K, T)
        gx = _einsum("iok,bokt->bit", weight.data, gcol)
        gw = _einsum("bit,bokt->iok", x.data, gcol)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return make_node(out, parents, vjp)


# ---------------------------------------------------------------------------
# normalization

def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of (B, C, T).

    Train mode normalizes by batch statistics and updates the running
    buffers in place (running <- (1-momentum)*running + momentum*batch);
    eval mode normalizes by the running buffers. Running variance uses the
    unbiased estimate, normalization the biased one.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 3:
        raise ValueError("batch_norm expects (B, C, T)")
    batch, ch, t = x.data.shape
    if gamma.data.shape != (ch,) or beta.data.shape != (ch,):
        raise ValueError("gamma/beta must be (C,)")

    if training:
        n = batch * t
        if n < 2:
            raise ValueError("train-mode batch_norm needs batch*time > 1")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[:, None]) * inv_std[:, None]
    out = gamma.data[:, None] * xhat + beta.data[:, None]

    def vjp(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        gs = gamma.data[:, None] * inv_std[:, None]
        if training:
            m = batch * t
            gx = gs * (g - g.mean(axis=(0, 2), keepdims=True)
                       - xhat * (g * xhat).sum(axis=(0, 2), keepdims=True) / m)
        else:
            gx = gs * g
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# resolution changes (time axis of (B, C, T))

def downsample_decimate(x) -> Tensor:
    """Keep even-indexed timesteps."""
    x = as_tensor(x)
    t = x.data.shape[-1]
    if t < 2:
        raise ValueError("decimation needs time >= 2")
    out = np.ascontiguousarray(x.data[..., ::2])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., ::2] = g
        return (gx,)

    return make_node(out, (x,), vjp)


def upsample_linear(x) -> Tensor:
    """Double the time axis: midpoints between neighbours, final sample repeated."""
    x = as_tensor(x)
    t = x.data.shape[-1]
    if t < 1:
        raise ValueError("empty time axis")
    out_shape = x.data.shape[:-1] + (2 * t,)
    out = np.empty(out_shape, dtype=x.data.dtype)
    out[..., 0::2] = x.data
    if t > 1:
        out[..., 1:-1:2] = 0.5 * (x.data[..., :-1] + x.data[..., 1:])
    out[..., -1] = x.data[..., -1]

    def vjp(g):
        gx = np.ascontiguousarray(g[..., 0::2])
        godd = g[..., 1::2]
        if t > 1:
            gx[..., :-1] += 0.5 * godd[..., :-1]
            gx[..., 1:] += 0.5 * godd[..., :-1]
        gx[..., -1] += godd[..., -1]
        return (gx,)

    return make_node(out, (x,), vjp)


def swap_time_channels(x) -> Tensor:
    """(B, C, T) <-> (B, T, C)."""
    x = as_tensor(x)
    out = np.ascontiguousarray(np.swapaxes(x.data, 1, 2))

    def vjp(g):
        return (np.ascontiguousarray(np.swapaxes(g, 1, 2)),)

    return make_node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# recurrent

def bilstm(x, params, hidden_size: int) -> Tensor:
    """Bidirectional LSTM layer.

    x (B, T, F); params = ((wx_f, wh_f, b_f), (wx_b, wh_b, b_b)) with
    wx (F, 4H), wh (H, 4H), b (4H,); gate order input|forget|output|cell
    (the three sigmoid gates first, then the tanh candidate). Both
    directions start from zero states; outputs are concatenated per
    timestep to (B, T, 2H).
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError("bilstm expects (B, T, F)")
    (fwd, bwd) = params
    fwd = tuple(as_tensor(p) for p in fwd)
    bwd = tuple(as_tensor(p) for p in bwd)
    h = hidden_size
    for wx, wh, b in (fwd, bwd):
        if wx.data.shape != (x.data.shape[2], 4 * h):
            raise ValueError(f"wx shape {wx.data.shape} does not match features "
                             f"{x.data.shape[2]} and hidden {h}")
        if wh.data.shape != (h, 4 * h) or b.data.shape != (4 * h,):
            raise ValueError("bad recurrent parameter shapes")

    out_f, cache_f = _lstm_forward(x.data, *(p.data for p in fwd), h)
    out_b_rev, cache_b = _lstm_forward(x.data[:, ::-1], *(p.data for p in bwd), h)
    out = np.concatenate([out_f, out_b_rev[:, ::-1]], axis=2)

    def vjp(g):
        g_f = np.ascontiguousarray(g[:, :, :h])
        g_b = np.ascontiguousarray(g[:, ::-1, h:])
        gx_f, gwx_f, gwh_f, gb_f = _lstm_backward(g_f, cache_f)
        gx_b_rev, gwx_b, gwh_b, gb_b = _lstm_backward(g_b, cache_b)
        gx = gx_f + gx_b_rev[:, ::-1]
        return gx, gwx_f, gwh_f, gb_f, gwx_b, gwh_b, gb_b

    return make_node(out, (x,) + fwd + bwd, vjp)


def _lstm_forward(x: np.ndarray, wx: np.ndarray, wh: np.ndarray, b: np.ndarray,
                  h_size: int):
    batch, t_len, _ = x.shape
    h3 = 3 * h_size
    h = np.zeros((batch, h_size), dtype=x.dtype)
    c = np.zeros((batch, h_size), dtype=x.dtype)
    xw = x @ wx + b  # (B, T, 4H), input projections for every step at once
    gates = np.empty((batch, t_len, 4 * h_size), dtype=x.dtype)
    cells = np.empty((batch, t_len, h_size), dtype=x.dtype)
    tanc = np.empty((batch, t_len, h_size), dtype=x.dtype)
    hs = np.empty((batch, t_len, h_size), dtype=x.dtype)
    with np.errstate(over="ignore"):  # saturated gates map to exact 0/1
        for t in range(t_len):
            z = xw[:, t] + h @ wh
            sig = 1.0 / (1.0 + np.exp(-z[:, :h3]))  # input|forget|output
            g = np.tanh(z[:, h3:])
            c = sig[:, h_size:2 * h_size] * c + sig[:, :h_size] * g
            tc = np.tanh(c)
            h = sig[:, 2 * h_size:h3] * tc
            gates[:, t, :h3] = sig
            gates[:, t, h3:] = g
            cells[:, t] = c
            tanc[:, t] = tc
            hs[:, t] = h
    cache = (x, wx, wh, gates, cells, tanc, hs, h_size)
    return hs, cache


def _lstm_backward(gh_all: np.ndarray, cache):
    x, wx, wh, gates, cells, tanc, hs, h_size = cache
    batch, t_len, _ = x.shape
    h3 = 3 * h_size
    dz_all = np.empty((batch, t_len, 4 * h_size), dtype=x.dtype)
    dh_next = np.zeros((batch, h_size), dtype=x.dtype)
    dc_next = np.zeros((batch, h_size), dtype=x.dtype)
    zeros = np.zeros((batch, h_size), dtype=x.dtype)
    gwh = np.zeros_like(wh)
    wh_t = wh.T.copy()
    for t in range(t_len - 1, -1, -1):
        gate = gates[:, t]
        i = gate[:, :h_size]
        f = gate[:, h_size:2 * h_size]
        o = gate[:, 2 * h_size:h3]
        g = gate[:, h3:]
        tc = tanc[:, t]
        c_prev = cells[:, t - 1] if t > 0 else zeros
        h_prev = hs[:, t - 1] if t > 0 else zeros
        dh = gh_all[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dc_next = dc * f
        dz = dz_all[:, t]
        dz[:, :h_size] = (dc * g) * i * (1.0 - i)
        dz[:, h_size:2 * h_size] = (dc * c_prev) * f * (1.0 - f)
        dz[:, 2 * h_size:h3] = do * o * (1.0 - o)
        dz[:, h3:] = (dc * i) * (1.0 - g * g)
        gwh += h_prev.T @ dz
        dh_next = dz @ wh_t
    x2 = x.reshape(-1, x.shape[2])
    dz2 = dz_all.reshape(-1, 4 * h_size)
    gwx = x2.T @ dz2
    gb = dz2.sum(axis=0)
    gx = (dz_all @ wx.T).reshape(x.shape)
    return gx, gwx, gwh, gb
