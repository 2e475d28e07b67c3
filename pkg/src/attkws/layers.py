"""Differentiable layers with hand-written backward passes.

Every layer works on batched arrays, feature dimension last:

* fully connected: ``x (..., in) @ W (in, out) + b``
* LSTM / GRU: sequences ``(B, T, in)``; weights split into an input block
  ``Wx (in, G*n)``, a recurrent block ``Wh (n, G*n)`` and one bias ``b (G*n)``
  per gate. LSTM gate order is ``[i, f, g, o]``, GRU order is ``[z, r, h~]``.
* conv2d: ``(B, T, F, C_in)`` with kernel ``(kt, kf, C_in, C_out)``; causal in
  time, same-padded and strided in frequency.

``*_forward`` returns ``(output, cache)`` and ``*_backward(dout, cache)``
returns the input gradient plus a dict of parameter gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / np.sum(ez, axis=axis, keepdims=True)


def _check_width(x: np.ndarray, expected: int, what: str) -> None:
    if x.shape[-1] != expected:
        raise ValueError(f"{what}: expected last dimension {expected}, got {x.shape[-1]}")


# -- fully connected / relu -------------------------------------------------

def fc_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    _check_width(x, W.shape[0], "fc input")
    return x @ W + b, (x, W)


def fc_backward(dy: np.ndarray, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, {"W": x2.T @ dy2, "b": dy2.sum(axis=0)}


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


# -- LSTM -------------------------------------------------------------------

def lstm_cell(x: np.ndarray, h: np.ndarray, c: np.ndarray, p: Dict[str, np.ndarray]):
    """One LSTM step without peepholes: ``c' = f*c + i*g``, ``h' = o*tanh(c')``."""
    n = h.shape[-1]
    _check_width(x, p["Wx"].shape[0], "lstm input")
    if p["Wh"].shape[0] != n or c.shape[-1] != n:
        raise ValueError("lstm state width does not match parameters")
    a = x @ p["Wx"] + h @ p["Wh"] + p["b"]
    i = sigmoid(a[..., :n])
    f = sigmoid(a[..., n:2 * n])
    g = np.tanh(a[..., 2 * n:3 * n])
    o = sigmoid(a[..., 3 * n:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def lstm_forward(x: np.ndarray, p: Dict[str, np.ndarray], h0=None, c0=None):
    B, T, _ = x.shape
    n = p["Wh"].shape[0]
    _check_width(x, p["Wx"].shape[0], "lstm input")
    h = np.zeros((B, n), x.dtype) if h0 is None else h0
    c = np.zeros((B, n), x.dtype) if c0 is None else c0
    # input projection for all frames at once; recurrence stays sequential
    ax = x @ p["Wx"] + p["b"]
    hs = np.empty((B, T, n), x.dtype)
    cs = np.empty((B, T, n), x.dtype)
    gates = np.empty((B, T, 4 * n), x.dtype)
    h_prev = np.empty((B, T, n), x.dtype)
    c_prev = np.empty((B, T, n), x.dtype)
    for t in range(T):
        h_prev[:, t] = h
        c_prev[:, t] = c
        a = ax[:, t] + h @ p["Wh"]
        i = sigmoid(a[:, :n])
        f = sigmoid(a[:, n:2 * n])
        g = np.tanh(a[:, 2 * n:3 * n])
        o = sigmoid(a[:, 3 * n:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t] = np.concatenate([i, f, g, o], axis=1)
        hs[:, t] = h
        cs[:, t] = c
    return hs, (x, p, gates, hs, cs, h_prev, c_prev)


def lstm_backward(dhs: np.ndarray, cache):
    x, p, gates, hs, cs, h_prev, c_prev = cache
    B, T, n = hs.shape
    Wh = p["Wh"]
    da_all = np.empty_like(gates)
    dh_next = np.zeros((B, n), dhs.dtype)
    dc_next = np.zeros((B, n), dhs.dtype)
    for t in reversed(range(T)):
        i, f, g, o = (gates[:, t, k * n:(k + 1) * n] for k in range(4))
        tc = np.tanh(cs[:, t])
        dh = dhs[:, t] + dh_next
        do = dh * tc
        dc = dh * o * (1 - tc * tc) + dc_next
        di = dc * g
        dg = dc * i
        df = dc * c_prev[:, t]
        dc_next = dc * f
        da = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1)
        da_all[:, t] = da
        dh_next = da @ Wh.T
    da2 = da_all.reshape(B * T, -1)
    grads = {
        "Wx": x.reshape(B * T, -1).T @ da2,
        "Wh": h_prev.reshape(B * T, -1).T @ da2,
        "b": da2.sum(axis=0),
    }
    dx = da_all @ p["Wx"].T
    return dx, grads


# -- GRU --------------------------------------------------------------------

def gru_cell(x: np.ndarray, h: np.ndarray, p: Dict[str, np.ndarray]) -> np.ndarray:
    """One GRU step; the reset gate multiplies ``h`` before the recurrent matmul."""
    n = h.shape[-1]
    _check_width(x, p["Wx"].shape[0], "gru input")
    if p["Wh"].shape[0] != n:
        raise ValueError("gru state width does not match parameters")
    ax = x @ p["Wx"] + p["b"]
    Wh = p["Wh"]
    zr = sigmoid(ax[..., :2 * n] + h @ Wh[:, :2 * n])
    z, r = zr[..., :n], zr[..., n:]
    cand = np.tanh(ax[..., 2 * n:] + (r * h) @ Wh[:, 2 * n:])
    return (1 - z) * h + z * cand


def gru_forward(x: np.ndarray, p: Dict[str, np.ndarray], h0=None):
    B, T, _ = x.shape
    n = p["Wh"].shape[0]
    _check_width(x, p["Wx"].shape[0], "gru input")
    Wh = p["Wh"]
    Wh_zr, Wh_c = Wh[:, :2 * n], Wh[:, 2 * n:]
    h = np.zeros((B, n), x.dtype) if h0 is None else h0
    ax = x @ p["Wx"] + p["b"]
    hs = np.empty((B, T, n), x.dtype)
    gates = np.empty((B, T, 3 * n), x.dtype)
    h_prev = np.empty((B, T, n), x.dtype)
    for t in range(T):
        h_prev[:, t] = h
        zr = sigmoid(ax[:, t, :2 * n] + h @ Wh_zr)
        z, r = zr[:, :n], zr[:, n:]
        cand = np.tanh(ax[:, t, 2 * n:] + (r * h) @ Wh_c)
        h = (1 - z) * h + z * cand
        gates[:, t, :2 * n] = zr
        gates[:, t, 2 * n:] = cand
        hs[:, t] = h
    return hs, (x, p, gates, h_prev)


def gru_backward(dhs: np.ndarray, cache):
    x, p, gates, h_prev = cache
    B, T, n = dhs.shape
    Wh = p["Wh"]
    Wh_zr_T, Wh_c_T = Wh[:, :2 * n].T, Wh[:, 2 * n:].T
    da_all = np.empty_like(gates)
    drh_all = np.empty((B, T, n), dhs.dtype)
    dh_next = np.zeros((B, n), dhs.dtype)
    for t in reversed(range(T)):
        z = gates[:, t, :n]
        r = gates[:, t, n:2 * n]
        cand = gates[:, t, 2 * n:]
        hp = h_prev[:, t]
        dh = dhs[:, t] + dh_next
        dz = dh * (cand - hp)
        dcand = dh * z
        da_c = dcand * (1 - cand * cand)
        drh = da_c @ Wh_c_T
        dr = drh * hp
        da_z = dz * z * (1 - z)
        da_r = dr * r * (1 - r)
        da_zr = np.concatenate([da_z, da_r], axis=1)
        dh_next = dh * (1 - z) + drh * r + da_zr @ Wh_zr_T
        da_all[:, t, :2 * n] = da_zr
        da_all[:, t, 2 * n:] = da_c
        drh_all[:, t] = r * hp
    da2 = da_all.reshape(B * T, -1)
    hp2 = h_prev.reshape(B * T, n)
    rh2 = drh_all.reshape(B * T, n)
    dWh = np.empty_like(Wh)
    dWh[:, :2 * n] = hp2.T @ da2[:, :2 * n]
    dWh[:, 2 * n:] = rh2.T @ da2[:, 2 * n:]
    grads = {"Wx": x.reshape(B * T, -1).T @ da2, "Wh": dWh, "b": da2.sum(axis=0)}
    return da_all @ p["Wx"].T, grads


# -- conv2d -----------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Causal-in-time, same-padded-in-frequency convolution geometry."""

    out_channels: int = 16
    time_kernel: int = 20
    freq_kernel: int = 5
    time_stride: int = 1
    freq_stride: int = 2

    def __post_init__(self):
        if self.out_channels < 1 or self.time_kernel < 1 or self.freq_kernel < 1:
            raise ValueError("conv dimensions must be positive")
        if self.time_stride != 1:
            raise ValueError("only time_stride=1 is supported (streaming needs one output per input frame)")
        if self.freq_stride < 1:
            raise ValueError("freq_stride must be >= 1")
        if self.freq_kernel % 2 == 0:
            raise ValueError("freq_kernel must be odd for symmetric same-padding")

    @property
    def freq_pad(self) -> int:
        return (self.freq_kernel - 1) // 2

    def out_bins(self, in_bins: int) -> int:
        return (in_bins + 2 * self.freq_pad - self.freq_kernel) // self.freq_stride + 1

    def param_count(self, in_channels: int = 1) -> int:
        return self.out_channels * (self.time_kernel * self.freq_kernel * in_channels) + self.out_channels


def _conv_pad(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    pf = spec.freq_pad
    return np.pad(x, ((0, 0), (spec.time_kernel - 1, 0), (pf, pf), (0, 0)))


def _conv_patches(xp: np.ndarray, spec: ConvSpec, T: int, F_out: int) -> np.ndarray:
    # (B, T, F_out, C_in, kt, kf) view over the padded input
    win = sliding_window_view(xp, (spec.time_kernel, spec.freq_kernel), axis=(1, 2))
    return win[:, :T, : (F_out - 1) * spec.freq_stride + 1 : spec.freq_stride]


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, spec: ConvSpec):
    """Kernel index ``tau`` along time reads input frame ``t - (kt - 1) + tau``;
    ``tau = kt - 1`` is the current frame. Frequency bin ``j`` is centred on
    input bin ``j * freq_stride``."""
    B, T, F, C = x.shape
    kt, kf, cin, cout = kernel.shape
    if (kt, kf, cout) != (spec.time_kernel, spec.freq_kernel, spec.out_channels) or cin != C:
        raise ValueError(f"kernel shape {kernel.shape} inconsistent with input channels {C} and {spec}")
    F_out = spec.out_bins(F)
    if F_out < 1:
        raise ValueError("kernel larger than padded input")
    xp = _conv_pad(x, spec)
    patches = _conv_patches(xp, spec, T, F_out)
    y = np.einsum("btfcij,ijco->btfo", patches, kernel, optimize=True) + bias
    return y.astype(x.dtype, copy=False), (x.shape, xp, kernel, spec)


def conv2d_backward(dy: np.ndarray, cache):
    x_shape, xp, kernel, spec = cache
    B, T, F, C = x_shape
    F_out = dy.shape[2]
    patches = _conv_patches(xp, spec, T, F_out)
    dK = np.einsum("btfcij,btfo->ijco", patches, dy, optimize=True)
    db = dy.sum(axis=(0, 1, 2))
    dxp = np.zeros_like(xp)
    s = spec.freq_stride
    for i in range(spec.time_kernel):
        for j in range(spec.freq_kernel):
            # contribution of kernel tap (i, j) to every output position
            dxp[:, i:i + T, j:j + (F_out - 1) * s + 1:s, :] += dy @ kernel[i, j].T
    pf = spec.freq_pad
    dx = dxp[:, spec.time_kernel - 1:, pf:pf + F, :]
    return dx, {"kernel": dK, "bias": db}


def conv2d_step(buffer: np.ndarray, kernel: np.ndarray, bias: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Output for the newest frame given the last ``kt`` input frames ``(kt, F, C)``."""
    kt, F, C = buffer.shape
    pf = spec.freq_pad
    bp = np.pad(buffer, ((0, 0), (pf, pf), (0, 0)))
    F_out = spec.out_bins(F)
    win = sliding_window_view(bp, spec.freq_kernel, axis=1)[:, : (F_out - 1) * spec.freq_stride + 1 : spec.freq_stride]
    # win: (kt, F_out, C, kf)
    return np.einsum("tfcj,tjco->fo", win, kernel, optimize=True) + bias


# -- loss -------------------------------------------------------------------

def softmax_xent(logits: np.ndarray, labels):
    """Mean cross-entropy over all leading positions.

    ``logits`` is ``(K,)`` with an integer label, or ``(..., K)`` with an
    integer label array of the leading shape. Returns the mean loss and its
    gradient with respect to ``logits``.
    """
    logits = np.asarray(logits)
    K = logits.shape[-1]
    if K < 2:
        raise ValueError("need at least two classes")
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"label shape {labels.shape} does not match logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError("label out of range")
    flat = logits.reshape(-1, K)
    lab = labels.reshape(-1).astype(np.int64)
    shifted = flat - flat.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    N = flat.shape[0]
    loss = -logp[np.arange(N), lab].mean()
    d = np.exp(logp)
    d[np.arange(N), lab] -= 1
    d /= N
    return loss, d.reshape(logits.shape).astype(logits.dtype, copy=False)
