"""Attention-based end-to-end keyword detector and the Deep KWS baseline.

Parameters live in a flat ``{name: array}`` dict. Names:

* ``conv.kernel``, ``conv.bias``          CRNN front end
* ``dnn{i}.W``, ``dnn{i}.b``              DNN baseline hidden layers
* ``rnn{i}.Wx``, ``rnn{i}.Wh``, ``rnn{i}.b``  recurrent stack
* ``proj.W``, ``proj.b``                  width-64 ReLU layer after GRU stacks
* ``att.W``, ``att.b``, ``att.v``         soft attention
* ``out.W``, ``out.b``                    output linear map before softmax
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import layers as L
from .layers import ConvSpec
from .numerics import DTYPE, Params, normalized_init, uniform_init, zeros

KINDS = ("attention_e2e", "deep_kws")
ENCODERS = ("dnn", "lstm", "gru", "crnn")
ATTENTIONS = ("none", "average", "soft")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "attention_e2e"
    encoder: str = "gru"
    layers: int = 2
    nodes: int = 64
    attention: str = "soft"
    input_dim: int = 40
    num_classes: int = 2
    conv: Optional[ConvSpec] = None
    context_left: int = 15
    context_right: int = 5
    gru_projection: Optional[bool] = None
    projection_width: int = 64
    recurrent: str = "gru"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.attention not in ATTENTIONS:
            raise ValueError(f"unknown attention {self.attention!r}")
        if self.layers < 1 or self.nodes < 1 or self.input_dim < 1:
            raise ValueError("layers, nodes and input_dim must be positive")
        if self.kind == "attention_e2e":
            if self.num_classes != 2:
                raise ValueError("attention_e2e models have exactly 2 classes")
            if self.attention == "none":
                raise ValueError("attention_e2e needs average or soft attention")
            if self.encoder == "dnn":
                raise ValueError("the DNN encoder is only used by the deep_kws baseline")
        else:
            if self.attention != "none":
                raise ValueError("deep_kws models do not use attention")
            if self.num_classes < 2:
                raise ValueError("deep_kws needs at least one syllable plus filler")
        if self.encoder == "crnn":
            if self.conv is None:
                raise ValueError("crnn encoder requires a ConvSpec")
            if self.recurrent != "gru":
                raise ValueError("crnn recurrent part must be GRU")
        elif self.conv is not None:
            raise ValueError("conv spec only valid for the crnn encoder")
        if self.gru_projection and self.encoder not in ("gru", "crnn"):
            raise ValueError("gru_projection only applies to GRU-based encoders")
        if self.gru_projection is None:
            # resolve the default so configs compare equal after a round-trip
            object.__setattr__(self, "gru_projection", self.cell == "gru")

    @property
    def cell(self) -> Optional[str]:
        if self.encoder == "dnn":
            return None
        return "gru" if self.encoder in ("gru", "crnn") else "lstm"

    @property
    def has_projection(self) -> bool:
        if self.gru_projection is None:
            return self.cell == "gru"
        return bool(self.gru_projection)

    @property
    def rnn_input_dim(self) -> int:
        if self.encoder == "crnn":
            return self.conv.out_bins(self.input_dim) * self.conv.out_channels
        return self.input_dim

    @property
    def output_dim(self) -> int:
        """Width ``d`` of the encoder output ``h_t``."""
        if self.encoder != "dnn" and self.has_projection:
            return self.projection_width
        return self.nodes

    @property
    def num_recurrent_layers(self) -> int:
        return 0 if self.encoder == "dnn" else self.layers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        if d.get("conv") is not None and not isinstance(d["conv"], ConvSpec):
            d["conv"] = ConvSpec(**d["conv"])
        return cls(**d)


def e2e_config(encoder: str, layers: int, nodes: int, attention: str = "soft", channels: int = 0) -> ModelConfig:
    """Shorthand for the attention-model rows of the experiment tables."""
    conv = ConvSpec(out_channels=channels) if encoder == "crnn" else None
    return ModelConfig(kind="attention_e2e", encoder=encoder, layers=layers, nodes=nodes, attention=attention, conv=conv)


def dnn_baseline_config(layers: int = 3, nodes: int = 64, syllables: int = 4) -> ModelConfig:
    return ModelConfig(kind="deep_kws", encoder="dnn", layers=layers, nodes=nodes, attention="none",
                       num_classes=syllables + 1)


# -- parameter layout -------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {}
    if cfg.encoder == "crnn":
        c = cfg.conv
        shapes["conv.kernel"] = (c.time_kernel, c.freq_kernel, 1, c.out_channels)
        shapes["conv.bias"] = (c.out_channels,)
    if cfg.encoder == "dnn":
        width = cfg.input_dim * (cfg.context_left + 1 + cfg.context_right)
        for i in range(cfg.layers):
            shapes[f"dnn{i}.W"] = (width, cfg.nodes)
            shapes[f"dnn{i}.b"] = (cfg.nodes,)
            width = cfg.nodes
    else:
        gates = 3 if cfg.cell == "gru" else 4
        width = cfg.rnn_input_dim
        for i in range(cfg.layers):
            shapes[f"rnn{i}.Wx"] = (width, gates * cfg.nodes)
            shapes[f"rnn{i}.Wh"] = (cfg.nodes, gates * cfg.nodes)
            shapes[f"rnn{i}.b"] = (gates * cfg.nodes,)
            width = cfg.nodes
        if cfg.has_projection:
            shapes["proj.W"] = (cfg.nodes, cfg.projection_width)
            shapes["proj.b"] = (cfg.projection_width,)
    d = cfg.output_dim
    if cfg.attention == "soft":
        shapes["att.W"] = (d, d)
        shapes["att.b"] = (d,)
        shapes["att.v"] = (d,)
    shapes["out.W"] = (d, cfg.num_classes)
    shapes["out.b"] = (cfg.num_classes,)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count (independent of :func:`param_shapes`)."""
    n = cfg.nodes
    total = 0
    if cfg.encoder == "crnn":
        total += cfg.conv.param_count(1)
    if cfg.encoder == "dnn":
        width = cfg.input_dim * (cfg.context_left + 1 + cfg.context_right)
        for _ in range(cfg.layers):
            total += width * n + n
            width = n
    else:
        gates = 3 if cfg.cell == "gru" else 4
        width = cfg.rnn_input_dim
        for _ in range(cfg.layers):
            total += gates * (n * (width + n) + n)
            width = n
        if cfg.has_projection:
            total += n * cfg.projection_width + cfg.projection_width
    d = cfg.output_dim
    if cfg.attention == "soft":
        total += d * d + 2 * d
    total += d * cfg.num_classes + cfg.num_classes
    return total


def build_model(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    """Glorot-uniform weights, zero biases. Gate blocks are initialised
    separately with their own (in, n) fan. Draw order follows
    :func:`param_shapes`, so a seed fixes the whole layout."""
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[1]
        if leaf in ("b", "bias"):
            params[name] = zeros(*shape)
        elif leaf == "kernel":
            kt, kf, cin, cout = shape
            params[name] = uniform_init(shape, kt * kf * cin, kt * kf * cout, rng)
        elif leaf == "v":
            params[name] = uniform_init(shape, shape[0], 1, rng)
        elif leaf in ("Wx", "Wh"):
            rows, cols = shape
            gates = 3 if cfg.cell == "gru" else 4
            blocks = [normalized_init(rows, cols // gates, rng) for _ in range(gates)]
            params[name] = np.concatenate(blocks, axis=1)
        else:
            params[name] = normalized_init(*shape, rng)
    return params


def _rnn_params(params: Params, i: int) -> Dict[str, np.ndarray]:
    return {"Wx": params[f"rnn{i}.Wx"], "Wh": params[f"rnn{i}.Wh"], "b": params[f"rnn{i}.b"]}


def _check_params(params: Params, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    if set(shapes) != set(params):
        raise ValueError(f"parameter names do not match config: {sorted(set(shapes) ^ set(params))}")
    for k, s in shapes.items():
        if tuple(params[k].shape) != s:
            raise ValueError(f"{k}: shape {params[k].shape} does not match config {s}")


# -- encoder ----------------------------------------------------------------

def stack_context(frames: np.ndarray, left: int = 15, right: int = 5) -> np.ndarray:
    """Concatenate each frame with ``left`` past and ``right`` future frames,
    replicating edge frames at the boundaries. ``(..., T, D) -> (..., T, (left+1+right)*D)``."""
    T = frames.shape[-2]
    idx = np.arange(T)[:, None] + np.arange(-left, right + 1)[None, :]
    idx = np.clip(idx, 0, T - 1)
    stacked = frames[..., idx, :]
    return stacked.reshape(*frames.shape[:-2], T, -1)


def _as_batch(x: np.ndarray):
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected (T, D) or (B, T, D) input, got shape {x.shape}")
    return x, False


def _encoder_forward(params: Params, cfg: ModelConfig, x: np.ndarray):
    if x.shape[-1] != cfg.input_dim:
        raise ValueError(f"input width {x.shape[-1]} != {cfg.input_dim}")
    caches = []
    z = x
    if cfg.encoder == "crnn":
        B, T, F = z.shape
        y, cc = L.conv2d_forward(z[..., None], params["conv.kernel"], params["conv.bias"], cfg.conv)
        y, mask = L.relu_forward(y)
        caches.append(("conv", (cc, mask, y.shape)))
        z = y.reshape(B, T, -1)
    if cfg.encoder == "dnn":
        z = stack_context(z, cfg.context_left, cfg.context_right)
        for i in range(cfg.layers):
            y, fc = L.fc_forward(z, params[f"dnn{i}.W"], params[f"dnn{i}.b"])
            z, mask = L.relu_forward(y)
            caches.append((f"dnn{i}", (fc, mask)))
    else:
        forward = L.gru_forward if cfg.cell == "gru" else L.lstm_forward
        for i in range(cfg.layers):
            z, rc = forward(z, _rnn_params(params, i))
            caches.append((f"rnn{i}", rc))
        if cfg.has_projection:
            y, fc = L.fc_forward(z, params["proj.W"], params["proj.b"])
            z, mask = L.relu_forward(y)
            caches.append(("proj", (fc, mask)))
    return z, caches


def _encoder_backward(dh: np.ndarray, caches, cfg: ModelConfig) -> Params:
    grads: Params = {}
    dz = dh
    backward = L.gru_backward if cfg.cell == "gru" else L.lstm_backward
    for name, cache in reversed(caches):
        if name == "proj" or name.startswith("dnn"):
            fc, mask = cache
            dz, g = L.fc_backward(L.relu_backward(dz, mask), fc)
            grads[f"{name}.W"], grads[f"{name}.b"] = g["W"], g["b"]
        elif name.startswith("rnn"):
            dz, g = backward(dz, cache)
            for k, v in g.items():
                grads[f"{name}.{k}"] = v
        elif name == "conv":
            cc, mask, shape = cache
            dy = L.relu_backward(dz.reshape(shape), mask)
            _, g = L.conv2d_backward(dy, cc)
            grads["conv.kernel"], grads["conv.bias"] = g["kernel"], g["bias"]
    return grads


def encoder_forward(params: Params, cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    """Left-to-right encoder pass from zero state; ``(T, 40) -> (T, d)`` (or batched)."""
    xb, single = _as_batch(x)
    h, _ = _encoder_forward(params, cfg, xb)
    return h[0] if single else h


# -- attention --------------------------------------------------------------

def attend_average(h: np.ndarray) -> np.ndarray:
    """Uniform weights ``1/T``, contracted exactly like :func:`attend_soft` so
    that soft attention with ``v = 0`` reproduces this result bit for bit."""
    T = h.shape[-2]
    if T < 1:
        raise ValueError("need at least one frame")
    alpha = np.full(h.shape[:-1], 1.0 / T, dtype=h.dtype)
    return np.einsum("...t,...td->...d", alpha, h)


def attention_scores(h: np.ndarray, W: np.ndarray, b: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Scalar scores ``e_t = v . tanh(W h_t + b)``; shape ``h.shape[:-1]``."""
    if h.shape[-1] != W.shape[0]:
        raise ValueError(f"attention width mismatch: h has {h.shape[-1]}, W expects {W.shape[0]}")
    # row-wise reduction rather than a matrix-vector product: BLAS gemv rounds
    # differently per row, which would break equal scores for equal frames
    return (np.tanh(h @ W + b) * v).sum(axis=-1)


def attend_soft(h: np.ndarray, W: np.ndarray, b: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Soft attention pooling. Returns ``(c, alpha)`` where ``alpha`` sums to one over time."""
    if h.shape[-2] < 1:
        raise ValueError("need at least one frame")
    alpha = L.softmax(attention_scores(h, W, b, v), axis=-1)
    c = np.einsum("...t,...td->...d", alpha, h)
    return c, alpha


def _attend_soft_backward(dc: np.ndarray, h: np.ndarray, W, b, v):
    u = np.tanh(h @ W + b)
    alpha = L.softmax((u * v).sum(axis=-1), axis=-1)
    dalpha = np.einsum("bd,btd->bt", dc, h)
    de = alpha * (dalpha - np.sum(alpha * dalpha, axis=-1, keepdims=True))
    dv = np.einsum("bt,btd->d", de, u)
    dpre = de[..., None] * v * (1 - u * u)
    d = h.shape[-1]
    dW = h.reshape(-1, d).T @ dpre.reshape(-1, d)
    db = dpre.sum(axis=(0, 1))
    dh = alpha[..., None] * dc[:, None, :] + dpre @ W.T
    return dh, {"att.W": dW, "att.b": db, "att.v": dv}


def pool(params: Params, cfg: ModelConfig, h: np.ndarray) -> np.ndarray:
    if cfg.attention == "average":
        return attend_average(h)
    c, _ = attend_soft(h, params["att.W"], params["att.b"], params["att.v"])
    return c


# -- end-to-end -------------------------------------------------------------

def logits_forward(params: Params, cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    """Window logits ``(B, 2)`` for attention models, frame logits ``(B, T, K)`` for the baseline."""
    h, _ = _encoder_forward(params, cfg, x)
    if cfg.kind == "attention_e2e":
        h = pool(params, cfg, h)
    return h @ params["out.W"] + params["out.b"]


def keyword_prob(logits: np.ndarray) -> np.ndarray:
    """``p(y=1)`` from ``(..., 2)`` logits, computed in float64 so confident
    scores do not collapse onto 1.0 and tie at the top of the ROC."""
    return L.softmax(np.asarray(logits, dtype=np.float64))[..., 1]


def detect_score(params: Params, cfg: ModelConfig, window: np.ndarray) -> float:
    """Keyword probability ``p(y=1)`` for one ``(T, 40)`` window."""
    if cfg.kind != "attention_e2e":
        raise ValueError("detect_score needs an attention_e2e model")
    xb, _ = _as_batch(window)
    if xb.shape[1] < 1:
        raise ValueError("window must contain at least one frame")
    return float(keyword_prob(logits_forward(params, cfg, xb))[0])


def loss_and_grads(params: Params, cfg: ModelConfig, x: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and gradients for every parameter.

    ``x`` is ``(B, T, 40)``. ``labels`` is ``(B,)`` for attention models and
    ``(B, T)`` frame targets for the baseline. Returns ``(loss, grads, logits)``.
    """
    h, caches = _encoder_forward(params, cfg, x)
    if cfg.kind == "attention_e2e":
        c = pool(params, cfg, h)
        logits, fc = L.fc_forward(c, params["out.W"], params["out.b"])
        loss, dlogits = L.softmax_xent(logits, labels)
        dc, g_out = L.fc_backward(dlogits, fc)
        if cfg.attention == "average":
            T = h.shape[1]
            dh = np.broadcast_to(dc[:, None, :] / T, h.shape).astype(h.dtype)
            g_att = {}
        else:
            dh, g_att = _attend_soft_backward(dc, h, params["att.W"], params["att.b"], params["att.v"])
    else:
        logits, fc = L.fc_forward(h, params["out.W"], params["out.b"])
        loss, dlogits = L.softmax_xent(logits, labels)
        dh, g_out = L.fc_backward(dlogits, fc)
        g_att = {}
    grads = _encoder_backward(dh, caches, cfg)
    grads.update(g_att)
    grads["out.W"], grads["out.b"] = g_out["W"], g_out["b"]
    grads = {k: grads[k].astype(params[k].dtype, copy=False) for k in params}
    return loss, grads, logits


def window_scores(params: Params, cfg: ModelConfig, frames: np.ndarray, window: int = 100) -> np.ndarray:
    """Keyword probability at every frame ``t >= window - 1`` of a stream, with the
    encoder run continuously from frame 0 and attention over the trailing
    ``window`` encoder outputs. Returns ``T - window + 1`` scores (empty if the
    stream is shorter than the window)."""
    h = encoder_forward(params, cfg, frames)
    return _windowed_head(params, cfg, h, window)


def _windowed_head(params: Params, cfg: ModelConfig, h: np.ndarray, window: int) -> np.ndarray:
    T, d = h.shape
    if T < window:
        return np.zeros(0, dtype=h.dtype)
    hw = sliding_window_view(h, window, axis=0)  # (N, d, W)
    if cfg.attention == "average":
        c = hw.sum(axis=-1) / window
    else:
        e = attention_scores(h, params["att.W"], params["att.b"], params["att.v"])
        ew = sliding_window_view(e, window)
        alpha = L.softmax(ew, axis=-1)
        c = np.einsum("nw,ndw->nd", alpha, hw)
    return keyword_prob(c @ params["out.W"] + params["out.b"])


# -- Deep KWS baseline ------------------------------------------------------

def deep_kws_posteriors(params: Params, cfg: ModelConfig, frames: np.ndarray) -> np.ndarray:
    """Per-frame class posteriors ``(T, K)``; class 0 is filler."""
    if cfg.kind != "deep_kws":
        raise ValueError("deep_kws_posteriors needs a deep_kws model")
    xb, single = _as_batch(frames)
    post = L.softmax(logits_forward(params, cfg, xb))
    return post[0] if single else post


def smooth_posteriors(p: np.ndarray, w_smooth: int = 20) -> np.ndarray:
    """Trailing mean over the last ``w_smooth`` frames (fewer at the start)."""
    if w_smooth < 1:
        raise ValueError("w_smooth must be >= 1")
    p = np.asarray(p, dtype=np.float64)
    csum = np.cumsum(p, axis=0)
    out = csum.copy()
    out[w_smooth:] = csum[w_smooth:] - csum[:-w_smooth]
    counts = np.minimum(np.arange(1, p.shape[0] + 1), w_smooth)
    return out / counts[:, None]


def deep_kws_confidence(p_smooth: np.ndarray, w_max: int = 100) -> np.ndarray:
    """Per-frame confidence: geometric mean over the non-filler classes of the
    maximum smoothed posterior within the trailing ``w_max`` frames."""
    if w_max < 1:
        raise ValueError("w_max must be >= 1")
    ps = np.asarray(p_smooth, dtype=np.float64)[:, 1:]
    run_max = _trailing_max(ps, w_max)
    return np.prod(run_max, axis=1) ** (1.0 / ps.shape[1])


def _trailing_max(x: np.ndarray, w: int) -> np.ndarray:
    out = np.maximum.accumulate(x, axis=0)
    if x.shape[0] >= w:
        out[w - 1:] = sliding_window_view(x, w, axis=0).max(axis=-1)
    return out


def frame_targets(n_frames: int, span: Optional[Tuple[int, int]], alignment=None, syllables: int = 4) -> np.ndarray:
    """Per-frame baseline targets: 0 for filler, ``1..syllables`` inside the keyword.

    ``alignment`` is a list of ``(start, end)`` frame ranges, one per syllable;
    without it the keyword span is split uniformly.
    """
    y = np.zeros(n_frames, dtype=np.int64)
    if span is None:
        return y
    if alignment is None:
        s, e = span
        edges = np.linspace(s, e, syllables + 1).round().astype(int)
        alignment = list(zip(edges[:-1], edges[1:]))
    for k, (s, e) in enumerate(alignment, start=1):
        y[max(s, 0):min(e, n_frames)] = k
    return y


# -- checkpoint -------------------------------------------------------------

CKPT_MAGIC = b"KWSC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: Params, cfg: ModelConfig, path) -> None:
    """``KWSC`` | version u32 | config length u32 | UTF-8 JSON config | tensors.

    Each tensor: name length u32, name bytes, rank u32, dims u32 x rank, then
    float32 little-endian data. All integers little-endian.
    """
    _check_params(params, cfg)
    cfg_bytes = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(cfg_bytes)))
        fh.write(cfg_bytes)
        for name in param_shapes(cfg):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> Tuple[Params, ModelConfig]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic: not a KWSC checkpoint")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, cfg_len = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        cfg = ModelConfig.from_dict(json.loads(take(cfg_len).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad config record: {exc}") from exc
    if expect is not None and param_shapes(expect) != param_shapes(cfg):
        raise CheckpointError("checkpoint config is incompatible with the requested model")
    shapes = param_shapes(cfg)
    params: Params = {}
    while pos < len(data):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        if name not in shapes:
            raise CheckpointError(f"unknown tensor name {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        if tuple(dims) != shapes[name]:
            raise CheckpointError(f"tensor {name} has shape {dims}, config says {shapes[name]}")
        count = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(DTYPE)
    missing = set(shapes) - set(params)
    if missing:
        raise CheckpointError(f"truncated checkpoint: missing {sorted(missing)}")
    return params, cfg
