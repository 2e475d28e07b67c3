"""Frame-synchronous decoder for attention models.

The encoder runs continuously over the stream (never reset between windows).
Each pushed frame costs one cell step per recurrent layer; the encoder output
``h_t`` and its soft-attention score ``e_t`` are cached in ring buffers so
only the softmax over the window and the weighted sum are recomputed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional

import numpy as np

from . import layers as L
from .audio_features import FRAME_HOP, FrontEndConfig, featurize
from .models import (ModelConfig, Params, _check_params, _rnn_params, attention_scores, keyword_prob,
                     load_checkpoint)


@dataclass
class DetectionEvent:
    frame: int
    score: float
    time_s: float


@dataclass
class DecoderState:
    cfg: ModelConfig
    window: int = 100
    h: List[np.ndarray] = field(default_factory=list)
    c: List[np.ndarray] = field(default_factory=list)
    conv_buffer: Optional[np.ndarray] = None
    enc_ring: Optional[np.ndarray] = None
    score_ring: Optional[np.ndarray] = None
    frames_seen: int = 0
    cell_evals: List[int] = field(default_factory=list)

    @property
    def buffered(self) -> int:
        return min(self.frames_seen, self.window)

    def buffered_outputs(self) -> np.ndarray:
        """Encoder outputs in the ring, oldest first."""
        return self._ordered(self.enc_ring)

    def buffered_scores(self) -> np.ndarray:
        return self._ordered(self.score_ring)

    def _ordered(self, ring: np.ndarray) -> np.ndarray:
        n = self.buffered
        if self.frames_seen < self.window:
            return ring[:n]
        head = self.frames_seen % self.window
        return np.concatenate([ring[head:], ring[:head]])


def new_state(cfg: ModelConfig, window: int = 100, dtype=np.float32) -> DecoderState:
    if cfg.kind != "attention_e2e":
        raise ValueError("streaming decoder needs an attention_e2e model")
    if window < 1:
        raise ValueError("window must be >= 1")
    st = DecoderState(cfg=cfg, window=window)
    st.h = [np.zeros(cfg.nodes, dtype) for _ in range(cfg.layers)]
    st.c = [np.zeros(cfg.nodes, dtype) for _ in range(cfg.layers)] if cfg.cell == "lstm" else []
    if cfg.encoder == "crnn":
        st.conv_buffer = np.zeros((cfg.conv.time_kernel, cfg.input_dim, 1), dtype)
    st.enc_ring = np.zeros((window, cfg.output_dim), dtype)
    st.score_ring = np.zeros(window, dtype)
    st.cell_evals = [0] * cfg.layers
    return st


def _encode_frame(state: DecoderState, x: np.ndarray, params: Params) -> np.ndarray:
    cfg = state.cfg
    z = x
    if cfg.encoder == "crnn":
        buf = state.conv_buffer
        buf[:-1] = buf[1:]
        buf[-1, :, 0] = x
        y = L.conv2d_step(buf, params["conv.kernel"], params["conv.bias"], cfg.conv)
        z = np.maximum(y, 0).reshape(-1)
    for i in range(cfg.layers):
        p = _rnn_params(params, i)
        if cfg.cell == "gru":
            state.h[i] = L.gru_cell(z, state.h[i], p)
        else:
            state.h[i], state.c[i] = L.lstm_cell(z, state.h[i], state.c[i], p)
        state.cell_evals[i] += 1
        z = state.h[i]
    if cfg.has_projection:
        z = np.maximum(z @ params["proj.W"] + params["proj.b"], 0)
    return z


def push_frame(state: DecoderState, x_t: np.ndarray, params: Params) -> Optional[float]:
    """Advance the decoder by one feature frame.

    Returns ``p(y=1)`` over the trailing ``window`` frames once ``window``
    frames have been seen, ``None`` during warm-up.
    """
    cfg = state.cfg
    x_t = np.asarray(x_t, dtype=state.enc_ring.dtype)
    if x_t.shape != (cfg.input_dim,):
        raise ValueError(f"frame must have shape ({cfg.input_dim},), got {x_t.shape}")
    h_t = _encode_frame(state, x_t, params)
    slot = state.frames_seen % state.window
    state.enc_ring[slot] = h_t
    if cfg.attention == "soft":
        state.score_ring[slot] = attention_scores(h_t, params["att.W"], params["att.b"], params["att.v"])
    state.frames_seen += 1
    if state.frames_seen < state.window:
        return None
    h = state.buffered_outputs()
    if cfg.attention == "soft":
        alpha = L.softmax(state.buffered_scores())
        c = alpha @ h
    else:
        c = h.sum(axis=0) / state.window
    return float(keyword_prob(c @ params["out.W"] + params["out.b"]))


def stream_scores(params: Params, cfg: ModelConfig, frames: np.ndarray, window: int = 100,
                  state: Optional[DecoderState] = None) -> List[Optional[float]]:
    """Push every row of ``frames``; returns one entry (score or None) per frame."""
    _check_params(params, cfg)
    st = new_state(cfg, window) if state is None else state
    return [push_frame(st, f, params) for f in frames]


def detect(scores: Iterable[Optional[float]], threshold: float, refractory_frames: int = 100,
           frame_hop: float = FRAME_HOP) -> List[DetectionEvent]:
    """Threshold per-frame scores into events at least ``refractory_frames`` apart.

    ``None`` entries (warm-up) never trigger. Frame indices are positions in
    ``scores``.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    events: List[DetectionEvent] = []
    next_allowed = 0
    for j, s in enumerate(scores):
        if s is None or j < next_allowed:
            continue
        if s >= threshold:
            events.append(DetectionEvent(frame=j, score=float(s), time_s=round(j * frame_hop, 6)))
            next_allowed = j + refractory_frames
    return events


def stream_file(wav_path, checkpoint, threshold: float, window: int = 100, refractory_frames: int = 100,
                front_end: FrontEndConfig = FrontEndConfig()) -> List[DetectionEvent]:
    params, cfg = load_checkpoint(checkpoint) if not isinstance(checkpoint, tuple) else checkpoint
    feats = featurize(wav_path, front_end)
    return detect(stream_scores(params, cfg, feats, window), threshold, refractory_frames, front_end.frame_hop)
