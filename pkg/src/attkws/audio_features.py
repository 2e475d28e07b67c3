"""WAV reading, 25 ms / 10 ms framing, 40-channel Mel energies and PCEN.

Front-end constants (all overridable):

* 16 kHz input (other rates are rejected, never resampled)
* periodic Hann window, 400-sample frames zero-padded to a 512-point FFT
* HTK Mel scale, 20 Hz .. Nyquist, triangular filters without area normalisation
* PCEN with s=0.025, alpha=0.98, delta=2, r=0.5, eps=1e-6 and smoother
  initialised to the first frame
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.io import wavfile
from scipy.signal import lfilter

SAMPLE_RATE = 16000
FRAME_LEN = 0.025
FRAME_HOP = 0.010
N_MELS = 40
N_FFT = 512
FMIN = 20.0

FEAT_MAGIC = b"KWSF"
FEAT_VERSION = 1


class AudioError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioError("sample rate must be positive")
        if self.samples.size == 0:
            raise AudioError("empty audio")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


@dataclass(frozen=True)
class PcenConfig:
    s: float = 0.025
    alpha: float = 0.98
    delta: float = 2.0
    r: float = 0.5
    eps: float = 1e-6

    def __post_init__(self):
        if not 0 < self.s <= 1:
            raise ValueError("PCEN s must be in (0, 1]")
        if not 0 < self.alpha <= 1:
            raise ValueError("PCEN alpha must be in (0, 1]")
        if self.delta <= 0:
            raise ValueError("PCEN delta must be positive")
        if not 0 < self.r <= 1:
            raise ValueError("PCEN r must be in (0, 1]")
        if self.eps <= 0:
            raise ValueError("PCEN eps must be positive")


@dataclass(frozen=True)
class FrontEndConfig:
    sample_rate: int = SAMPLE_RATE
    frame_len: float = FRAME_LEN
    frame_hop: float = FRAME_HOP
    n_mels: int = N_MELS
    n_fft: int = N_FFT
    fmin: float = FMIN
    fmax: Optional[float] = None
    pcen: PcenConfig = PcenConfig()

    @property
    def win_samples(self) -> int:
        return int(round(self.frame_len * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.frame_hop * self.sample_rate))


def read_wav(path) -> AudioClip:
    """Read a PCM WAV (8/16/32-bit int or 32-bit float) as mono floats in [-1, 1].

    Multi-channel files are averaged to mono.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioError(f"{path}: unsupported WAV ({exc})") from exc
    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise AudioError(f"{path}: zero-length audio")
    return AudioClip(samples=np.clip(x, -1.0, 1.0), sample_rate=int(rate))


def write_wav(path, clip: AudioClip) -> None:
    """Write 16-bit PCM mono."""
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, clip.sample_rate, pcm)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def num_frames(n_samples: int, win: int = 400, hop: int = 160) -> int:
    if n_samples < win:
        return 0
    return 1 + (n_samples - win) // hop


def frame_signal(clip: AudioClip, win: int = 400, hop: int = 160) -> np.ndarray:
    """``(n_frames, win)`` Hann-windowed frames; trailing samples that do not
    fill a whole frame are dropped."""
    x = np.asarray(clip.samples if isinstance(clip, AudioClip) else clip, dtype=np.float64)
    n = num_frames(x.shape[0], win, hop)
    if n == 0:
        raise AudioError(f"clip of {x.shape[0]} samples is shorter than one {win}-sample window")
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx] * hann(win)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_freqs(n_mels: int = N_MELS, fmin: float = FMIN, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = FMIN, fmax: Optional[float] = None) -> np.ndarray:
    """``(n_mels, n_fft//2 + 1)`` triangular filters with unit peak."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_freqs[None, :] - lo) / (ctr - lo)
    down = (hi - fft_freqs[None, :]) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if empty.size:
        raise ValueError(f"{n_mels} Mel channels exceed the resolution of a {n_fft}-point FFT "
                         f"(empty channels: {empty.tolist()})")
    return fb


def mel_energies(frames: np.ndarray, n_mels: int = N_MELS, fmin: float = FMIN, fmax: Optional[float] = None,
                 n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("frames must be a non-empty (T, win) array")
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    return power @ mel_filterbank(n_mels, n_fft, sample_rate, fmin, fmax).T


def pcen(E: np.ndarray, cfg: PcenConfig = PcenConfig()) -> np.ndarray:
    """Per-channel energy normalisation over time (axis 0)."""
    E = np.asarray(E, dtype=np.float64)
    if np.any(E < 0):
        raise ValueError("PCEN input energies must be non-negative")
    # M(t) = (1 - s) M(t-1) + s E(t), with the state chosen so that M(0) = E(0)
    M, _ = lfilter([cfg.s], [1.0, cfg.s - 1.0], E, axis=0, zi=(1.0 - cfg.s) * E[:1])
    return (E / (cfg.eps + M) ** cfg.alpha + cfg.delta) ** cfg.r - cfg.delta ** cfg.r


def featurize_clip(clip: AudioClip, cfg: FrontEndConfig = FrontEndConfig()) -> np.ndarray:
    """Audio -> ``(T, n_mels)`` float32 PCEN Mel features."""
    if clip.sample_rate != cfg.sample_rate:
        raise AudioError(f"sample rate {clip.sample_rate} Hz does not match front end ({cfg.sample_rate} Hz); "
                         "resample the audio first")
    frames = frame_signal(clip, cfg.win_samples, cfg.hop_samples)
    E = mel_energies(frames, cfg.n_mels, cfg.fmin, cfg.fmax, cfg.n_fft, cfg.sample_rate)
    return pcen(E, cfg.pcen).astype(np.float32)


def featurize(path, cfg: FrontEndConfig = FrontEndConfig()) -> np.ndarray:
    return featurize_clip(read_wav(path), cfg)


def write_features(path, feats: np.ndarray) -> None:
    """``KWSF`` | version u32 | T u32 | channels u32 | float32 row-major, little-endian."""
    feats = np.ascontiguousarray(feats, dtype="<f4")
    T, C = feats.shape
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<III", FEAT_VERSION, T, C))
        fh.write(feats.tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEAT_MAGIC:
        raise ValueError(f"{path}: not a KWSF feature file")
    version, T, C = struct.unpack("<III", data[4:16])
    if version != FEAT_VERSION:
        raise ValueError(f"{path}: unsupported feature version {version}")
    body = data[16:]
    if len(body) != 4 * T * C:
        raise ValueError(f"{path}: truncated feature file")
    return np.frombuffer(body, dtype="<f4").reshape(T, C).astype(np.float32)
