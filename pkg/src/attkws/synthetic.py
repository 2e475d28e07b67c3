"""Synthetic wake-word corpus for desk-scale experiments.

Audio is built from "syllables": short voiced tones whose harmonics are shaped
by two formant resonances. The keyword is a fixed sequence of four syllables.
Negatives contain other syllable sequences, including reorderings and
truncations of the keyword, over a noise floor.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .audio_features import SAMPLE_RATE, AudioClip, write_wav
from .numerics import make_rng

# (F1, F2) in Hz
FORMANTS = [
    (700, 1200),
    (300, 2300),
    (550, 900),
    (400, 1900),
    (650, 1700),
    (350, 900),
    (500, 2500),
    (800, 1400),
]
KEYWORD = (0, 1, 2, 3)
SYLLABLE_S = 0.16
GAP_S = 0.05


def syllable(k: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    dur = SYLLABLE_S * rng.uniform(0.9, 1.1)
    n = int(dur * sr)
    t = np.arange(n) / sr
    f0 = 140.0 * rng.uniform(0.9, 1.1)
    f1, f2 = (f * rng.uniform(0.96, 1.04) for f in FORMANTS[k])
    harmonics = np.arange(1, int(4000 // f0) + 1) * f0
    gain = np.exp(-0.5 * ((harmonics - f1) / 120.0) ** 2) + 0.7 * np.exp(-0.5 * ((harmonics - f2) / 160.0) ** 2)
    phases = rng.uniform(0, 2 * np.pi, harmonics.size)
    wave = (gain[:, None] * np.sin(2 * np.pi * harmonics[:, None] * t[None, :] + phases[:, None])).sum(axis=0)
    env = np.sin(np.pi * np.arange(n) / n) ** 2
    wave *= env
    return wave / (np.sqrt(np.mean(wave ** 2)) + 1e-12)


def render_word(seq: Sequence[int], rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    parts = []
    for j, k in enumerate(seq):
        if j:
            parts.append(np.zeros(int(GAP_S * rng.uniform(0.8, 1.2) * sr)))
        parts.append(syllable(k, rng, sr))
    return np.concatenate(parts)


def contains_keyword(seq: Sequence[int]) -> bool:
    n = len(KEYWORD)
    return any(tuple(seq[i:i + n]) == KEYWORD for i in range(len(seq) - n + 1))


def random_distractor(rng: np.random.Generator) -> Tuple[int, ...]:
    """A non-keyword syllable sequence; half of them are keyword near-misses."""
    while True:
        kind = rng.integers(3)
        if kind == 0:
            seq = tuple(int(i) for i in rng.permutation(KEYWORD))
        elif kind == 1:
            cut = int(rng.integers(1, len(KEYWORD)))
            seq = KEYWORD[:cut] if rng.random() < 0.5 else KEYWORD[cut:]
        else:
            seq = tuple(int(i) for i in rng.integers(0, len(FORMANTS), int(rng.integers(2, 5))))
        if not contains_keyword(seq):
            return seq


def _place(words: List[np.ndarray], total: int, rng: np.random.Generator) -> Tuple[np.ndarray, List[int]]:
    """Lay words out in order with random silences; returns signal and start samples."""
    need = sum(w.size for w in words)
    if need > total:
        raise ValueError("words do not fit in the clip")
    slack = total - need
    cuts = np.sort(rng.uniform(0, slack, len(words)))
    gaps = np.diff(np.concatenate([[0], cuts])).astype(int)
    out = np.zeros(total)
    pos, starts = 0, []
    for g, w in zip(gaps, words):
        pos += g
        starts.append(pos)
        out[pos:pos + w.size] += w
        pos += w.size
    return out, starts


def _mix(speech: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    level = 10 ** (rng.uniform(-26, -14) / 20)
    snr_db = rng.uniform(10, 30)
    noise = rng.normal(0, level / (10 ** (snr_db / 20)), speech.size)
    return np.clip(level * speech + noise, -1, 1)


@dataclass
class SyntheticExample:
    clip: AudioClip
    label: int
    span: Tuple[float, float] = None
    words: Tuple[Tuple[int, ...], ...] = ()


def positive_example(rng: np.random.Generator, duration: float = 3.0, sr: int = SAMPLE_RATE) -> SyntheticExample:
    n_extra = int(rng.integers(0, 2))
    seqs = [random_distractor(rng) for _ in range(n_extra)]
    kw_at = int(rng.integers(0, n_extra + 1))
    seqs.insert(kw_at, KEYWORD)
    words = [render_word(s, rng, sr) for s in seqs]
    speech, starts = _place(words, int(duration * sr), rng)
    s0 = starts[kw_at]
    span = (s0 / sr, (s0 + words[kw_at].size) / sr)
    return SyntheticExample(AudioClip(_mix(speech, rng), sr), 1, span, tuple(seqs))


def negative_example(rng: np.random.Generator, duration: float = 14.0, sr: int = SAMPLE_RATE) -> SyntheticExample:
    total = int(duration * sr)
    seqs, words, used = [], [], 0
    while True:
        s = random_distractor(rng)
        # words are separated by short pauses, so the keyword must not form across a boundary either
        if contains_keyword([k for q in seqs for k in q] + list(s)):
            continue
        w = render_word(s, rng, sr)
        if used + w.size + int(0.3 * sr) * (len(words) + 1) > total:
            break
        seqs.append(s)
        words.append(w)
        used += w.size
        if len(words) >= int(duration / 1.2):
            break
    speech, _ = _place(words, total, rng) if words else (np.zeros(total), [])
    return SyntheticExample(AudioClip(_mix(speech, rng), sr), 0, None, tuple(seqs))


def generate_corpus(out_dir, n_pos: int = 200, n_neg: int = 200, seed: int = 0, pos_duration: float = 3.0,
                    neg_duration: float = 14.0, name: str = "train") -> Path:
    """Write WAVs and a ``<name>.tsv`` manifest into ``out_dir``; returns the manifest path.

    The default 200 x 3 s + 200 x 14 s is just under one hour of audio.
    """
    out = Path(out_dir)
    (out / name).mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)
    lines = []
    for i in range(n_pos + n_neg):
        pos = i < n_pos
        ex = positive_example(rng, pos_duration) if pos else negative_example(rng, neg_duration)
        rel = Path(name) / f"{'pos' if pos else 'neg'}_{i:04d}.wav"
        write_wav(out / rel, ex.clip)
        if pos:
            lines.append(f"{rel}\tpositive\t{ex.span[0]:.4f}\t{ex.span[1]:.4f}")
        else:
            lines.append(f"{rel}\tnegative")
    manifest = out / f"{name}.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
