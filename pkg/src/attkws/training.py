"""Manifest handling, window cropping and the training loop.

Manifest lines are tab-separated::

    path  label  [span_start  span_end  [s1 e1 s2 e2 s3 e3 s4 e4]]

``label`` is ``positive``/``negative`` (or ``1``/``0``). Spans are in seconds;
the optional syllable alignment is given as frame indices. Relative paths are
resolved against the manifest's directory. A path ending in ``.kwsf`` is read
as precomputed features instead of audio.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .audio_features import FrontEndConfig, featurize, read_features
from .models import (ModelConfig, Params, build_model, frame_targets, load_checkpoint, logits_forward,
                     loss_and_grads, save_checkpoint)
from .layers import softmax_xent
from .numerics import (AdamState, NonFiniteError, adam_step, add_weight_decay, clip_global_norm, global_norm,
                       make_rng)

log = logging.getLogger(__name__)

__all__ = ["ManifestEntry", "Dataset", "TrainConfig", "TrainResult", "load_manifest", "load_dataset",
           "sample_example", "train", "save_checkpoint", "load_checkpoint"]


class ManifestError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class ManifestEntry:
    path: Path
    label: int
    span: Optional[Tuple[float, float]] = None
    alignment: Optional[List[Tuple[int, int]]] = None
    duration: Optional[float] = None


def _parse_label(tok: str) -> int:
    t = tok.strip().lower()
    if t in ("1", "positive", "pos"):
        return 1
    if t in ("0", "negative", "neg"):
        return 0
    raise ValueError(f"bad label {tok!r}")


def parse_manifest_line(line: str, base: Path = Path(".")) -> ManifestEntry:
    cols = line.rstrip("\n").split("\t")
    if len(cols) not in (2, 4, 12):
        raise ValueError(f"expected 2, 4 or 12 tab-separated fields, got {len(cols)}")
    path = Path(cols[0])
    if not path.is_absolute():
        path = base / path
    label = _parse_label(cols[1])
    span = alignment = None
    if len(cols) >= 4:
        if label == 0:
            raise ValueError("negative examples cannot carry a keyword span")
        span = (float(cols[2]), float(cols[3]))
        if not 0 <= span[0] < span[1]:
            raise ValueError(f"bad span {span}")
    if len(cols) == 12:
        nums = [int(c) for c in cols[4:]]
        alignment = list(zip(nums[0::2], nums[1::2]))
        lo = math.floor(span[0] * 100) - 1
        hi = math.ceil(span[1] * 100) + 1
        if any(s < lo or e > hi or s >= e for s, e in alignment):
            raise ValueError("syllable alignment must lie inside the keyword span")
    return ManifestEntry(path=path, label=label, span=span, alignment=alignment)


def load_manifest(path, check_files: bool = True) -> List[ManifestEntry]:
    path = Path(path)
    base = path.parent
    entries, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                e = parse_manifest_line(line, base)
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if check_files and not e.path.exists():
                raise ManifestError(f"{path}:{lineno}: missing audio file {e.path}")
            if e.path in seen:
                log.warning("%s:%d: duplicate path %s", path, lineno, e.path)
            seen.add(e.path)
            entries.append(e)
    n_pos = sum(e.label for e in entries)
    log.info("%s: %d positive, %d negative", path, n_pos, len(entries) - n_pos)
    return entries


def entry_features(entry: ManifestEntry, front_end: FrontEndConfig = FrontEndConfig()) -> np.ndarray:
    if entry.path.suffix == ".kwsf":
        return read_features(entry.path)
    return featurize(entry.path, front_end)


def span_frames(span: Tuple[float, float], n_frames: int, hop: float = 0.010) -> Tuple[int, int]:
    s = int(math.floor(span[0] / hop + 1e-9))
    e = int(math.ceil(span[1] / hop - 1e-9))
    return max(0, min(s, n_frames)), max(0, min(e, n_frames))


@dataclass
class Dataset:
    entries: List[ManifestEntry]
    features: List[np.ndarray]
    hop: float = 0.010

    def __len__(self):
        return len(self.entries)

    def indices(self, label: int) -> List[int]:
        return [i for i, e in enumerate(self.entries) if e.label == label]

    def span(self, i: int) -> Optional[Tuple[int, int]]:
        e = self.entries[i]
        return None if e.span is None else span_frames(e.span, self.features[i].shape[0], self.hop)


def _num_workers() -> int:
    try:
        return max(1, int(os.environ.get("KWS_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def load_dataset(entries: Sequence[ManifestEntry], front_end: FrontEndConfig = FrontEndConfig()) -> Dataset:
    entries = list(entries)
    workers = _num_workers()
    if workers > 1 and len(entries) > 1:
        with ProcessPoolExecutor(workers) as ex:
            feats = list(ex.map(entry_features, entries, [front_end] * len(entries)))
    else:
        feats = [entry_features(e, front_end) for e in entries]
    for e, f in zip(entries, feats):
        if e.duration is None:
            e.duration = f.shape[0] * front_end.frame_hop
    return Dataset(entries=entries, features=feats, hop=front_end.frame_hop)


@dataclass
class Crop:
    frames: np.ndarray
    label: int
    start: int
    padded: int = 0
    targets: Optional[np.ndarray] = None


def crop_window(feats: np.ndarray, span: Optional[Tuple[int, int]], window: int, rng: np.random.Generator,
                alignment=None, syllables: int = 4) -> Optional[Crop]:
    """Random ``window``-frame crop. Positives keep the whole span inside the
    window; clips shorter than the window are zero-padded at the front.
    Returns ``None`` when the span cannot fit."""
    T, D = feats.shape
    label = int(span is not None)
    targets = frame_targets(T, span, alignment, syllables) if span is not None else np.zeros(T, np.int64)
    if T < window:
        pad = window - T
        frames = np.concatenate([np.zeros((pad, D), feats.dtype), feats])
        targets = np.concatenate([np.zeros(pad, np.int64), targets])
        return Crop(frames, label, start=-pad, padded=pad, targets=targets)
    if span is None:
        lo, hi = 0, T - window
    else:
        s, e = span
        if e - s > window:
            return None
        lo, hi = max(0, e - window), min(s, T - window)
    start = int(rng.integers(lo, hi + 1))
    return Crop(feats[start:start + window], label, start=start, targets=targets[start:start + window])


def sample_example(dataset: Dataset, label: int, rng: np.random.Generator, window: int = 189) -> Crop:
    """Crop a random example of class ``label``."""
    pool = dataset.indices(label)
    if not pool:
        raise ValueError(f"no examples with label {label}")
    for _ in range(100):
        i = pool[int(rng.integers(len(pool)))]
        c = crop_window(dataset.features[i], dataset.span(i), window, rng, dataset.entries[i].alignment)
        if c is not None:
            return c
    raise ValueError("no positive example has a keyword span that fits the window")


@dataclass
class TrainConfig:
    window_frames: int = 189
    batch_size: int = 64
    pos_fraction: float = 0.5
    lr: float = 1e-3
    lr_final: float = 1e-4
    patience: int = 3
    clip_norm: float = 1.0
    l2: float = 1e-5
    seed: int = 0
    max_steps: int = 2000
    eval_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.window_frames < 1 or self.batch_size < 1 or self.max_steps < 1 or self.eval_every < 1:
            raise ValueError("window_frames, batch_size, max_steps and eval_every must be >= 1")
        if min(self.lr, self.lr_final, self.clip_norm) <= 0 or self.l2 < 0:
            raise ValueError("rates must be positive")
        if not 0 < self.pos_fraction < 1:
            raise ValueError("pos_fraction must be in (0, 1)")

    @property
    def n_pos(self) -> int:
        return max(1, min(self.batch_size - 1, int(round(self.batch_size * self.pos_fraction))))


@dataclass
class StepMetrics:
    step: int
    train_loss: float
    val_loss: Optional[float]
    lr: float
    grad_norm: float


@dataclass
class TrainResult:
    params: Params
    final_params: Params
    metrics: List[StepMetrics] = field(default_factory=list)
    best_step: int = 0
    best_val_loss: float = float("inf")
    lr_dropped_at: Optional[int] = None
    skipped_positives: int = 0


def _stack(crops: Sequence[Crop], cfg: ModelConfig):
    x = np.stack([c.frames for c in crops]).astype(np.float32)
    if cfg.kind == "attention_e2e":
        y = np.array([c.label for c in crops], dtype=np.int64)
    else:
        y = np.stack([c.targets for c in crops])
    return x, y


def fixed_crops(dataset: Dataset, window: int, seed: int) -> List[Crop]:
    """One deterministic crop per example (positives with a fitting span only)."""
    rng = make_rng(seed)
    crops = []
    for i in range(len(dataset)):
        c = crop_window(dataset.features[i], dataset.span(i), window, rng, dataset.entries[i].alignment)
        if c is not None:
            crops.append(c)
    return crops


def evaluate_crops(params: Params, cfg: ModelConfig, crops: Sequence[Crop], batch_size: int = 128) -> Tuple[float, float]:
    """Mean cross-entropy and accuracy over fixed crops."""
    total_loss, correct, count = 0.0, 0, 0
    for s in range(0, len(crops), batch_size):
        x, y = _stack(crops[s:s + batch_size], cfg)
        logits = logits_forward(params, cfg, x)
        loss, _ = softmax_xent(logits, y)
        n = y.size
        total_loss += float(loss) * n
        correct += int((logits.argmax(axis=-1) == y).sum())
        count += n
    return total_loss / count, correct / count


def train(model_cfg: ModelConfig, train_set: Dataset, val_set: Optional[Dataset], tcfg: TrainConfig,
          init_params: Optional[Params] = None) -> TrainResult:
    """Balanced mini-batch training: grads, + L2, clip to ``clip_norm``, Adam.

    The learning rate drops once from ``lr`` to ``lr_final`` after
    ``patience`` validation evaluations without improvement. The parameters
    with the best validation loss are returned (the final ones too).
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if not train_set.indices(1) or not train_set.indices(0):
        raise ValueError("training set needs both positive and negative examples")
    rng = make_rng(tcfg.seed)
    params = build_model(model_cfg, rng) if init_params is None else copy.deepcopy(init_params)
    state = AdamState.fresh(params)
    val_crops = fixed_crops(val_set, tcfg.window_frames, tcfg.seed + 1) if val_set is not None and len(val_set) else []

    skipped = sum(1 for i in train_set.indices(1)
                  if (sp := train_set.span(i)) and sp[1] - sp[0] > tcfg.window_frames)
    if skipped:
        log.warning("%d positive(s) have a keyword span longer than %d frames and are never sampled",
                    skipped, tcfg.window_frames)

    result = TrainResult(params=params, final_params=params, skipped_positives=skipped)
    lr = tcfg.lr
    bad_evals = 0
    n_pos = tcfg.n_pos
    for step in range(1, tcfg.max_steps + 1):
        crops = [sample_example(train_set, 1, rng, tcfg.window_frames) for _ in range(n_pos)]
        crops += [sample_example(train_set, 0, rng, tcfg.window_frames) for _ in range(tcfg.batch_size - n_pos)]
        x, y = _stack(crops, model_cfg)
        loss, grads, _ = loss_and_grads(params, model_cfg, x, y)
        loss = float(loss)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        grads = add_weight_decay(grads, params, tcfg.l2)
        try:
            grads = clip_global_norm(grads, tcfg.clip_norm)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite gradient at step {step}") from exc
        applied = global_norm(grads)
        params, state = adam_step(params, grads, state, lr=lr, beta1=tcfg.beta1, beta2=tcfg.beta2,
                                  eps=tcfg.adam_eps, l2=0.0)

        val_loss = None
        if val_crops and (step % tcfg.eval_every == 0 or step == tcfg.max_steps):
            val_loss, _ = evaluate_crops(params, model_cfg, val_crops)
            if val_loss < result.best_val_loss:
                result.best_val_loss, result.best_step = val_loss, step
                result.params = params
                bad_evals = 0
            else:
                bad_evals += 1
                if result.lr_dropped_at is None and bad_evals >= tcfg.patience:
                    lr = tcfg.lr_final
                    result.lr_dropped_at = step
                    log.info("step %d: validation loss plateaued, lr -> %g", step, lr)
        result.metrics.append(StepMetrics(step, loss, val_loss, lr, applied))
    result.final_params = params
    if not val_crops:
        result.params = params
        result.best_step = tcfg.max_steps
    return result


def write_metrics(path, metrics: Sequence[StepMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "val_loss", "lr", "grad_norm"])
        for m in metrics:
            w.writerow([m.step, repr(m.train_loss), "" if m.val_loss is None else repr(m.val_loss), repr(m.lr),
                        repr(m.grad_norm)])
