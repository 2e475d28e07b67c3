"""Per-example scoring, FRR vs false-alarms-per-hour ROC, and report files."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .audio_features import FrontEndConfig
from .models import (ModelConfig, Params, deep_kws_confidence, deep_kws_posteriors, encoder_forward,
                     _windowed_head, smooth_posteriors)

log = logging.getLogger(__name__)


@dataclass
class ExampleScore:
    id: str
    label: int
    score: float
    duration_s: float = 0.0
    flagged: bool = False


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    frr: float
    fa_per_hour: float


def example_score(params: Params, cfg: ModelConfig, frames: np.ndarray, window: int = 100,
                  w_smooth: int = 20, w_max: int = 100) -> Tuple[float, bool]:
    """Max detection statistic over a whole example; ``flagged`` when the
    example is shorter than the attention window (score 0)."""
    if cfg.kind == "attention_e2e":
        scores = _windowed_head(params, cfg, encoder_forward(params, cfg, frames), window)
        if scores.size == 0:
            return 0.0, True
        return float(scores.max()), False
    conf = deep_kws_confidence(smooth_posteriors(deep_kws_posteriors(params, cfg, frames), w_smooth), w_max)
    return float(conf.max()), False


def score_batch(params: Params, cfg: ModelConfig, feats: Sequence[np.ndarray], window: int = 100,
                batch_size: int = 64) -> List[Tuple[float, bool]]:
    """:func:`example_score` for many examples, batching the encoder over
    examples of similar length. The encoder is causal, so end-padding never
    changes the scores of real frames."""
    if cfg.kind != "attention_e2e":
        return [example_score(params, cfg, f, window) for f in feats]
    order = np.argsort([f.shape[0] for f in feats], kind="stable")
    out: List[Optional[Tuple[float, bool]]] = [None] * len(feats)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        T = max(feats[i].shape[0] for i in idx)
        x = np.zeros((len(idx), T, cfg.input_dim), np.float32)
        for row, i in enumerate(idx):
            x[row, :feats[i].shape[0]] = feats[i]
        h = encoder_forward(params, cfg, x)
        for row, i in enumerate(idx):
            s = _windowed_head(params, cfg, h[row, :feats[i].shape[0]], window)
            out[i] = (0.0, True) if s.size == 0 else (float(s.max()), False)
    return out


def score_dataset(params: Params, cfg: ModelConfig, entries, window: int = 100,
                  front_end: FrontEndConfig = FrontEndConfig()) -> Tuple[List[ExampleScore], float]:
    """Score every manifest entry independently. Returns the scores and the
    total duration of negative examples in hours. Unreadable audio is logged
    and skipped."""
    from .training import entry_features

    entries = list(entries)
    if not entries:
        raise ValueError("empty manifest")
    feats, kept = [], []
    for e in entries:
        try:
            feats.append(entry_features(e, front_end))
            kept.append(e)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", e.path, exc)
    results = score_batch(params, cfg, feats, window)
    scores = []
    for e, f, (s, flagged) in zip(kept, feats, results):
        if flagged:
            log.warning("%s is shorter than the %d-frame window; scored 0", e.path, window)
        dur = e.duration if e.duration is not None else f.shape[0] * front_end.frame_hop
        scores.append(ExampleScore(id=str(e.path), label=int(e.label), score=s, duration_s=dur, flagged=flagged))
    neg_hours = sum(s.duration_s for s in scores if s.label == 0) / 3600.0
    return scores, neg_hours


def roc(scores: Sequence[ExampleScore], neg_hours: float) -> List[RocPoint]:
    """Step ROC with one point per distinct score plus the sentinels 0 and 1,
    sorted by increasing threshold. A score ``>= threshold`` fires."""
    if neg_hours <= 0:
        raise ValueError("negative audio duration must be positive")
    pos = np.sort([s.score for s in scores if s.label == 1])
    neg = np.sort([s.score for s in scores if s.label == 0])
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need at least one positive and one negative example")
    thresholds = np.unique(np.concatenate([pos, neg, [0.0, 1.0]]))
    misses = np.searchsorted(pos, thresholds, side="left")
    false_alarms = neg.size - np.searchsorted(neg, thresholds, side="left")
    return [RocPoint(float(t), float(m) / pos.size, float(fa) / neg_hours)
            for t, m, fa in zip(thresholds, misses, false_alarms)]


def operating_point(scores: Sequence[ExampleScore], neg_hours: float, threshold: float) -> RocPoint:
    pos = [s.score for s in scores if s.label == 1]
    neg = [s.score for s in scores if s.label == 0]
    frr = sum(x < threshold for x in pos) / len(pos)
    return RocPoint(float(threshold), frr, sum(x >= threshold for x in neg) / neg_hours)


def frr_at_fa(curve: Sequence[RocPoint], target_fa: float = 1.0) -> float:
    """Lowest FRR among points with at most ``target_fa`` false alarms per hour."""
    if not curve:
        raise ValueError("empty ROC")
    ok = [p.frr for p in curve if p.fa_per_hour <= target_fa]
    if not ok:
        log.warning("no operating point reaches %.3f FA/h; using the largest threshold", target_fa)
        return max(curve, key=lambda p: p.threshold).frr
    return min(ok)


def write_scores(path, scores: Sequence[ExampleScore]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "score", "duration_s"])
        for s in scores:
            w.writerow([s.id, s.label, repr(s.score), repr(s.duration_s)])


def read_scores(path) -> List[ExampleScore]:
    with open(path, newline="") as fh:
        return [ExampleScore(id=r["id"], label=int(r["label"]), score=float(r["score"]),
                             duration_s=float(r["duration_s"])) for r in csv.DictReader(fh)]


def write_roc_csv(path, curve: Sequence[RocPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "FRR", "FA_per_hour"])
        for p in curve:
            w.writerow([repr(p.threshold), repr(p.frr), repr(p.fa_per_hour)])


def read_roc_csv(path) -> List[RocPoint]:
    with open(path, newline="") as fh:
        return [RocPoint(float(r["threshold"]), float(r["FRR"]), float(r["FA_per_hour"]))
                for r in csv.DictReader(fh)]


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def roc_svg(series: Mapping[str, Sequence[RocPoint]], max_fa: float = 2.0, width: int = 480, height: int = 360) -> str:
    """FA/hour (0..max_fa) on x, FRR in percent on y; one polyline per series."""
    ml, mr, mt, mb = 55, 15, 15, 45
    pw, ph = width - ml - mr, height - mt - mb
    max_frr = max((p.frr * 100 for pts in series.values() for p in pts if p.fa_per_hour <= max_fa), default=1.0)
    max_frr = max(max_frr, 1e-9) * 1.05

    def xy(p: RocPoint):
        x = ml + pw * min(p.fa_per_hour, max_fa) / max_fa
        y = mt + ph * (1 - (p.frr * 100) / max_frr)
        return f"{x:.2f},{y:.2f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(5):
        fa = max_fa * k / 4
        x = ml + pw * k / 4
        parts.append(f'<text x="{x:.1f}" y="{mt + ph + 16}" font-size="11" text-anchor="middle">{fa:g}</text>')
        frr = max_frr * k / 4
        y = mt + ph * (1 - k / 4)
        parts.append(f'<text x="{ml - 6}" y="{y + 4:.1f}" font-size="11" text-anchor="end">{frr:.2f}</text>')
    parts.append(f'<text x="{ml + pw / 2}" y="{height - 8}" font-size="12" text-anchor="middle">False alarms per hour</text>')
    parts.append(f'<text x="14" y="{mt + ph / 2}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {mt + ph / 2})">FRR (%)</text>')
    for n, (name, pts) in enumerate(series.items()):
        color = _COLORS[n % len(_COLORS)]
        ordered = sorted(pts, key=lambda p: (p.fa_per_hour, -p.frr))
        coords = " ".join(xy(p) for p in ordered)
        parts.append(f'<polyline data-series="{name}" fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        parts.append(f'<text x="{ml + pw - 4}" y="{mt + 16 + 14 * n}" font-size="11" fill="{color}" text-anchor="end">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(curve: Union[Sequence[RocPoint], Mapping[str, Sequence[RocPoint]]], path_prefix) -> Tuple[Path, Path]:
    """Write ``<prefix>.csv`` and ``<prefix>.svg``. A mapping of named curves
    writes one CSV per series (``<prefix>.<name>.csv``) and a shared plot."""
    prefix = Path(path_prefix)
    if isinstance(curve, Mapping):
        series = dict(curve)
        if not series or any(not v for v in series.values()):
            raise ValueError("empty ROC")
        for name, pts in series.items():
            write_roc_csv(prefix.with_name(f"{prefix.name}.{name}.csv"), pts)
        csv_path = prefix.with_name(f"{prefix.name}.{next(iter(series))}.csv")
    else:
        if not curve:
            raise ValueError("empty ROC")
        series = {"model": list(curve)}
        csv_path = prefix.with_name(prefix.name + ".csv")
        write_roc_csv(csv_path, curve)
    svg_path = prefix.with_name(prefix.name + ".svg")
    svg_path.write_text(roc_svg(series))
    return csv_path, svg_path
