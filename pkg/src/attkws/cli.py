"""``kws`` command-line tool: featurize, train, eval, roc, params, stream.

Exit codes: 0 success, 1 usage error (bad flags, unknown config keys),
2 runtime failure (unreadable files, training errors, ...).

Run configuration is a flat JSON object with a ``version`` key; see
``kws params --dump-config`` for every key and its default. Flags given on
the command line override values from ``--config``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Sequence

from .audio_features import FrontEndConfig, PcenConfig, featurize, write_features
from .evaluation import emit_report, frr_at_fa, read_scores, roc, score_dataset, write_scores
from .models import ConvSpec, ModelConfig, count_params, dnn_baseline_config, load_checkpoint
from .training import TrainConfig, load_dataset, load_manifest, save_checkpoint, train, write_metrics

log = logging.getLogger("attkws")

CONFIG_VERSION = 1


class UsageError(Exception):
    """Bad command-line or configuration input (exit code 1)."""


@dataclass
class RunConfig:
    """Flat run configuration; every key is documented by ``--dump-config``."""
    version: int = CONFIG_VERSION
    # model
    kind: str = "attention_e2e"
    encoder: str = "gru"
    layers: int = 2
    nodes: int = 64
    attention: str = "soft"
    channels: int = 16
    recurrent: str = "gru"
    # training
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
    # front end
    pcen_s: float = 0.025
    pcen_alpha: float = 0.98
    pcen_delta: float = 2.0
    pcen_r: float = 0.5
    pcen_eps: float = 1e-6
    # evaluation / streaming
    window: int = 100
    target_fa: float = 1.0
    threshold: float = 0.5
    refractory_frames: int = 100

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"{path}: unknown config keys {unknown}")
        if data.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise UsageError(f"{path}: unsupported config version {data['version']}")
        return cls(**data)

    def model(self) -> ModelConfig:
        if self.kind == "deep_kws":
            return dnn_baseline_config(self.layers, self.nodes)
        conv = ConvSpec(out_channels=self.channels) if self.encoder == "crnn" else None
        return ModelConfig(kind=self.kind, encoder=self.encoder, layers=self.layers, nodes=self.nodes,
                           attention=self.attention, conv=conv, recurrent=self.recurrent)

    def training(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def front_end(self) -> FrontEndConfig:
        return FrontEndConfig(pcen=PcenConfig(s=self.pcen_s, alpha=self.pcen_alpha, delta=self.pcen_delta,
                                              r=self.pcen_r, eps=self.pcen_eps))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser, groups: Sequence[str]) -> None:
    """Expose RunConfig keys as ``--key`` overrides (default None = not given)."""
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--dump-config", action="store_true", help="print the effective configuration and exit")
    sections = {
        "model": ["kind", "encoder", "layers", "nodes", "attention", "channels", "recurrent"],
        "train": ["window_frames", "batch_size", "pos_fraction", "lr", "lr_final", "patience", "clip_norm",
                  "l2", "seed", "max_steps", "eval_every"],
        "frontend": ["pcen_s", "pcen_alpha", "pcen_delta", "pcen_r", "pcen_eps"],
        "eval": ["window", "target_fa", "threshold", "refractory_frames"],
    }
    types = {f.name: type(f.default) for f in fields(RunConfig)}
    seen = set()
    for g in groups:
        for key in sections[g]:
            if key in seen:
                continue
            seen.add(key)
            flags = ["--" + key.replace("_", "-")] + (["--refractory"] if key == "refractory_frames" else [])
            p.add_argument(*flags, dest=key, type=types[key], default=None)


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, v)
    return cfg


def _maybe_dump(args, cfg: RunConfig) -> bool:
    if getattr(args, "dump_config", False):
        print(json.dumps(asdict(cfg), indent=2, sort_keys=True))
        return True
    return False


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kws", description="Attention-based end-to-end keyword spotting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("featurize", help="WAV -> KWSF PCEN Mel features")
    p.add_argument("wav", nargs="+")
    p.add_argument("--out", help="output file (single input) or directory (several inputs)")
    _add_config_flags(p, ["frontend"])

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--manifest", required=False)
    p.add_argument("--val-manifest")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--metrics", help="per-step metrics CSV")
    _add_config_flags(p, ["model", "train", "frontend"])

    p = sub.add_parser("eval", help="score a manifest and write the ROC report")
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--manifest", required=False)
    p.add_argument("--out-prefix", default="eval")
    _add_config_flags(p, ["eval", "frontend"])

    p = sub.add_parser("roc", help="ROC report from one or more score CSVs")
    p.add_argument("scores", nargs="+", help="scores.csv or name=scores.csv")
    p.add_argument("--out-prefix", default="roc")
    _add_config_flags(p, ["eval"])

    p = sub.add_parser("params", help="print the parameter count of a model configuration")
    _add_config_flags(p, ["model"])

    p = sub.add_parser("stream", help="run the streaming detector over a WAV file")
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--wav", required=False)
    p.add_argument("--scores", action="store_true", help="print every frame score instead of detections")
    _add_config_flags(p, ["eval", "frontend"])
    return parser


def _require(args, *names):
    missing = [n for n in names if getattr(args, n.replace("-", "_"), None) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m for m in missing))


def cmd_featurize(args, cfg: RunConfig) -> None:
    fe = cfg.front_end()
    if len(args.wav) == 1 and args.out and not Path(args.out).is_dir():
        targets = [(Path(args.wav[0]), Path(args.out))]
    else:
        out_dir = Path(args.out) if args.out else None
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
        targets = [(Path(w), (out_dir or Path(w).parent) / (Path(w).stem + ".kwsf")) for w in args.wav]
    for src, dst in targets:
        feats = featurize(src, fe)
        write_features(dst, feats)
        print(f"{dst}\t{feats.shape[0]}x{feats.shape[1]}")


def cmd_train(args, cfg: RunConfig) -> None:
    _require(args, "manifest", "out")
    mcfg, tcfg, fe = cfg.model(), cfg.training(), cfg.front_end()
    train_set = load_dataset(load_manifest(args.manifest), fe)
    val_set = load_dataset(load_manifest(args.val_manifest), fe) if args.val_manifest else None
    result = train(mcfg, train_set, val_set, tcfg)
    save_checkpoint(result.params, mcfg, args.out)
    if args.metrics:
        write_metrics(args.metrics, result.metrics)
    last = result.metrics[-1]
    print(f"steps={last.step} train_loss={last.train_loss:.6f} best_step={result.best_step} "
          f"params={count_params(mcfg)} checkpoint={args.out}")


def cmd_eval(args, cfg: RunConfig) -> None:
    _require(args, "checkpoint", "manifest")
    params, mcfg = load_checkpoint(args.checkpoint)
    scores, neg_hours = score_dataset(params, mcfg, load_manifest(args.manifest), cfg.window, cfg.front_end())
    prefix = Path(args.out_prefix)
    write_scores(prefix.with_name(prefix.name + ".scores.csv"), scores)
    curve = roc(scores, neg_hours)
    emit_report(curve, prefix)
    print(f"FRR@{cfg.target_fa:g}FA/h={frr_at_fa(curve, cfg.target_fa):.6f} negative_hours={neg_hours:.4f} "
          f"examples={len(scores)}")


def cmd_roc(args, cfg: RunConfig) -> None:
    series = {}
    for item in args.scores:
        name, _, path = item.rpartition("=")
        name = name or Path(path).stem
        scores = read_scores(path)
        neg_hours = sum(s.duration_s for s in scores if s.label == 0) / 3600.0
        series[name] = roc(scores, neg_hours)
        print(f"{name}\tFRR@{cfg.target_fa:g}FA/h={frr_at_fa(series[name], cfg.target_fa):.6f}")
    emit_report(series if len(series) > 1 else next(iter(series.values())), args.out_prefix)


def cmd_params(args, cfg: RunConfig) -> None:
    print(count_params(cfg.model()))


def cmd_stream(args, cfg: RunConfig) -> None:
    from .streaming import detect, stream_scores

    _require(args, "checkpoint", "wav")
    params, mcfg = load_checkpoint(args.checkpoint)
    fe = cfg.front_end()
    scores = stream_scores(params, mcfg, featurize(args.wav, fe), cfg.window)
    print("frame\ttime_s\tscore")
    if args.scores:
        for j, s in enumerate(scores):
            if s is not None:
                print(f"{j}\t{j * fe.frame_hop:.2f}\t{s:.6f}")
        return
    for ev in detect(scores, cfg.threshold, cfg.refractory_frames, fe.frame_hop):
        print(f"{ev.frame}\t{ev.time_s:.2f}\t{ev.score:.6f}")


COMMANDS = {"featurize": cmd_featurize, "train": cmd_train, "eval": cmd_eval, "roc": cmd_roc,
            "params": cmd_params, "stream": cmd_stream}


def run_cli(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 1 on bad flags
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("kws: error: a subcommand is required", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _run_config(args)
        if _maybe_dump(args, cfg):
            return 0
        try:
            cfg.model()
            cfg.training()
            cfg.front_end()
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid configuration: {exc}") from exc
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"kws: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"kws: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
