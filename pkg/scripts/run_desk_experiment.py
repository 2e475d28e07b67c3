"""Desk-scale comparison of soft and average attention on a synthetic corpus.

Trains a 1-layer, 32-unit GRU model with each attention type, scores a
training corpus and a held-out corpus, and writes ROC reports
(``<out>/<split>.csv``/``.svg``) and checkpoints. Prints FRR at the target
false-alarm rate for each model and split.
"""
import argparse
import logging
import time
from pathlib import Path

from attkws.evaluation import emit_report, frr_at_fa, roc, score_dataset
from attkws.models import e2e_config, save_checkpoint
from attkws.synthetic import generate_corpus
from attkws.training import TrainConfig, fixed_crops, evaluate_crops, load_dataset, load_manifest, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="desk_experiment")
    ap.add_argument("--train-size", type=int, default=200, help="positives and negatives each")
    ap.add_argument("--heldout-size", type=int, default=100, help="positives and negatives each")
    ap.add_argument("--max-steps", type=int, default=2000)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--target-fa", type=float, default=1.0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    out = Path(args.out)
    corpus = out / "corpus"
    splits = {
        "train": load_manifest(generate_corpus(corpus, args.train_size, args.train_size, seed=args.seed, name="train")),
        "heldout": load_manifest(generate_corpus(corpus, args.heldout_size, args.heldout_size, seed=args.seed + 1,
                                                 name="heldout")),
    }
    train_set = load_dataset(splits["train"])
    tcfg = TrainConfig(max_steps=args.max_steps, batch_size=args.batch_size, seed=args.seed)

    curves = {split: {} for split in splits}
    for attention in ("soft", "average"):
        cfg = e2e_config("gru", 1, 32, attention)
        t0 = time.perf_counter()
        result = train(cfg, train_set, None, tcfg)
        _, acc = evaluate_crops(result.params, cfg, fixed_crops(train_set, tcfg.window_frames, seed=123))
        print(f"{attention}: trained {result.metrics[-1].step} steps in {time.perf_counter() - t0:.0f} s, "
              f"window accuracy {acc:.4f}")
        save_checkpoint(result.params, cfg, out / f"{attention}.kwsc")
        for split, entries in splits.items():
            scores, neg_hours = score_dataset(result.params, cfg, entries)
            curves[split][attention] = roc(scores, neg_hours)
            print(f"  {split}: FRR@{args.target_fa:g}FA/h={frr_at_fa(curves[split][attention], args.target_fa):.4f} "
                  f"(negative hours {neg_hours:.3f})")
    for split, series in curves.items():
        emit_report(series, out / split)
    print(f"reports written to {out}")


if __name__ == "__main__":
    main()
