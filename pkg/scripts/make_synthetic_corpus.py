"""Write a synthetic wake-word corpus (WAVs plus a ``<name>.tsv`` manifest).

The defaults give 200 positives of 3 s and 200 negatives of 14 s, just under
one hour of audio, which is enough for the desk-scale experiment.
"""
import argparse

from attkws.synthetic import generate_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    ap.add_argument("--positives", type=int, default=200)
    ap.add_argument("--negatives", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--name", default="train")
    args = ap.parse_args()
    print(generate_corpus(args.out_dir, args.positives, args.negatives, seed=args.seed, name=args.name))


if __name__ == "__main__":
    main()
