"""Regenerate tests/data/reference_1905ms.wav: the keyword over light noise,
30480 samples (1.905 s) of 16-bit mono at 16 kHz."""
import argparse
from pathlib import Path

import numpy as np

from attkws.audio_features import AudioClip, write_wav
from attkws.numerics import make_rng
from attkws.synthetic import KEYWORD, render_word

N_SAMPLES = 30480


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "data" / "reference_1905ms.wav"))
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()
    rng = make_rng(args.seed)
    word = render_word(KEYWORD, rng)
    x = np.zeros(N_SAMPLES)
    start = (N_SAMPLES - word.size) // 2
    x[start:start + word.size] = 0.1 * word
    x += rng.normal(0, 0.003, N_SAMPLES)
    write_wav(args.out, AudioClip(np.clip(x, -1, 1), 16000))
    print(args.out)


if __name__ == "__main__":
    main()
