"""Regenerate the repo's sample data deterministically.

Writes the pre-tokenized sample corpus under data/ (binary little-endian u32
id streams) and, with --mnist, synthetic IDX-format image/label files for the
fully connected experiments. Committed data files come from the default
arguments of this script.
"""

import argparse
from pathlib import Path

from traincert.data_io import save_token_ids, synth_token_stream, write_synth_mnist
from traincert.linalg import Rng

VOCAB_SIZE = 64
TRAIN_TOKENS = 40_000
TEST_TOKENS = 4_000
SEED = 20240601


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data", help="output directory")
    parser.add_argument("--mnist", action="store_true", help="also write synthetic IDX files")
    parser.add_argument("--mnist-n", type=int, default=5000)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(SEED)
    save_token_ids(out / "sample_train_ids.bin", synth_token_stream(TRAIN_TOKENS, VOCAB_SIZE, rng.derive("train")))
    save_token_ids(out / "sample_test_ids.bin", synth_token_stream(TEST_TOKENS, VOCAB_SIZE, rng.derive("test")))
    print(f"wrote token corpus (vocab={VOCAB_SIZE}) to {out}/")
    if args.mnist:
        write_synth_mnist(out / "synth_images.idx", out / "synth_labels.idx", args.mnist_n, SEED)
        print(f"wrote {args.mnist_n} synthetic IDX samples to {out}/")


if __name__ == "__main__":
    main()
