#!/usr/bin/env python3
"""Render the glyph-digit dataset to IDX files (MNIST container format).

Writes train/test image+label pairs into --out (defaults to $MORE_DATA_DIR),
so any IDX-reading tool, including this package's loader, can consume them.
"""

import argparse
import os
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from morelab.data import save_idx, synth_digits
from morelab.hashing import derive_seed


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=os.environ.get("MORE_DATA_DIR", "."))
    parser.add_argument("--train", type=int, default=10000)
    parser.add_argument("--test", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=2024)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, n, part in (("train", args.train, 0), ("t10k", args.test, 1)):
        ds = synth_digits(n, seed=derive_seed(args.seed, part))
        images = out / f"{split}-images-idx3-ubyte"
        labels = out / f"{split}-labels-idx1-ubyte"
        save_idx(ds, images, labels)
        print(f"wrote {images} and {labels} ({n} samples)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
