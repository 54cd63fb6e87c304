"""Write a folder of synthetic images usable as a dataset root.

Example:
    python scripts/make_toy_dataset.py --out data/toy --count 32 --size 64
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from imshield.data import save_image, synth_image


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="output folder")
    ap.add_argument("--count", type=int, default=32)
    ap.add_argument("--size", type=int, default=64, help="square image size, multiple of 16")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        path = os.path.join(args.out, f"toy_{i:04d}.png")
        save_image(path, synth_image(rng, args.size))
    print(f"wrote {args.count} images of size {args.size} to {args.out}")


if __name__ == "__main__":
    main()
