"""Write a synthetic grayscale dataset laid out the way desk.ini expects.

    python3 demos/make_dataset.py data            # data/{train,val,test}/*.png
    python3 demos/make_dataset.py data --size 300 # large enough for the naive benchmark
"""
import argparse
from pathlib import Path

import numpy as np

from mcbn_sr import data


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root", type=Path)
    ap.add_argument("--train", type=int, default=8)
    ap.add_argument("--val", type=int, default=1)
    ap.add_argument("--test", type=int, default=2)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    for split, count, offset in (("train", args.train, 0), ("val", args.val, 200), ("test", args.test, 100)):
        d = args.root / split
        d.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            img = data.synthetic_image(args.size, args.size, np.random.default_rng([args.seed, offset + i]))
            data.save_png(img, d / f"{split}{i:02d}.png")
    print(f"wrote {args.train}/{args.val}/{args.test} images of {args.size}x{args.size} under {args.root}")


if __name__ == "__main__":
    main()
