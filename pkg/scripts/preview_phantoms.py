#!/usr/bin/env python3
"""Write a contact sheet of phantom pairs and their tri-channel encodings."""

import argparse
from pathlib import Path

import numpy as np

from sonogen import dataset as ds


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/phantom_preview", type=Path)
    parser.add_argument("--count", type=int, default=9)
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        trimester = list(ds.Trimester)[i % 3]
        pair = ds.generate_phantom(ds.random_phantom_spec(
            rng, trimester, height=args.size, width=args.size))
        tri = ds.compose_tri_channel(pair.image, pair.mask)
        stem = f"{i:02d}_{trimester.value}"
        ds.save_gray_png(args.out / f"{stem}_image.png", pair.image.pixels)
        ds.save_gray_png(args.out / f"{stem}_mask.png", pair.mask.pixels * 255)
        ds.save_tri_png(args.out / f"{stem}_tri.png", tri)
    print(f"wrote {args.count} phantom triples under {args.out}")


if __name__ == "__main__":
    main()
