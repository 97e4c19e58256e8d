#!/usr/bin/env python3
"""Convert the digit files of the `mnist` npm package into gzipped IDX files.

The package stores 10,000 MNIST digits as flat arrays of pixel intensities in
[0, 1], rounded to three decimals, one JSON file per class. Intensities are
mapped back to bytes with round(255 * v) and the examples are interleaved in a
fixed pseudo-random order.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_npm_to_idx.py package/src/digits data/mnist-subset
"""

import argparse
import gzip
import json
import random
import struct
from pathlib import Path

PIXELS = 28 * 28


def load(digits_dir: Path):
    examples = []
    for label in range(10):
        flat = json.loads((digits_dir / f"{label}.json").read_text())["data"]
        if len(flat) % PIXELS:
            raise SystemExit(f"{label}.json: length {len(flat)} is not a multiple of {PIXELS}")
        for i in range(0, len(flat), PIXELS):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in flat[i : i + PIXELS])
            examples.append((pixels, label))
    return examples


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--seed", type=int, default=20240501)
    args = ap.parse_args()

    examples = load(args.digits_dir)
    random.Random(args.seed).shuffle(examples)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    n = len(examples)
    with gzip.GzipFile(args.out_dir / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for pixels, _ in examples:
            f.write(pixels)
    with gzip.GzipFile(args.out_dir / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(label for _, label in examples))
    counts = [sum(1 for _, l in examples if l == c) for c in range(10)]
    print(f"wrote {n} examples to {args.out_dir} (per class: {counts})")


if __name__ == "__main__":
    main()
