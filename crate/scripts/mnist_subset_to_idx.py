#!/usr/bin/env python3
"""Build a gzipped IDX image file from the 10k-digit `mnist` npm package.

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_subset_to_idx.py package/src/digits data/mnist-10k-images-idx3-ubyte.gz

The package stores pixels as decimals in [0, 1] grouped by digit class. The
images are interleaved with a fixed permutation so that any prefix of the file
is class-balanced in expectation, then written as unsigned bytes.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28


def main(src: str, dst: str) -> None:
    images = []
    for digit in range(10):
        flat = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        n = len(flat) // (SIDE * SIDE)
        for i in range(n):
            px = flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            images.append(bytes(min(255, max(0, round(v * 255))) for v in px))
    random.Random(0).shuffle(images)
    header = struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE)
    with gzip.GzipFile(dst, "wb", mtime=0) as f:
        f.write(header)
        for img in images:
            f.write(img)
    print(f"wrote {len(images)} images to {dst}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
