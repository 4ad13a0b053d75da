#!/usr/bin/env python3
"""Build a 10k-sample MNIST subset in IDX format from the `mnist` npm package.

The npm package (https://www.npmjs.com/package/mnist, MIT) ships 10,000 MNIST
digits as JSON float arrays (pixel/255, rounded to 3 decimals). This script
recovers the original u8 pixels and writes gzipped IDX files:

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist-subset

Split: per class, the first 80% of the digits go to train, the rest to test.
Both splits are then interleaved with a fixed permutation (seed 20190101).
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for label in range(10):
        flat = json.loads((src / f"{label}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        n = len(flat) // 784
        imgs = [
            [int(round(v * 255)) for v in flat[i * 784:(i + 1) * 784]] for i in range(n)
        ]
        cut = (n * 4) // 5
        train += [(img, label) for img in imgs[:cut]]
        test += [(img, label) for img in imgs[cut:]]
    rng = random.Random(20190101)
    rng.shuffle(train)
    rng.shuffle(test)
    for name, split in (("train", train), ("t10k", test)):
        pixels = [p for img, _ in split for p in img]
        labels = [l for _, l in split]
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, (len(split), 28, 28), pixels)
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(split),), labels)
        print(name, len(split))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
