#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the `mnist` npm package.

The npm package (MIT, https://github.com/cazala/mnist) ships 10,000 MNIST
digits as grayscale intensities in [0, 1] rounded to three decimals. This
script restores 8-bit pixels, shuffles with a fixed seed and writes a
6000-image training split and a 4000-image test split.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist-subset
"""
import json
import random
import struct
import sys
from pathlib import Path

TRAIN = 6000
SEED = 20200504


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        for start in range(0, len(data), 784):
            pixels = [min(255, max(0, round(v * 255))) for v in data[start:start + 784]]
            samples.append((pixels, digit))
    random.Random(SEED).shuffle(samples)
    train, test = samples[:TRAIN], samples[TRAIN:]
    write_images(dst / "train-images-idx3-ubyte", [s[0] for s in train])
    write_labels(dst / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_images(dst / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_labels(dst / "t10k-labels-idx1-ubyte", [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {dst}")


if __name__ == "__main__":
    main()
