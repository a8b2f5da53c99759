#!/usr/bin/env python3
"""Convert the 5000-sample MNIST subset shipped with mlxtend into IDX files.

Usage: make_mnist_subset.py <mnist_5k.csv.gz> <out_dir> [--test-per-class 100]

The csv holds one sample per row: 784 pixel values followed by the label.
The first samples of each class (in file order) go to the training split,
the last --test-per-class samples to the test split. Output files use the
standard MNIST names, gzip-compressed.
"""
import argparse
import gzip
import struct
from collections import defaultdict
from pathlib import Path

import numpy as np


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        f.write(np.asarray(images, dtype=np.uint8).tobytes())


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv")
    ap.add_argument("out_dir")
    ap.add_argument("--test-per-class", type=int, default=100)
    args = ap.parse_args()

    data = np.loadtxt(args.csv, delimiter=",", dtype=np.int64)
    pixels, labels = data[:, :-1], data[:, -1]
    by_class = defaultdict(list)
    for i, y in enumerate(labels):
        by_class[int(y)].append(i)

    train_idx, test_idx = [], []
    for y in sorted(by_class):
        idx = by_class[y]
        train_idx += idx[: len(idx) - args.test_per_class]
        test_idx += idx[len(idx) - args.test_per_class:]
    train_idx.sort()
    test_idx.sort()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "train-images-idx3-ubyte.gz", pixels[train_idx].reshape(-1, 28, 28))
    write_idx_labels(out / "train-labels-idx1-ubyte.gz", labels[train_idx])
    write_idx_images(out / "t10k-images-idx3-ubyte.gz", pixels[test_idx].reshape(-1, 28, 28))
    write_idx_labels(out / "t10k-labels-idx1-ubyte.gz", labels[test_idx])
    print(f"train={len(train_idx)} test={len(test_idx)} -> {out}")


if __name__ == "__main__":
    main()
