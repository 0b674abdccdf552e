#!/usr/bin/env python3
"""Build the small IDX digit subset used by the desk-scale training test.

The 5,000-sample MNIST excerpt shipped inside the `mlxtend` wheel (500 images
per digit) is split into a balanced 2,000-image train set and a 1,000-image
test set and written as gzipped IDX files.

    pip download mlxtend --no-deps -d /tmp/mlx
    python3 scripts/make_digit_subset.py /tmp/mlx/mlxtend-*.whl crates/core/tests/data/digits
"""
import gzip
import io
import os
import struct
import sys
import zipfile

import numpy as np

TRAIN_PER_CLASS = 200
TEST_PER_CLASS = 100


def write_idx_images(path, images):
    n = images.shape[0]
    header = struct.pack(">IIII", 0x00000803, n, 28, 28)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    header = struct.pack(">II", 0x00000801, labels.shape[0])
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + labels.astype(np.uint8).tobytes())


def main():
    wheel, out_dir = sys.argv[1], sys.argv[2]
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    pixels, labels = table[:, :-1], table[:, -1].astype(int)

    rng = np.random.RandomState(0)
    train_idx, test_idx = [], []
    for digit in range(10):
        idx = np.flatnonzero(labels == digit)
        rng.shuffle(idx)
        train_idx.extend(idx[:TRAIN_PER_CLASS])
        test_idx.extend(idx[TRAIN_PER_CLASS:TRAIN_PER_CLASS + TEST_PER_CLASS])
    train_idx = np.array(train_idx)
    test_idx = np.array(test_idx)
    rng.shuffle(train_idx)
    rng.shuffle(test_idx)

    os.makedirs(out_dir, exist_ok=True)
    write_idx_images(os.path.join(out_dir, "train-images-idx3-ubyte.gz"), pixels[train_idx])
    write_idx_labels(os.path.join(out_dir, "train-labels-idx1-ubyte.gz"), labels[train_idx])
    write_idx_images(os.path.join(out_dir, "test-images-idx3-ubyte.gz"), pixels[test_idx])
    write_idx_labels(os.path.join(out_dir, "test-labels-idx1-ubyte.gz"), labels[test_idx])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test samples to {out_dir}")


if __name__ == "__main__":
    main()
