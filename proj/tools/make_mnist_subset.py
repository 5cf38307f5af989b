#!/usr/bin/env python3
"""Build gzipped IDX files from the digit JSON files shipped in the npm `mnist` package.

The npm package (https://www.npmjs.com/package/mnist) bundles 10,000 real
MNIST digits as grayscale intensities in [0, 1] with three decimals. This
script writes them out in the standard IDX layout so the regular loader can
consume them:

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist

Intensities are rounded back to bytes. The split is a fixed shuffle (seed 0).
"""

import argparse
import gzip
import json
import pathlib
import struct

import numpy as np


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    # mtime=0 keeps the output byte-identical across runs
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train", type=int, default=8000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = [], []
    for digit in range(10):
        data = json.loads((pathlib.Path(args.digits_dir) / f"{digit}.json").read_text())["data"]
        arr = np.rint(np.asarray(data, dtype=np.float64) * 255.0).clip(0, 255)
        arr = arr.astype(np.uint8).reshape(-1, 784)
        images.append(arr)
        labels.append(np.full(len(arr), digit, dtype=np.uint8))
    images = np.vstack(images)
    labels = np.concatenate(labels)

    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {
        "train": slice(0, args.train),
        "t10k": slice(args.train, len(labels)),
    }
    for name, sl in splits.items():
        n = len(labels[sl])
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, [n, 28, 28], images[sl].tobytes())
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, [n], labels[sl].tobytes())
        print(f"{name}: {n} samples")


if __name__ == "__main__":
    main()
