"""Pack the 10k MNIST digits shipped with the npm ``mnist`` package into IDX files.

The npm package (https://www.npmjs.com/package/mnist, MIT) stores one JSON file
per digit class with pixel intensities divided by 255 and rounded to three
decimals.  ``rint(v * 255)`` recovers the original bytes exactly.

Usage::

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python tools/make_mnist_subset.py package/src/digits src/ifmlab/mnist_subset
"""

import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    # mtime=0 keeps the archive byte-identical across runs
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("digits_dir", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--n-test", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    images, labels = [], []
    for digit in range(10):
        data = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        pix = np.rint(np.asarray(data, dtype=np.float64) * 255).reshape(-1, 28, 28)
        images.append(pix)
        labels.append(np.full(len(pix), digit))
    images = np.concatenate(images).astype(np.uint8)
    labels = np.concatenate(labels).astype(np.uint8)

    order = np.random.default_rng(args.seed).permutation(len(images))
    images, labels = images[order], labels[order]
    n_train = len(images) - args.n_test

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for prefix, sl in (("train", slice(0, n_train)), ("t10k", slice(n_train, None))):
        write_idx(args.out_dir / f"{prefix}-images-idx3-ubyte.gz", images[sl], 0x00000803)
        write_idx(args.out_dir / f"{prefix}-labels-idx1-ubyte.gz", labels[sl], 0x00000801)
    print(f"wrote {n_train} train / {args.n_test} test digits to {args.out_dir}")


if __name__ == "__main__":
    main()
