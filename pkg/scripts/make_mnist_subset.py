"""Write a 5k-sample MNIST subset as gzipped IDX files.

The subset comes from the ``mnist_5k.csv.gz`` file shipped inside the
mlxtend wheel (500 digits per class, drawn from the original MNIST files).
The rows are shuffled with a fixed seed and split into 3000 train and
2000 test samples.

    pip download mlxtend --no-deps -d /tmp/wheels
    python scripts/make_mnist_subset.py /tmp/wheels/mlxtend-*.whl data/mnist5k
"""
import argparse
import gzip
import io
import pathlib
import zipfile

import numpy as np

from spikedistill.datasets import write_idx

N_TRAIN = 3000


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("wheel")
    parser.add_argument("out_dir")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    with zipfile.ZipFile(args.wheel) as zf:
        raw = gzip.decompress(zf.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels = table[:, :784].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, 784].astype(np.uint8)

    order = np.random.default_rng(args.seed).permutation(len(labels))
    pixels, labels = pixels[order], labels[order]

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, sl in (("train", slice(0, N_TRAIN)), ("t10k", slice(N_TRAIN, None))):
        write_idx(out / f"{split}-images-idx3-ubyte.gz", pixels[sl])
        write_idx(out / f"{split}-labels-idx1-ubyte.gz", labels[sl])
        print(split, len(labels[sl]), np.bincount(labels[sl], minlength=10))


if __name__ == "__main__":
    main()
