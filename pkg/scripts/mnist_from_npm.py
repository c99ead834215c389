"""Convert the digits bundled in the npm ``mnist`` package into IDX files.

The package (``npm pack mnist``) ships 10 000 MNIST digits as JSON, one file
per class, with pixel values already divided by 255.  This script shuffles
them with a fixed seed and writes ``train`` (first 8000) and ``t10k`` (last
2000) IDX files, gzip-compressed, so ``curvlab`` can load them offline.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/mnist_from_npm.py package/src/digits data/mnist
"""

import argparse
import json
from pathlib import Path

import numpy as np

from curvlab.data import write_idx


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--train", type=int, default=8000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = [], []
    for digit in range(10):
        raw = np.array(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"])
        imgs = raw.reshape(-1, 28, 28)
        images.append(np.rint(imgs * 255).clip(0, 255).astype(np.uint8))
        labels.append(np.full(imgs.shape[0], digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(labels.shape[0])
    images, labels = images[order], labels[order]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    t = args.train
    write_idx(images[:t], labels[:t], args.out_dir / "train-images-idx3-ubyte.gz",
              args.out_dir / "train-labels-idx1-ubyte.gz")
    write_idx(images[t:], labels[t:], args.out_dir / "t10k-images-idx3-ubyte.gz",
              args.out_dir / "t10k-labels-idx1-ubyte.gz")
    print(f"wrote {t} train / {labels.shape[0] - t} test images to {args.out_dir}")


if __name__ == "__main__":
    main()
