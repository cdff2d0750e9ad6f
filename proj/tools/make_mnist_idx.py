#!/usr/bin/env python3
"""Build gzipped IDX files from the 10k MNIST digits bundled in the npm `mnist` package.

The package stores each digit class as JSON arrays of 784 floats in [0, 1]
(rounded to three decimals). Pixels are mapped back to bytes with round(v * 255).
Samples are shuffled with a fixed seed and split into train/test files.

usage: make_mnist_idx.py [--package mnist-1.1.0.tgz] [--out data] [--test 2000]
"""

import argparse
import gzip
import json
import random
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--package", help="path to mnist-*.tgz; fetched with `npm pack mnist` when absent")
    ap.add_argument("--out", default="data")
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=20220601)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        pkg = args.package
        if pkg is None:
            subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                           stdout=subprocess.DEVNULL)
            pkg = str(next(Path(tmp).glob("mnist-*.tgz")))
        with tarfile.open(pkg) as tar:
            tar.extractall(tmp)
        samples = []
        for digit in range(10):
            raw = json.loads((Path(tmp) / "package/src/digits" / f"{digit}.json").read_text())
            flat = raw["data"]
            assert len(flat) % 784 == 0
            for i in range(0, len(flat), 784):
                img = [min(255, max(0, round(v * 255))) for v in flat[i:i + 784]]
                samples.append((img, digit))

    random.Random(args.seed).shuffle(samples)
    test, train = samples[:args.test], samples[args.test:]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("test", test)):
        write_idx_images(out / f"mnist-{name}-images-idx3-ubyte.gz", [s[0] for s in part])
        write_idx_labels(out / f"mnist-{name}-labels-idx1-ubyte.gz", [s[1] for s in part])
        print(f"{name}: {len(part)} samples")


if __name__ == "__main__":
    main()
