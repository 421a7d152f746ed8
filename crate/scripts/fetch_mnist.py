#!/usr/bin/env python3
"""Fetch the 10,000-digit MNIST sample bundled in the `mnist` npm package and
write it as IDX files (train: 8,000 digits, test: 2,000 digits).

The split is a seeded shuffle, so reruns produce identical files.

    python3 scripts/fetch_mnist.py [--out data/mnist]
"""
import argparse
import io
import json
import random
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path

SIDE = 28


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--tarball", help="use an already downloaded mnist-*.tgz")
    ap.add_argument("--train", type=int, default=8000)
    ap.add_argument("--seed", type=int, default=20240101)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        if args.tarball:
            tgz = Path(args.tarball)
        else:
            subprocess.run(["npm", "pack", "mnist@1.1.0", "--silent"], cwd=tmp, check=True)
            tgz = next(Path(tmp).glob("mnist-*.tgz"))
        samples = []
        with tarfile.open(tgz) as tar:
            for digit in range(10):
                member = tar.extractfile(f"package/src/digits/{digit}.json")
                data = json.load(io.TextIOWrapper(member))["data"]
                count = len(data) // (SIDE * SIDE)
                for k in range(count):
                    px = data[k * SIDE * SIDE:(k + 1) * SIDE * SIDE]
                    img = [max(0, min(255, round(v * 255))) for v in px]
                    samples.append((img, digit))

    random.Random(args.seed).shuffle(samples)
    train, test = samples[: args.train], samples[args.train:]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_images(out / "train-images-idx3-ubyte", [s[0] for s in train])
    write_labels(out / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_images(out / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_labels(out / "t10k-labels-idx1-ubyte", [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test digits to {out}")


if __name__ == "__main__":
    main()
