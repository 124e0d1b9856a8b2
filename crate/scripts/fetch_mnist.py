#!/usr/bin/env python3
"""Write MNIST-style IDX files into data/mnist.

Without network access to the original IDX archives this uses the digits
bundled with the npm package `mnist` (about 10k real MNIST images, one JSON
file per class). They are shuffled with a fixed seed and split into
train (8000) and test (the rest), then written as
train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte
and t10k-labels-idx1-ubyte.

Usage: scripts/fetch_mnist.py [--package DIR] [--out DIR]
If --package is omitted the package is fetched with `npm pack mnist@1.1.0`.
"""

import argparse
import json
import random
import struct
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

TRAIN = 8000


def fetch_package(workdir: Path) -> Path:
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True, stdout=subprocess.DEVNULL)
    tgz = next(workdir.glob("mnist-*.tgz"))
    with tarfile.open(tgz) as t:
        t.extractall(workdir, filter="data")
    return workdir / "package"


def load(package: Path):
    examples = []
    for label in range(10):
        data = json.loads((package / "src" / "digits" / f"{label}.json").read_text())["data"]
        if len(data) % 784:
            sys.exit(f"{label}.json: {len(data)} values is not a multiple of 784")
        for i in range(0, len(data), 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in data[i : i + 784])
            examples.append((pixels, label))
    return examples


def write_idx(out: Path, prefix: str, examples):
    with open(out / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(examples), 28, 28))
        for pixels, _ in examples:
            f.write(pixels)
    with open(out / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(examples)))
        f.write(bytes(label for _, label in examples))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--package", type=Path, help="extracted npm `mnist` package directory")
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data" / "mnist")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        package = args.package or fetch_package(Path(tmp))
        examples = load(package)
    random.Random(0).shuffle(examples)
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out, "train", examples[:TRAIN])
    write_idx(args.out, "t10k", examples[TRAIN:])
    print(f"wrote {TRAIN} train and {len(examples) - TRAIN} test images to {args.out}")


if __name__ == "__main__":
    main()
