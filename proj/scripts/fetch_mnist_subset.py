#!/usr/bin/env python3
"""Build the class-balanced MNIST subset used by the desk-scale experiments.

The 5000-image MNIST sample shipped inside the mlxtend wheel (500 images per
digit) is split per class into 400 training and 100 test images and written
as gzip-compressed IDX files:

    data/mnist5k/train-images-idx3-ubyte.gz   (4000 x 28 x 28)
    data/mnist5k/train-labels-idx1-ubyte.gz
    data/mnist5k/t10k-images-idx3-ubyte.gz    (1000 x 28 x 28)
    data/mnist5k/t10k-labels-idx1-ubyte.gz

Only PyPI access is needed. Usage: scripts/fetch_mnist_subset.py [out_dir]
"""

import gzip
import pathlib
import struct
import subprocess
import sys
import tempfile
import zipfile

MLXTEND_VERSION = "0.24.0"
CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
TRAIN_PER_CLASS = 400


def fetch_rows():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp,
             f"mlxtend=={MLXTEND_VERSION}"],
            check=True)
        wheel = next(pathlib.Path(tmp).glob("mlxtend-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            text = gzip.decompress(zf.read(CSV_MEMBER)).decode()
    rows = []
    for line in text.strip().splitlines():
        values = [int(float(v)) for v in line.split(",")]
        rows.append((values[:-1], values[-1]))
    return rows


def main():
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist5k")
    out.mkdir(parents=True, exist_ok=True)
    rows = fetch_rows()
    seen = [0] * 10
    train, test = [], []
    for pixels, label in rows:
        (train if seen[label] < TRAIN_PER_CLASS else test).append((pixels, label))
        seen[label] += 1

    for prefix, split in (("train", train), ("t10k", test)):
        images = [p for p, _ in split]
        labels = [l for _, l in split]
        with gzip.GzipFile(str(out / f"{prefix}-images-idx3-ubyte.gz"), "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
            for pixels in images:
                f.write(bytes(pixels))
        with gzip.GzipFile(str(out / f"{prefix}-labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x00000801, len(labels)))
            f.write(bytes(labels))
        print(f"{prefix}: {len(labels)} samples -> {out}")


if __name__ == "__main__":
    main()
