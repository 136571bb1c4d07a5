#!/usr/bin/env python3
"""Write IDX train/test files from the 5,000-image MNIST sample shipped in
the mlxtend wheel (mlxtend/data/data/mnist_5k.csv.gz, 500 images per class).

Usage: make_mnist_subset.py <mlxtend wheel or mnist_5k.csv.gz> <out dir>

Within each class the first 250 rows go to the train split and the next 250
to the test split. Both splits are written class-interleaved (0,1,...,9,0,...).
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
PER_SPLIT = 250


def read_rows(src: Path):
    if src.suffix == ".whl":
        raw = zipfile.ZipFile(src).read(MEMBER)
    else:
        raw = src.read_bytes()
    text = gzip.decompress(raw).decode()
    rows = []
    for line in text.strip().splitlines():
        fields = [int(v) for v in line.split(",")]
        rows.append((fields[:-1], fields[-1]))
    return rows


def write_split(out: Path, prefix: str, rows):
    with open(out / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
        for pixels, _ in rows:
            f.write(bytes(pixels))
    with open(out / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(rows)))
        f.write(bytes(label for _, label in rows))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    by_class = {c: [] for c in range(10)}
    for pixels, label in read_rows(src):
        assert len(pixels) == 784
        by_class[label].append((pixels, label))
    train, test = [], []
    for i in range(PER_SPLIT):
        for c in range(10):
            train.append(by_class[c][i])
            test.append(by_class[c][PER_SPLIT + i])
    write_split(out, "train", train)
    write_split(out, "t10k", test)


if __name__ == "__main__":
    main()
