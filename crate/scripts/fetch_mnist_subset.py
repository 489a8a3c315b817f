#!/usr/bin/env python3
"""Build a 10,000-digit MNIST subset in IDX format from the `mnist` npm package.

The npm package ships the first 10,000 MNIST training digits as JSON arrays of
pixel/255 values rounded to three decimals. Rounding back to the nearest byte
recovers the original pixels exactly (256 distinct values, none ambiguous).

Output (gzip-compressed IDX, big-endian headers):
    <out>/train-images-idx3-ubyte.gz   magic 2051, dims (n, 28, 28)
    <out>/train-labels-idx1-ubyte.gz   magic 2049, dims (n,)

Usage:
    python3 scripts/fetch_mnist_subset.py [--tarball mnist-1.1.0.tgz] [--out data/mnist]
"""
import argparse
import gzip
import io
import json
import os
import struct
import subprocess
import tarfile
import tempfile


def npm_pack(workdir):
    out = subprocess.run(
        ["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True, capture_output=True, text=True
    )
    return os.path.join(workdir, out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tarball", help="path to mnist-*.tgz; fetched with `npm pack` if omitted")
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist"))
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tarball = args.tarball or npm_pack(tmp)
        images, labels = bytearray(), bytearray()
        with tarfile.open(tarball) as tar:
            for digit in range(10):
                member = tar.extractfile(f"package/src/digits/{digit}.json")
                data = json.load(io.TextIOWrapper(member))["data"]
                assert len(data) % 784 == 0
                for v in data:
                    b = round(v * 255)
                    assert 0 <= b <= 255 and abs(b / 255 - v) < 1e-3
                    images.append(b)
                labels.extend([digit] * (len(data) // 784))

    n = len(labels)
    os.makedirs(args.out, exist_ok=True)
    with gzip.GzipFile(os.path.join(args.out, "train-images-idx3-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, n, 28, 28))
        f.write(bytes(images))
    with gzip.GzipFile(os.path.join(args.out, "train-labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, n))
        f.write(bytes(labels))
    print(f"wrote {n} digits to {os.path.abspath(args.out)}")


if __name__ == "__main__":
    main()
