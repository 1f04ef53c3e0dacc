#!/usr/bin/env python3
"""Fetch MNIST in IDX format from the npm registry.

The LeCun mirror is not always reachable from build sandboxes, but the npm
package `mnist-data` 1.2.6 ships the four official IDX files unmodified. They
are written gzipped under the standard MNIST file names.
"""
import argparse
import gzip
import os
import struct
import subprocess
import tarfile
import tempfile

FILES = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
]

# Official per-class counts.
TRAIN_COUNTS = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
TEST_COUNTS = [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]


def check_labels(raw, expected):
    magic, n = struct.unpack(">II", raw[:8])
    assert magic == 2049 and n == sum(expected), (magic, n)
    counts = [0] * 10
    for b in raw[8:]:
        counts[b] += 1
    assert counts == expected, counts


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist"))
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist-data@1.2.6"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        with tarfile.open(os.path.join(tmp, "mnist-data-1.2.6.tgz")) as tar:
            raw = {name: tar.extractfile(f"package/data/{name}").read() for name in FILES}
    check_labels(raw["train-labels-idx1-ubyte"], TRAIN_COUNTS)
    check_labels(raw["t10k-labels-idx1-ubyte"], TEST_COUNTS)
    for name, data in raw.items():
        with gzip.GzipFile(os.path.join(args.out, name + ".gz"), "wb", mtime=0) as f:
            f.write(data)
    print(f"wrote {len(FILES)} files to {os.path.abspath(args.out)}")


if __name__ == "__main__":
    main()
