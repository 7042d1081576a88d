#!/usr/bin/env python3
"""Builds the MNIST subset used by the desk-scale runs.

The 5000-image balanced MNIST sample bundled with the mlxtend wheel is
converted to IDX files (the format of the original MNIST distribution).

    pip download --no-deps mlxtend -d /tmp/mlx
    python3 tools/fetch_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/
"""
import argparse
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("wheel", type=Path)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()

    with zipfile.ZipFile(args.wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))

    pixels = bytearray()
    labels = bytearray()
    for line in io.StringIO(raw.decode("ascii")):
        line = line.strip()
        if not line:
            continue
        values = [int(v) for v in line.split(",")]
        if len(values) != 785:
            print(f"unexpected row width {len(values)}", file=sys.stderr)
            return 1
        pixels.extend(values[:784])
        labels.append(values[784])

    n = len(labels)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / "mnist5k-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + bytes(pixels))
    (args.out_dir / "mnist5k-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + bytes(labels))
    print(f"wrote {n} images to {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
