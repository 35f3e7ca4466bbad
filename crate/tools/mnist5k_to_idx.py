#!/usr/bin/env python3
"""Convert the 5000-sample MNIST subset shipped inside the mlxtend wheel to
gzipped IDX files (the same layout as the original MNIST distribution).

    pip download --no-deps mlxtend -d /tmp/mlx
    python3 tools/mnist5k_to_idx.py /tmp/mlx/mlxtend-*.whl data/mnist5k
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path


def main() -> None:
    wheel, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = gzip.decompress(raw).decode().strip().split("\n")

    pixels = bytearray()
    labels = bytearray()
    for row in rows:
        values = [int(float(v)) for v in row.split(",")]
        assert len(values) == 785
        pixels.extend(values[:-1])
        labels.append(values[-1])

    n = len(rows)
    images = struct.pack(">IIII", 0x00000803, n, 28, 28) + bytes(pixels)
    label_file = struct.pack(">II", 0x00000801, n) + bytes(labels)
    # mtime=0 keeps the archives byte-stable across regenerations.
    with open(out_dir / "images-idx3-ubyte.gz", "wb") as f:
        f.write(gzip.compress(images, mtime=0))
    with open(out_dir / "labels-idx1-ubyte.gz", "wb") as f:
        f.write(gzip.compress(label_file, mtime=0))
    print(f"wrote {n} samples to {out_dir}")


if __name__ == "__main__":
    main()
