"""Convert the digits bundled with the `mnist` npm package into IDX files.

The npm package (https://www.npmjs.com/package/mnist) ships 10,000 MNIST
digits as per-class JSON arrays of intensities rounded to three decimals.
Rounding back with round(v * 255) recovers the original bytes. The samples
are interleaved with a fixed seed so the output is not sorted by class.

usage: python3 scripts/mnist_from_npm.py <path/to/package/src/digits> <out_dir>
"""

import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main() -> None:
    digits_dir, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    samples = []
    for digit in range(10):
        data = json.loads((digits_dir / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(len(data) // 784):
            pixels = bytes(round(v * 255) for v in data[i * 784 : (i + 1) * 784])
            samples.append((pixels, digit))
    random.Random(20180601).shuffle(samples)

    n = len(samples)
    images = struct.pack(">IIII", 0x00000803, n, 28, 28) + b"".join(p for p, _ in samples)
    labels = struct.pack(">II", 0x00000801, n) + bytes(d for _, d in samples)
    out_dir.mkdir(parents=True, exist_ok=True)
    # mtime=0 keeps the archives byte-reproducible
    with gzip.GzipFile(out_dir / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(images)
    with gzip.GzipFile(out_dir / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(labels)
    print(f"wrote {n} samples to {out_dir}")


if __name__ == "__main__":
    main()
