"""Rebuild the bundled MNIST subset as standard gzipped IDX files.

The source is the ``mnist`` npm package (v1.1.0), which ships 10,000 MNIST
digits as per-class JSON arrays of pixel/255 values rounded to 3 decimals.
Rounding ``v * 255`` recovers the original 8-bit pixel exactly.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python scripts/build_mnist_subset.py package/src/digits src/profe/_data/mnist
"""
from __future__ import annotations

import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main(src: str, dst: str) -> None:
    images, labels = [], []
    for digit in range(10):
        raw = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        pix = np.rint(np.asarray(raw, dtype=np.float64) * 255).astype(np.uint8)
        pix = pix.reshape(-1, 28, 28)
        images.append(pix)
        labels.append(np.full(len(pix), digit, dtype=np.uint8))
    x = np.concatenate(images)
    y = np.concatenate(labels)
    # interleave classes deterministically so the file is not class-sorted
    order = np.random.default_rng(20240501).permutation(len(y))
    x, y = x[order], y[order]

    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "t10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(x), 28, 28))
        f.write(x.tobytes())
    with gzip.GzipFile(out / "t10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(y)))
        f.write(y.tobytes())
    print(f"wrote {len(y)} samples to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
