"""Build gzipped IDX files from the digits shipped in the npm ``mnist`` package.

The npm package (cazala/mnist 1.1.0) carries 10,000 MNIST digits as JSON
arrays of pixel intensities rounded to three decimals.  Rounding back to
bytes is exact because every stored value is round(p / 255, 3).

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads(Path(src, f"{digit}.json").read_text())["data"])
        pix = np.rint(flat * 255).astype(np.uint8).reshape(-1, 28, 28)
        if not np.allclose(np.round(pix / 255, 3), flat.reshape(-1, 28, 28)):
            raise SystemExit(f"digit {digit}: pixel values do not round-trip")
        images.append(pix)
        labels.append(np.full(len(pix), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(0).permutation(len(labels))
    images, labels = images[order], labels[order]

    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "t10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(dst / "t10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.tobytes())
    print(f"wrote {len(labels)} digits to {dst}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
