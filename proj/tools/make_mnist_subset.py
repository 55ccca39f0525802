#!/usr/bin/env python3
"""Build an IDX-format MNIST subset from the digits bundled in the npm `mnist`
package (10000 samples, MIT licensed).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/

Writes train-{images,labels} (8000 samples) and t10k-{images,labels}
(2000 samples) in the standard big-endian IDX layout.
"""
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28
TRAIN = 8000


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    samples = []
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        for k in range(len(raw) // (SIDE * SIDE)):
            px = raw[k * SIDE * SIDE:(k + 1) * SIDE * SIDE]
            samples.append(([min(255, max(0, round(v * 255))) for v in px], digit))
    random.Random(20190101).shuffle(samples)
    dst.mkdir(parents=True, exist_ok=True)
    train, test = samples[:TRAIN], samples[TRAIN:]
    write_images(dst / "train-images-idx3-ubyte", [s[0] for s in train])
    write_labels(dst / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_images(dst / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_labels(dst / "t10k-labels-idx1-ubyte", [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {dst}")


if __name__ == "__main__":
    main()
