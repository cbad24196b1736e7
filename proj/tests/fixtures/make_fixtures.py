#!/usr/bin/env python3
"""Writes the binary fixtures used by test_data. Run from this directory."""

import os
import struct


def idx_images(path, images, rows, cols, magic=0x803, truncate=0):
    data = struct.pack(">IIII", magic, len(images), rows, cols) + b"".join(bytes(im) for im in images)
    with open(path, "wb") as f:
        f.write(data[: len(data) - truncate])


def idx_labels(path, labels, magic=0x801):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", magic, len(labels)) + bytes(labels))


def checker(rows, cols, phase=0):
    return [255 if (y + x + phase) % 2 else 0 for y in range(rows) for x in range(cols)]


def ramp(rows, cols):
    return [(3 * y + x) % 256 for y in range(rows) for x in range(cols)]


def cifar_record(label, shift=0):
    r = [(i + shift) % 256 for i in range(1024)]
    g = [0] * 1024
    b = [255] * 1024
    return bytes([label] + r + g + b)


def main():
    two = [checker(28, 28), ramp(28, 28)]
    idx_images("two-images-idx3-ubyte", two, 28, 28)
    idx_labels("two-labels-idx1-ubyte", [7, 2])
    idx_labels("three-labels-idx1-ubyte", [7, 2, 1])
    idx_images("bad-magic-idx3-ubyte", two, 28, 28, magic=0x802)
    idx_images("truncated-idx3-ubyte", two, 28, 28, truncate=5)

    with open("cifar-one.bin", "wb") as f:
        f.write(cifar_record(3))
    with open("cifar-bad-label.bin", "wb") as f:
        f.write(cifar_record(10))
    with open("cifar-short.bin", "wb") as f:
        f.write(cifar_record(1)[:-1])
    open("empty.bin", "wb").close()

    os.makedirs("fashion", exist_ok=True)
    idx_images("fashion/train-images-idx3-ubyte", [checker(28, 28, k % 2) for k in range(10)], 28, 28)
    idx_labels("fashion/train-labels-idx1-ubyte", list(range(10)))
    idx_images("fashion/t10k-images-idx3-ubyte", [ramp(28, 28), checker(28, 28)], 28, 28)
    idx_labels("fashion/t10k-labels-idx1-ubyte", [4, 5])

    os.makedirs("cifar10", exist_ok=True)
    for i in range(1, 6):
        with open(f"cifar10/data_batch_{i}.bin", "wb") as f:
            f.write(cifar_record(i, shift=i) + cifar_record(i + 1, shift=2 * i))
    with open("cifar10/test_batch.bin", "wb") as f:
        f.write(cifar_record(9, shift=7))


if __name__ == "__main__":
    main()
