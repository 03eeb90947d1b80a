#!/usr/bin/env python3
# Copyright 2026 The CPS Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Writes the sklearn 8x8 digits as MNIST-style IDX files (stratified 80/20 split)."""

import argparse
import pathlib
import struct

import numpy as np
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape)
    path.write_bytes(header + array.tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", type=pathlib.Path, nargs="?", default=pathlib.Path(__file__).parent.parent / "tests" / "data")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    digits = load_digits()
    images = np.rint(digits.images * (255.0 / 16.0)).astype(np.uint8)  # 0..16 -> 0..255
    x_tr, x_te, y_tr, y_te = train_test_split(
        images, digits.target, test_size=0.2, stratify=digits.target, random_state=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "digits-train-images.idx3-ubyte", x_tr)
    write_idx(args.out / "digits-train-labels.idx1-ubyte", y_tr)
    write_idx(args.out / "digits-test-images.idx3-ubyte", x_te)
    write_idx(args.out / "digits-test-labels.idx1-ubyte", y_te)
    print(f"wrote {len(y_tr)} train / {len(y_te)} test digits to {args.out}")


if __name__ == "__main__":
    main()
