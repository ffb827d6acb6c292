#!/usr/bin/env python3
"""Materialize the synthetic toy dataset as PNG files plus manifest and oracle.

Writes <out>/images/*.png, <out>/manifest.csv, and <out>/oracle.bin (linear
weights loadable with the oracle spec ``linear:<out>/oracle.bin``). Useful for
exercising the manifest code path and the eval/bounds commands without any
exported real model.
"""

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from uap import synthetic_dataset
from uap.oracle import save_linear_oracle


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("toyset"))
    parser.add_argument("--num-classes", type=int, default=3)
    parser.add_argument("--n", type=int, default=256)
    parser.add_argument("--image-size", type=int, default=16)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    source, oracle = synthetic_dataset(
        args.num_classes, args.n, args.image_size, seed=args.seed
    )
    (args.out / "images").mkdir(parents=True, exist_ok=True)
    rows = ["path,label"]
    for i, path in enumerate(source.paths):
        arr = np.clip(np.rint(source.images01[i] * 255), 0, 255).astype(np.uint8)
        name = f"images/{i:04d}.png"
        Image.fromarray(arr.transpose(1, 2, 0)).save(args.out / name)
        rows.append(f"{name},{source.labels[path]}")
    (args.out / "manifest.csv").write_text("\n".join(rows) + "\n")
    save_linear_oracle(oracle, args.out / "oracle.bin")
    print(f"{args.n} images, manifest.csv, and oracle.bin written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
