"""Synthetic volumetric dataset: one bright ellipsoid per volume on a noisy
background, with the ellipsoid mask as ground truth."""

from __future__ import annotations

import argparse
import json
import os

import numpy as np

from .svol import read_svol, write_svol

BACKGROUND = 0.2
FOREGROUND = 0.7
NOISE_SIGMA = 0.08


def make_volume(dims, rng):
    """One image/label pair: smooth-intensity ellipsoid plus Gaussian noise."""
    nx, ny, nz = dims
    cx = rng.uniform(0.3 * nx, 0.7 * nx)
    cy = rng.uniform(0.3 * ny, 0.7 * ny)
    cz = rng.uniform(0.35 * nz, 0.65 * nz)
    rx = rng.uniform(0.15 * nx, 0.3 * nx)
    ry = rng.uniform(0.15 * ny, 0.3 * ny)
    rz = rng.uniform(0.2 * nz, 0.35 * nz)
    x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    r2 = (((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2)
    mask = (r2 <= 1.0).astype(np.uint8)
    # intensity falls off smoothly toward the ellipsoid boundary
    image = np.full(dims, BACKGROUND, dtype=np.float64)
    image[mask == 1] = FOREGROUND + 0.15 * (1.0 - r2[mask == 1])
    image += rng.normal(0.0, NOISE_SIGMA, dims)
    return image.astype(np.float32), mask


def generate_dataset(n: int, dims, seed: int, out_dir) -> dict:
    """Write n image/label SVOL pairs plus a manifest; deterministic per seed."""
    dims = tuple(int(d) for d in dims)
    if any(d % 8 != 0 for d in dims[:2]) or dims[2] % 8 != 0:
        raise ValueError(f"dims must be divisible by 8: {dims}")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    volumes = []
    for i in range(n):
        image, mask = make_volume(dims, rng)
        assert mask.any(), "every volume must contain foreground"
        image_name = f"img_{i:03d}.svol"
        label_name = f"lab_{i:03d}.svol"
        write_svol(os.path.join(out_dir, image_name), image)
        write_svol(os.path.join(out_dir, label_name), mask)
        volumes.append({"image": image_name, "label": label_name})
    manifest = {"n": n, "dims": list(dims), "seed": seed, "volumes": volumes}
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest


def load_dataset(data_dir):
    """Returns (manifest, images, labels) with arrays in memory."""
    with open(os.path.join(data_dir, "dataset.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    images, labels = [], []
    for rec in manifest["volumes"]:
        img, _ = read_svol(os.path.join(data_dir, rec["image"]))
        lab, _ = read_svol(os.path.join(data_dir, rec["label"]))
        images.append(img)
        labels.append(lab)
    return manifest, images, labels


def kfold_indices(n_items: int, k: int, seed: int):
    """Seeded shuffle, contiguous near-equal validation chunks (same contract
    as the engine's fold assignment)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_items)
    base, rem = divmod(n_items, k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < rem else 0)
        val = sorted(int(v) for v in perm[start:start + size])
        train = sorted(int(v) for v in np.concatenate([perm[:start], perm[start + size:]]))
        folds.append((train, val))
        start += size
    return folds


def main(argv=None):
    ap = argparse.ArgumentParser(description="generate a synthetic ellipsoid dataset")
    ap.add_argument("--out", required=True)
    ap.add_argument("--n", type=int, default=20)
    ap.add_argument("--dims", default="64,64,16")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    dims = tuple(int(p) for p in args.dims.replace("x", ",").split(","))
    manifest = generate_dataset(args.n, dims, args.seed, args.out)
    print(json.dumps({"out": args.out, "n": manifest["n"], "dims": manifest["dims"]}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
