"""Training and scoring of one candidate architecture on the synthetic set.

Documented conventions (the protocol delegates these to the worker):
- epochs are 1-based; epoch 0 is the untrained baseline, so e_max of a
  model that never improves is 0;
- DSC_Val is the mean of per-volume Dice scores over the fold's validation
  volumes (voxels pooled within a volume); DSC_Train likewise over a fixed
  subsample of training volumes;
- 2D training samples random slice batches; 3D training samples one random
  patch per training volume per epoch and validates full volumes by
  sliding window with overlap averaging;
- augmentation (2D): random rotation up to 10 degrees, scaling 0.9-1.1,
  translation up to 10%, horizontal flip; (3D): random in-plane flips.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .dataset import kfold_indices
from .model import build_network
from .plans import fetch_plan


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainSettings:
    batch_size: int = 8
    steps_per_epoch: int = 4
    val_slice_stride: int = 1
    train_eval_volumes: int = 2
    patch_3d: tuple = (32, 32, 16)
    n_folds: int = 5
    device: str = "cpu"
    augment: bool = True
    n_classes: int = 2
    engine_cmd: list | None = None


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-6):
    """1 - soft Dice of the foreground probability channel against a binary
    target; differentiable in probs."""
    p = probs[:, 1]
    t = target.float()
    inter = (p * t).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + t.sum() + eps)


def hard_dice(pred_mask: np.ndarray, truth: np.ndarray) -> float:
    p = pred_mask.astype(bool)
    t = truth.astype(bool)
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / denom)


# -- augmentation ---------------------------------------------------------------


def augment_batch_2d(images: torch.Tensor, masks: torch.Tensor, rng: np.random.Generator):
    """Per-sample affine (rotation, scale, translation) plus horizontal flip;
    bilinear for images, nearest for masks."""
    n = images.shape[0]
    angle = rng.uniform(-10.0, 10.0, n) * math.pi / 180.0
    scale = rng.uniform(0.9, 1.1, n)
    tx = rng.uniform(-0.1, 0.1, n)
    ty = rng.uniform(-0.1, 0.1, n)
    flip = rng.random(n) < 0.5

    theta = torch.zeros((n, 2, 3), dtype=torch.float32)
    for i in range(n):
        c, s = math.cos(angle[i]) / scale[i], math.sin(angle[i]) / scale[i]
        sign = -1.0 if flip[i] else 1.0
        theta[i, 0, 0] = c * sign
        theta[i, 0, 1] = -s
        theta[i, 1, 0] = s * sign
        theta[i, 1, 1] = c
        theta[i, 0, 2] = tx[i]
        theta[i, 1, 2] = ty[i]
    grid = torch.nn.functional.affine_grid(theta, list(images.shape), align_corners=False)
    out_img = torch.nn.functional.grid_sample(images, grid, mode="bilinear",
                                              padding_mode="zeros", align_corners=False)
    out_mask = torch.nn.functional.grid_sample(masks.float(), grid, mode="nearest",
                                               padding_mode="zeros", align_corners=False)
    return out_img, out_mask.squeeze(1)


def augment_batch_3d(images: torch.Tensor, masks: torch.Tensor, rng: np.random.Generator):
    """Random in-plane flips (x and y axes)."""
    for axis in (2, 3):
        if rng.random() < 0.5:
            images = torch.flip(images, dims=[axis])
            masks = torch.flip(masks, dims=[axis - 1])
    return images, masks


# -- inference --------------------------------------------------------------------


def predict_volume_2d(model, volume: np.ndarray, stride: int, batch_size: int):
    """Foreground mask over every stride-th z slice; returns (mask, z indices)."""
    zs = list(range(0, volume.shape[2], stride))
    preds = []
    with torch.no_grad():
        for start in range(0, len(zs), batch_size):
            chunk = zs[start:start + batch_size]
            batch = np.stack([volume[:, :, z] for z in chunk])[:, None]
            probs = model(torch.from_numpy(batch))
            preds.append((probs[:, 1] > 0.5).numpy())
    return np.concatenate(preds, axis=0), zs


def predict_volume_3d(model, volume: np.ndarray, patch: tuple, batch_size: int = 2):
    """Sliding-window foreground probabilities with half-patch stride and
    overlap averaging; returns the hard foreground mask."""
    dims = volume.shape
    patch = tuple(min(p, d) for p, d in zip(patch, dims))
    origins = []
    for axis in range(3):
        stride = max(1, patch[axis] // 2)
        starts = list(range(0, dims[axis] - patch[axis] + 1, stride))
        if starts[-1] != dims[axis] - patch[axis]:
            starts.append(dims[axis] - patch[axis])
        origins.append(starts)
    windows = [(x, y, z) for x in origins[0] for y in origins[1] for z in origins[2]]

    acc = np.zeros(dims, dtype=np.float64)
    cover = np.zeros(dims, dtype=np.float64)
    with torch.no_grad():
        for start in range(0, len(windows), batch_size):
            chunk = windows[start:start + batch_size]
            batch = np.stack([
                volume[x:x + patch[0], y:y + patch[1], z:z + patch[2]]
                for x, y, z in chunk
            ])[:, None]
            probs = model(torch.from_numpy(batch))[:, 1].numpy()
            for (x, y, z), p in zip(chunk, probs):
                acc[x:x + patch[0], y:y + patch[1], z:z + patch[2]] += p
                cover[x:x + patch[0], y:y + patch[1], z:z + patch[2]] += 1.0
    return (acc / np.maximum(cover, 1.0)) > 0.5


def _mean_volume_dice_2d(model, volumes, labels, indices, stride, batch_size):
    scores = []
    for i in indices:
        pred, zs = predict_volume_2d(model, volumes[i], stride, batch_size)
        truth = np.stack([labels[i][:, :, z] for z in zs])
        scores.append(hard_dice(pred, truth))
    return float(np.mean(scores))


def _mean_volume_dice_3d(model, volumes, labels, indices, patch):
    scores = []
    for i in indices:
        pred = predict_volume_3d(model, volumes[i], patch)
        scores.append(hard_dice(pred, labels[i]))
    return float(np.mean(scores))


# -- training ---------------------------------------------------------------------


def _slice_pool(volumes, labels, indices):
    imgs, masks = [], []
    for i in indices:
        for z in range(volumes[i].shape[2]):
            imgs.append(volumes[i][:, :, z])
            masks.append(labels[i][:, :, z])
    return np.stack(imgs), np.stack(masks)


def train_and_score(genome: dict, dim: str, budget_epochs: int, fold: int,
                    seed: int, data, settings: TrainSettings) -> dict:
    """Train up to budget_epochs and report fitness at the best-validation epoch."""
    manifest, volumes, labels = data
    n = len(volumes)
    folds = kfold_indices(n, settings.n_folds, seed=manifest["seed"])
    train_idx, val_idx = folds[fold % len(folds)]
    dims = tuple(manifest["dims"])

    if dim == "2d":
        input_shape = dims[:2]
    else:
        input_shape = tuple(min(p, d) for p, d in zip(settings.patch_3d, dims))
    plan = fetch_plan(genome, dim, input_shape, settings.n_classes,
                      settings.engine_cmd)
    param_count = plan["total_params"]

    # results must be a pure function of (genome, dim, budget, fold, seed):
    # seed weight init, sampling and dropout from the request, mixed with the
    # genome so distinct candidates do not share initializations
    mix = zlib.crc32(json.dumps(genome, sort_keys=True).encode("utf-8"))
    eff_seed = (seed * 1_000_003 + mix) % (2 ** 31)
    torch.manual_seed(eff_seed)
    rng = np.random.default_rng(eff_seed)
    model = build_network(plan)
    opt = torch.optim.Adam(model.parameters(), lr=genome["lr"])

    train_eval_idx = train_idx[:settings.train_eval_volumes]

    def evaluate():
        model.eval()
        if dim == "2d":
            val = _mean_volume_dice_2d(model, volumes, labels, val_idx,
                                       settings.val_slice_stride, settings.batch_size)
            trn = _mean_volume_dice_2d(model, volumes, labels, train_eval_idx,
                                       settings.val_slice_stride, settings.batch_size)
        else:
            patch = tuple(min(p, d) for p, d in zip(settings.patch_3d, dims))
            val = _mean_volume_dice_3d(model, volumes, labels, val_idx, patch)
            trn = _mean_volume_dice_3d(model, volumes, labels, train_eval_idx, patch)
        model.train()
        return trn, val

    if dim == "2d":
        pool_imgs, pool_masks = _slice_pool(volumes, labels, train_idx)

    history = [evaluate()]  # epoch 0: untrained baseline
    for _epoch in range(1, budget_epochs + 1):
        if dim == "2d":
            for _step in range(settings.steps_per_epoch):
                take = rng.integers(0, len(pool_imgs), settings.batch_size)
                imgs = torch.from_numpy(pool_imgs[take])[:, None]
                masks = torch.from_numpy(pool_masks[take])
                if settings.augment:
                    imgs, masks = augment_batch_2d(imgs, masks[:, None], rng)
                loss = _train_step(model, opt, imgs, masks)
        else:
            patch = tuple(min(p, d) for p, d in zip(settings.patch_3d, dims))
            batches = [
                _random_patch(volumes[i], labels[i], patch, rng) for i in train_idx
            ]
            loss = None
            for start in range(0, len(batches), settings.batch_size):
                chunk = batches[start:start + settings.batch_size]
                imgs = torch.from_numpy(np.stack([c[0] for c in chunk]))[:, None]
                masks = torch.from_numpy(np.stack([c[1] for c in chunk]))
                if settings.augment:
                    imgs, masks = augment_batch_3d(imgs, masks, rng)
                loss = _train_step(model, opt, imgs, masks)
        if loss is not None and not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at epoch {_epoch}")
        history.append(evaluate())

    val_scores = [v for _, v in history]
    e_max = int(np.argmax(val_scores))  # first occurrence of the maximum
    dsc_train, dsc_val = history[e_max]
    return {
        "dsc_train": max(0.0, min(1.0, dsc_train)),
        "dsc_val": max(0.0, min(1.0, dsc_val)),
        "e_max": e_max,
        "param_count": int(param_count),
    }


def _train_step(model, opt, imgs: torch.Tensor, masks: torch.Tensor) -> float:
    opt.zero_grad()
    probs = model(imgs)
    loss = soft_dice_loss(probs, masks)
    loss.backward()
    opt.step()
    return float(loss.detach())


def _random_patch(volume: np.ndarray, label: np.ndarray, patch: tuple,
                  rng: np.random.Generator):
    starts = [
        int(rng.integers(0, volume.shape[a] - patch[a] + 1)) for a in range(3)
    ]
    sl = tuple(slice(s, s + p) for s, p in zip(starts, patch))
    return volume[sl], label[sl]
