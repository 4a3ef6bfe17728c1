"""Voxel volumes: container, SVOL I/O, preprocessing, ensembling, metrics.

Grids are plain numpy arrays of shape (nx, ny, nz) with millimeter spacing
metadata. The SVOL container is a one-line JSON header followed by raw
little-endian voxels in x-fastest order; probability maps are one f32 SVOL
per class plus a sidecar index JSON.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

SVOL_MAGIC = "SVOL1"
_DTYPES = {"u8": np.uint8, "f32": np.float32}
_DTYPE_NAMES = {np.dtype(np.uint8): "u8", np.dtype(np.float32): "f32"}


class SvolError(Exception):
    """Malformed or unreadable volume file."""


class MetricUndefinedError(ValueError):
    """A metric is undefined for the given masks (e.g. empty mask)."""


@dataclass
class VoxelGrid:
    data: np.ndarray          # (nx, ny, nz)
    spacing: tuple            # (sx, sy, sz) in mm

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"grid must be 3-D, got shape {self.data.shape}")
        if self.data.dtype not in (np.uint8, np.float32):
            raise ValueError(f"dtype must be uint8 or float32, got {self.data.dtype}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals: {self.spacing}")

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def dtype_name(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]


@dataclass
class ProbabilityMap:
    """Per-class scalar grids; class values sum to 1 at every voxel."""

    class_grids: tuple

    def __post_init__(self):
        self.class_grids = tuple(self.class_grids)
        if len(self.class_grids) < 2:
            raise ValueError("probability map needs at least 2 classes")
        dims = self.class_grids[0].dims
        spacing = self.class_grids[0].spacing
        for g in self.class_grids:
            if g.data.dtype != np.float32:
                raise ValueError("probability maps must be f32")
            if g.dims != dims or g.spacing != spacing:
                raise ValueError("class grids must share dims and spacing")
        total = np.zeros(dims, dtype=np.float64)
        for g in self.class_grids:
            total += g.data
        if not np.all(np.abs(total - 1.0) <= 1e-4):
            worst = float(np.max(np.abs(total - 1.0)))
            raise ValueError(f"class probabilities must sum to 1 +- 1e-4 (worst {worst:.2e})")

    @property
    def n_classes(self) -> int:
        return len(self.class_grids)

    @property
    def dims(self) -> tuple:
        return self.class_grids[0].dims

    @property
    def spacing(self) -> tuple:
        return self.class_grids[0].spacing


# -- SVOL I/O ------------------------------------------------------------------

def write_volume(grid: VoxelGrid, path):
    if grid.data.size == 0:
        raise SvolError("refusing to write an empty (0-voxel) grid")
    header = json.dumps({
        "magic": SVOL_MAGIC,
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "dtype": grid.dtype_name,
    }, separators=(",", ":"))
    payload = np.ascontiguousarray(grid.data, dtype=grid.data.dtype)
    with open(path, "wb") as f:
        f.write(header.encode("utf-8") + b"\n")
        # x-fastest order == Fortran ravel of an (nx, ny, nz) array
        f.write(payload.astype(payload.dtype.newbyteorder("<")).tobytes(order="F"))


def read_volume(path) -> VoxelGrid:
    with open(path, "rb") as f:
        header_line = f.readline()
        if not header_line.endswith(b"\n"):
            raise SvolError(f"{path}: missing header line")
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SvolError(f"{path}: malformed header: {exc}") from exc
        if header.get("magic") != SVOL_MAGIC:
            raise SvolError(f"{path}: bad magic {header.get('magic')!r}")
        dims = header.get("dims")
        spacing = header.get("spacing")
        dtype_name = header.get("dtype")
        if dtype_name not in _DTYPES:
            raise SvolError(f"{path}: unknown dtype {dtype_name!r}")
        if not (isinstance(dims, list) and len(dims) == 3
                and all(isinstance(d, int) and d > 0 for d in dims)):
            raise SvolError(f"{path}: bad dims {dims!r}")
        if not (isinstance(spacing, list) and len(spacing) == 3):
            raise SvolError(f"{path}: bad spacing {spacing!r}")
        dtype = np.dtype(_DTYPES[dtype_name]).newbyteorder("<")
        n = dims[0] * dims[1] * dims[2]
        payload = f.read()
        if len(payload) != n * dtype.itemsize:
            raise SvolError(
                f"{path}: payload has {len(payload)} bytes, expected {n * dtype.itemsize}")
    flat = np.frombuffer(payload, dtype=dtype).astype(_DTYPES[dtype_name])
    data = flat.reshape(tuple(dims), order="F")
    return VoxelGrid(data=data, spacing=tuple(spacing))


def write_probability_map(pmap: ProbabilityMap, index_path):
    """C class SVOLs next to a sidecar index JSON listing them in class order."""
    index_path = os.fspath(index_path)
    base = index_path[:-5] if index_path.endswith(".json") else index_path
    files = []
    for c, g in enumerate(pmap.class_grids):
        fname = f"{os.path.basename(base)}.c{c}.svol"
        write_volume(g, os.path.join(os.path.dirname(index_path) or ".", fname))
        files.append(fname)
    with open(index_path, "w", encoding="utf-8") as f:
        json.dump({"classes": pmap.n_classes, "files": files}, f)
        f.write("\n")


def read_probability_map(index_path) -> ProbabilityMap:
    index_path = os.fspath(index_path)
    try:
        with open(index_path, "r", encoding="utf-8") as f:
            index = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise SvolError(f"{index_path}: cannot read probability-map index: {exc}") from exc
    files = index.get("files")
    if not isinstance(files, list) or len(files) < 2:
        raise SvolError(f"{index_path}: index must list >= 2 class files")
    root = os.path.dirname(index_path) or "."
    grids = [read_volume(os.path.join(root, fname)) for fname in files]
    return ProbabilityMap(class_grids=tuple(grids))


# -- preprocessing -------------------------------------------------------------

def normalize_intensity(grid: VoxelGrid) -> VoxelGrid:
    """Clip to mean +- 3 std over the whole volume, then rescale the clipped
    data to [0, 1]. A constant volume maps to all zeros."""
    if grid.data.dtype != np.float32:
        raise ValueError("normalize_intensity expects a scalar (f32) grid")
    x = grid.data.astype(np.float64)
    mu = float(x.mean())
    sigma = float(x.std())
    if sigma == 0.0:
        return VoxelGrid(np.zeros_like(grid.data), grid.spacing)
    clipped = np.clip(x, mu - 3.0 * sigma, mu + 3.0 * sigma)
    lo = float(clipped.min())
    hi = float(clipped.max())
    if hi == lo:
        return VoxelGrid(np.zeros_like(grid.data), grid.spacing)
    out = (clipped - lo) / (hi - lo)
    return VoxelGrid(out.astype(np.float32), grid.spacing)


def _axis_coords(n_src: int, s_src: float, n_tgt: int, s_tgt: float) -> np.ndarray:
    """Source index coordinate of each target voxel center along one axis.

    Voxel centers sit at (i + 1/2) * spacing from the shared volume corner."""
    j = np.arange(n_tgt, dtype=np.float64)
    return ((j + 0.5) * s_tgt) / s_src - 0.5


def resample_volume(grid: VoxelGrid, target_spacing, target_dims,
                    mode: str = "trilinear") -> VoxelGrid:
    """Resample onto a new grid by sampling at target voxel centers with edge
    clamping. Label (u8) grids must use nearest; nearest never introduces new
    label values."""
    if mode not in ("nearest", "trilinear"):
        raise ValueError(f"mode must be 'nearest' or 'trilinear', got {mode!r}")
    if mode == "trilinear" and grid.data.dtype == np.uint8:
        raise ValueError("trilinear resampling is not valid for label grids")
    target_spacing = tuple(float(s) for s in target_spacing)
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != 3 or any(d < 1 for d in target_dims):
        raise ValueError(f"target_dims must be three positive ints: {target_dims}")

    coords = [
        _axis_coords(grid.dims[a], grid.spacing[a], target_dims[a], target_spacing[a])
        for a in range(3)
    ]
    if mode == "nearest":
        idx = [
            np.clip(np.floor(u + 0.5), 0, grid.dims[a] - 1).astype(np.intp)
            for a, u in enumerate(coords)
        ]
        out = grid.data[np.ix_(*idx)]
        return VoxelGrid(out.copy(), target_spacing)

    src = grid.data.astype(np.float64)
    i0, i1, frac = [], [], []
    for a, u in enumerate(coords):
        uc = np.clip(u, 0.0, grid.dims[a] - 1.0)
        lo = np.floor(uc).astype(np.intp)
        lo = np.minimum(lo, grid.dims[a] - 1)
        hi = np.minimum(lo + 1, grid.dims[a] - 1)
        i0.append(lo)
        i1.append(hi)
        frac.append(uc - lo)
    out = np.zeros(target_dims, dtype=np.float64)
    for ax in (0, 1):
        wx = frac[0] if ax else 1.0 - frac[0]
        ix = i1[0] if ax else i0[0]
        for ay in (0, 1):
            wy = frac[1] if ay else 1.0 - frac[1]
            iy = i1[1] if ay else i0[1]
            for az in (0, 1):
                wz = frac[2] if az else 1.0 - frac[2]
                iz = i1[2] if az else i0[2]
                w = wx[:, None, None] * wy[None, :, None] * wz[None, None, :]
                out += w * src[np.ix_(ix, iy, iz)]
    return VoxelGrid(out.astype(np.float32), target_spacing)


# -- ensembling ----------------------------------------------------------------

def average_probability_maps(maps: list[ProbabilityMap]) -> ProbabilityMap:
    """Voxelwise arithmetic mean per class."""
    if not maps:
        raise ValueError("need at least one probability map")
    first = maps[0]
    for m in maps[1:]:
        if m.dims != first.dims or m.n_classes != first.n_classes:
            raise ValueError("probability maps must share dims and class count")
    grids = []
    for c in range(first.n_classes):
        acc = np.zeros(first.dims, dtype=np.float64)
        for m in maps:
            acc += m.class_grids[c].data
        grids.append(VoxelGrid((acc / len(maps)).astype(np.float32), first.spacing))
    return ProbabilityMap(class_grids=tuple(grids))


def argmax_labels(pmap: ProbabilityMap) -> VoxelGrid:
    """Per-voxel class of maximum probability, ties to the lowest class index."""
    stack = np.stack([g.data for g in pmap.class_grids], axis=0)
    labels = np.argmax(stack, axis=0).astype(np.uint8)
    return VoxelGrid(labels, pmap.spacing)


def majority_vote(segs: list[VoxelGrid], allow_even: bool = False) -> VoxelGrid:
    """Per-voxel modal label over the voters; ties resolve to the lowest label.

    An even voter count is rejected unless explicitly overridden, since binary
    ties would then be decided by the tie rule rather than a true majority."""
    if not segs:
        raise ValueError("need at least one segmentation")
    if len(segs) % 2 == 0 and not allow_even:
        raise ValueError("even number of voters; pass allow_even=True to override")
    dims = segs[0].dims
    for s in segs:
        if s.data.dtype != np.uint8:
            raise ValueError("majority_vote expects label (u8) grids")
        if s.dims != dims:
            raise ValueError(f"shape mismatch: {s.dims} vs {dims}")
    n_classes = int(max(int(s.data.max()) for s in segs)) + 1
    counts = np.zeros((n_classes,) + dims, dtype=np.int32)
    for s in segs:
        for c in range(n_classes):
            counts[c] += s.data == c
    winner = np.argmax(counts, axis=0).astype(np.uint8)  # argmax ties -> lowest
    return VoxelGrid(winner, segs[0].spacing)


# -- post-processing -------------------------------------------------------------

_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: np.ones((3, 3, 3), dtype=bool),
}


def keep_largest_component(seg: VoxelGrid, connectivity: int = 26) -> VoxelGrid:
    """Zero all foreground components except the largest; ties keep the
    component containing the lexicographically smallest (x, y, z) voxel."""
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    if seg.data.dtype != np.uint8 or int(seg.data.max(initial=0)) > 1:
        raise ValueError("keep_largest_component expects a binary (u8, 0/1) grid")
    mask = seg.data > 0
    if not mask.any():
        return VoxelGrid(np.zeros_like(seg.data), seg.spacing)
    labels, n = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    best = counts.max()
    candidates = np.flatnonzero(counts == best)
    if len(candidates) == 1:
        keep = candidates[0]
    else:
        # C-order ravel of an (nx, ny, nz) array enumerates voxels in
        # lexicographic (x, y, z) order
        flat = labels.ravel()
        first = np.flatnonzero(np.isin(flat, candidates))[0]
        keep = flat[first]
    out = (labels == keep).astype(np.uint8)
    return VoxelGrid(out, seg.spacing)


# -- metrics ---------------------------------------------------------------------

def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background face neighbor
    (out-of-volume counts as background)."""
    m = np.asarray(mask).astype(bool)
    interior = np.ones_like(m)
    for axis in range(3):
        for shift in (1, -1):
            nb = np.zeros_like(m)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if shift == 1:
                src[axis] = slice(0, -1)
                dst[axis] = slice(1, None)
            else:
                src[axis] = slice(1, None)
                dst[axis] = slice(0, -1)
            nb[tuple(dst)] = m[tuple(src)]
            interior &= nb
    return m & ~interior


def surface_distance_metrics(pred: VoxelGrid, truth: VoxelGrid,
                             spacing: tuple | None = None) -> tuple:
    """(hd95, abd) in mm between boundary voxel centers.

    hd95 is the max of the 95th percentiles (linear interpolation) of the two
    directed nearest-boundary distance distributions; abd is the mean of their
    means. Both directions enter symmetrically."""
    if pred.dims != truth.dims:
        raise ValueError(f"shape mismatch: {pred.dims} vs {truth.dims}")
    if spacing is None:
        if pred.spacing != truth.spacing:
            raise ValueError("grids disagree on spacing; pass spacing explicitly")
        spacing = pred.spacing
    p_mask = pred.data > 0
    t_mask = truth.data > 0
    if not p_mask.any() or not t_mask.any():
        raise MetricUndefinedError("surface distances are undefined for empty masks")
    sp = np.asarray(spacing, dtype=np.float64)
    p_pts = np.argwhere(boundary_mask(p_mask)) * sp
    t_pts = np.argwhere(boundary_mask(t_mask)) * sp
    d_pt = cKDTree(t_pts).query(p_pts)[0]
    d_tp = cKDTree(p_pts).query(t_pts)[0]
    hd95 = max(float(np.percentile(d_pt, 95, method="linear")),
               float(np.percentile(d_tp, 95, method="linear")))
    abd = (float(d_pt.mean()) + float(d_tp.mean())) / 2.0
    return hd95, abd


def arvd(pred: VoxelGrid, truth: VoxelGrid) -> float:
    """Absolute relative volume difference in percent of the truth volume."""
    v_truth = int(np.count_nonzero(truth.data))
    if v_truth == 0:
        raise MetricUndefinedError("aRVD is undefined for an empty truth mask")
    v_pred = int(np.count_nonzero(pred.data))
    return 100.0 * abs(v_pred - v_truth) / v_truth


# -- fold assignment --------------------------------------------------------------

def kfold_split(n_items: int, k: int, seed: int) -> list[tuple]:
    """Seeded shuffle, then contiguous partition into k near-equal validation
    sets; train indices are the sorted complement."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n_items:
        raise ValueError(f"k ({k}) exceeds n_items ({n_items})")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_items)
    base, rem = divmod(n_items, k)
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < rem else 0)
        val = np.sort(perm[start:start + size])
        train = np.sort(np.concatenate([perm[:start], perm[start + size:]]))
        folds.append((train.astype(int).tolist(), val.astype(int).tolist()))
        start += size
    return folds
