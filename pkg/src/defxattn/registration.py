"""Warping, unsupervised losses and deformation-quality metrics.

Displacement fields are (3, H, W, D) in voxel units with phi(x) = x + u(x).
Losses take and return tensors; metrics work on plain arrays.
"""

from __future__ import annotations

import csv
import math
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import Tensor, box_filter3d, getitem, grid_sample_trilinear, mean, tsum
from .core.tensor import as_tensor, reshape, transpose
from .errors import ConfigError, MetricError, ShapeError

NCC_EPS = 1e-5
DICE_EPS = 1e-5
LOGJ_CLAMP = 1e-9


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def identity_grid(extents) -> np.ndarray:
    """(H, W, D, 3) array of voxel coordinates."""
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in extents], indexing="ij"), axis=-1)


def _check_field(field, extents):
    if tuple(field.shape) != (3,) + tuple(extents):
        raise ShapeError(f"displacement field {tuple(field.shape)} does not match image extents {tuple(extents)}")


def warp_trilinear(image, field) -> Tensor:
    """Sample ``image`` (C, H, W, D) at x + u(x), border clamped; differentiable in both."""
    image, field = as_tensor(image), as_tensor(field)
    if image.ndim != 4:
        raise ShapeError(f"image must be (C,H,W,D), got {image.shape}")
    _check_field(field, image.shape[1:])
    coords = transpose(field, (1, 2, 3, 0)) + Tensor(identity_grid(image.shape[1:]))
    out = grid_sample_trilinear(transpose(image, (1, 2, 3, 0)), coords)
    return transpose(out, (3, 0, 1, 2))


def warp_nearest(labels, field) -> np.ndarray:
    """Nearest-neighbour warp of an integer label map (H, W, D)."""
    labels = np.asarray(labels)
    u = _data(field)
    _check_field(u, labels.shape)
    coords = identity_grid(labels.shape) + np.moveaxis(u, 0, -1)
    idx = []
    for ax, n in enumerate(labels.shape):
        c = np.clip(coords[..., ax], 0.0, n - 1.0)
        idx.append(np.floor(c + 0.5).astype(np.int64))
    return labels[tuple(idx)]


def one_hot(labels, label_ids: Sequence[int]) -> np.ndarray:
    labels = np.asarray(labels)
    return np.stack([(labels == l).astype(np.float64) for l in label_ids])


# ---------------------------------------------------------------------------
# losses

def ncc_loss(warped, fixed, window: int = 9) -> Tensor:
    """Negative mean squared local normalised cross-correlation, in [-1, 0]."""
    warped, fixed = as_tensor(warped), as_tensor(fixed)
    if warped.shape != fixed.shape:
        raise ShapeError(f"ncc_loss: {warped.shape} vs {fixed.shape}")
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"NCC window must be a positive odd integer, got {window}")
    I, J = warped, fixed
    # windows are cut at the volume border; each voxel uses its own in-volume count
    inv_n = Tensor(1.0 / box_filter3d(np.ones(I.shape), window).data)
    I_sum, J_sum = box_filter3d(I, window), box_filter3d(J, window)
    I2 = box_filter3d(I * I, window)
    J2 = box_filter3d(J * J, window)
    IJ = box_filter3d(I * J, window)
    cross = IJ - I_sum * J_sum * inv_n
    I_var = I2 - I_sum * I_sum * inv_n
    J_var = J2 - J_sum * J_sum * inv_n
    cc = cross * cross / (I_var * J_var + NCC_EPS)
    return -mean(cc)


def soft_dice_loss(warped_onehot, fixed_onehot) -> Tensor:
    """1 - mean over channels of the soft Dice; callers drop the background channel."""
    p, q = as_tensor(warped_onehot), as_tensor(fixed_onehot)
    if p.shape != q.shape:
        raise ShapeError(f"soft_dice_loss: label volumes {p.shape} vs {q.shape}")
    L = p.shape[0]
    flat_p, flat_q = reshape(p, (L, -1)), reshape(q, (L, -1))
    inter = tsum(flat_p * flat_q, axis=1)
    denom = tsum(flat_p, axis=1) + tsum(flat_q, axis=1)
    dice = (inter * 2.0 + DICE_EPS) / (denom + DICE_EPS)
    return 1.0 - mean(dice)


def _forward_diff(u: Tensor, comp: int, axis: int) -> Tensor:
    n = u.shape[axis + 1]
    hi = [comp] + [slice(None)] * 3
    lo = [comp] + [slice(None)] * 3
    hi[axis + 1] = slice(1, n)
    lo[axis + 1] = slice(0, n - 1)
    return getitem(u, tuple(hi)) - getitem(u, tuple(lo))


def diffusion_terms(field) -> np.ndarray:
    """(3, 3) matrix of mean squared forward differences, [component, axis]."""
    u = _data(field)
    out = np.zeros((3, 3))
    for c in range(3):
        for a in range(3):
            d = np.diff(u[c], axis=a)
            out[c, a] = (d * d).mean() if d.size else 0.0
    return out


def diffusion_regularizer(field) -> Tensor:
    """Mean over the nine (component, axis) pairs of the mean squared forward difference."""
    u = as_tensor(field)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ShapeError(f"displacement field must be (3,H,W,D), got {u.shape}")
    total = None
    for c in range(3):
        for a in range(3):
            if u.shape[a + 1] < 2:
                continue
            d = _forward_diff(u, c, a)
            term = mean(d * d)
            total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(()))
    return total * (1.0 / 9.0)


# ---------------------------------------------------------------------------
# Jacobian metrics

def jacobian_matrices(field) -> np.ndarray:
    """(H, W, D, 3, 3) central-difference Jacobians of phi, one-sided at the borders."""
    u = _data(field)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ShapeError(f"displacement field must be (3,H,W,D), got {u.shape}")
    if min(u.shape[1:]) < 3:
        raise ShapeError(f"Jacobian needs at least 3 voxels per axis, got {u.shape[1:]}")
    J = np.empty(u.shape[1:] + (3, 3))
    for i in range(3):
        grads = np.gradient(u[i], axis=(0, 1, 2))
        for j in range(3):
            J[..., i, j] = grads[j] + (1.0 if i == j else 0.0)
    return J


def jacobian_map(field) -> np.ndarray:
    return np.linalg.det(jacobian_matrices(field))


def _corner_jacobians(u: np.ndarray) -> np.ndarray:
    """(8, H, W, D) determinants from every forward/backward difference combination."""
    fwd, bwd = [], []
    for a in range(3):
        d = np.diff(u, axis=a + 1)
        last = np.take(d, [-1], axis=a + 1)
        first = np.take(d, [0], axis=a + 1)
        fwd.append(np.concatenate([d, last], axis=a + 1))
        bwd.append(np.concatenate([first, d], axis=a + 1))
    dets = []
    for cx in (fwd[0], bwd[0]):
        for cy in (fwd[1], bwd[1]):
            for cz in (fwd[2], bwd[2]):
                J = np.stack([cx, cy, cz], axis=-1)          # (3, H, W, D, 3): [comp, ..., axis]
                J = np.moveaxis(J, 0, -2) + np.eye(3)
                dets.append(np.linalg.det(J))
    return np.stack(dets)


def invertibility_metrics(field) -> dict[str, float]:
    """SDlogJ, percentage of non-positive determinants and non-diffeomorphic volume (%)."""
    u = _data(field)
    det = jacobian_map(u)
    logj = np.log(np.clip(det, LOGJ_CLAMP, None))
    corners = _corner_jacobians(u)
    ndv = np.maximum(0.0, -corners).mean(axis=0)
    return {
        "sdlogj": float(logj.std()),
        "pct_nonpositive": float(100.0 * np.count_nonzero(det <= 0) / det.size),
        "pct_ndv": float(100.0 * ndv.mean()),
    }


# ---------------------------------------------------------------------------
# overlap metrics

def dice_metric(a, b, labels: Iterable[int] | None = None) -> tuple[dict[int, float], float]:
    """Per-label hard Dice and their mean; labels absent from both maps are left out."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"dice_metric: {a.shape} vs {b.shape}")
    if labels is None:
        labels = sorted(set(np.unique(a).tolist()) | set(np.unique(b).tolist()) - {0})
    per = {}
    for l in labels:
        ma, mb = a == l, b == l
        total = int(ma.sum()) + int(mb.sum())
        per[int(l)] = float("nan") if total == 0 else 2.0 * int(np.logical_and(ma, mb).sum()) / total
    present = [v for v in per.values() if not math.isnan(v)]
    return per, (float(np.mean(present)) if present else float("nan"))


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Coordinates of mask voxels with a 6-neighbour outside the mask (or the volume)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for ax in range(3):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(mask & ~interior).astype(np.float64)


def hd95_metric(a, b, label: int) -> float:
    """Symmetric 95th-percentile surface distance in voxels."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"hd95_metric: {a.shape} vs {b.shape}")
    pa, pb = boundary_points(a == label), boundary_points(b == label)
    if len(pa) == 0 or len(pb) == 0:
        raise MetricError(f"label {label} is empty in {'the first' if len(pa) == 0 else 'the second'} map")
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


def mean_hd95(a, b, labels: Iterable[int]) -> float:
    """HD95 averaged over the labels present in both maps (NaN if none)."""
    vals = []
    for l in labels:
        if np.any(np.asarray(a) == l) and np.any(np.asarray(b) == l):
            vals.append(hd95_metric(a, b, l))
    return float(np.mean(vals)) if vals else float("nan")


METRIC_COLUMNS = ("pair_id", "dice_mean")
METRIC_TAIL = ("hd95", "sdlogj", "pct_nonpositive", "pct_ndv")


def metrics_header(labels: Sequence[int], extra: Sequence[str] = ()) -> list[str]:
    return list(METRIC_COLUMNS) + [f"dice_{l}" for l in labels] + list(METRIC_TAIL) + list(extra)


def write_metrics_csv(path: str, rows: Sequence[dict], labels: Sequence[int], extra: Sequence[str] = ()) -> None:
    header = metrics_header(labels, extra)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in header])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
