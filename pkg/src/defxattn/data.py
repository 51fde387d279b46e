"""Synthetic registration pairs and raw volume IO.

Subjects share anatomy the way brain scans do: a dataset-level template
fixes a layout of Gaussian blobs, and each subject jitters the blob centres,
widths and intensities. Labels mark the blob that dominates each voxel. The fixed image is the subject warped by
a smooth random displacement whose Jacobian is checked to be positive
everywhere. The moving image is the unwarped subject, so the ground-truth
moving-to-fixed displacement is known.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import registration as reg
from .core import Tensor, no_record
from .errors import FormatError, GenerationError

MAX_TRIES = 100


@dataclass
class Pair:
    moving: np.ndarray      # (H, W, D) float32-valued
    fixed: np.ndarray
    labels_m: np.ndarray    # (H, W, D) int32
    labels_f: np.ndarray
    gt_field: np.ndarray    # (3, H, W, D)


def worker_count() -> int:
    try:
        n = int(os.environ.get("DEFXATTN_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)


def make_template(rng: np.random.Generator, extents, n_labels: int) -> dict:
    """Blob layout shared by all subjects of a dataset."""
    ext = np.asarray(extents, dtype=float)
    return {"centres": rng.uniform(0.25, 0.75, size=(n_labels, 3)) * (ext - 1),
            "sigmas": rng.uniform(0.09, 0.16, size=(n_labels, 3)) * ext}


def _subject(rng: np.random.Generator, extents, template: dict):
    grid = reg.identity_grid(extents)
    ext = np.asarray(extents, dtype=float)
    n_labels = len(template["centres"])
    centres = template["centres"] + rng.normal(scale=0.03, size=(n_labels, 3)) * ext
    sigmas = template["sigmas"] * rng.uniform(0.9, 1.1, size=(n_labels, 3))
    responses = np.stack([np.exp(-0.5 * (((grid - c) / s) ** 2).sum(axis=-1))
                          for c, s in zip(centres, sigmas)])
    owner = responses.argmax(axis=0)
    labels = np.where(responses.max(axis=0) > 0.35, owner + 1, 0).astype(np.int32)
    levels = rng.uniform(0.3, 1.0, size=n_labels)
    image = np.tensordot(levels, responses, axes=1)
    image = image + 0.03 * gaussian_filter(rng.normal(size=extents), 1.0)
    image = (image - image.min()) / (image.max() - image.min())
    return image, labels


def _smooth_field(rng: np.random.Generator, extents, max_warp: float, sigma: float) -> np.ndarray:
    """Coarse random control values, upsampled and Gaussian smoothed, scaled to peak ``max_warp``."""
    cell = max(1, int(round(sigma)))
    coarse_shape = tuple(-(-n // cell) for n in extents)
    comps = []
    for _ in range(3):
        coarse = rng.uniform(-1.0, 1.0, size=coarse_shape)
        fine = np.kron(coarse, np.ones((cell,) * 3))[tuple(slice(0, n) for n in extents)]
        comps.append(gaussian_filter(fine, sigma, mode="nearest"))
    raw = np.stack(comps)
    peak = np.abs(raw).max()
    return raw * (max_warp / peak) if peak > 0 else np.zeros_like(raw)


def draw_field(rng: np.random.Generator, extents, max_warp: float, field_sigma: float) -> np.ndarray:
    """A smooth displacement with positive Jacobian everywhere, by rejection."""
    extents = tuple(int(e) for e in extents)
    if max_warp == 0:
        return np.zeros((3,) + extents)
    for _ in range(MAX_TRIES):
        u = _smooth_field(rng, extents, max_warp, field_sigma)
        if np.all(reg.jacobian_map(u) > 0):
            return u.astype(np.float32).astype(np.float64)
    raise GenerationError(f"no fold-free field with max_warp={max_warp} after {MAX_TRIES} tries")


def warp_pair(moving: np.ndarray, labels: np.ndarray, u: np.ndarray, multimodal: bool = False) -> Pair:
    with no_record():
        fixed = reg.warp_trilinear(Tensor(moving[None]), Tensor(u)).data[0]
    labels_f = reg.warp_nearest(labels, u).astype(np.int32)
    if multimodal:
        # contrast change: monotone squash, then inverted
        fixed = 1.0 - np.sqrt(np.clip(fixed, 0.0, None))
    return Pair(moving, fixed.astype(np.float32).astype(np.float64), labels, labels_f, u)


def make_pair(seed_seq: np.random.SeedSequence, extents, template: dict, max_warp: float,
              field_sigma: float = 3.0, multimodal: bool = False) -> Pair:
    rng = np.random.default_rng(seed_seq)
    extents = tuple(int(e) for e in extents)
    image, labels = _subject(rng, extents, template)
    image = image.astype(np.float32).astype(np.float64)
    return warp_pair(image, labels, draw_field(rng, extents, max_warp, field_sigma), multimodal)


def synth_dataset(seed: int, n_pairs: int, extents, n_labels: int = 4, max_warp: float = 3.0,
                  multimodal: bool = False, field_sigma: float = 3.0,
                  out_dir: str | None = None) -> list[Pair]:
    """Generate ``n_pairs`` pairs; each pair draws from its own child of the master seed."""
    *children, tmpl_seq = np.random.SeedSequence(seed).spawn(n_pairs + 1)
    template = make_template(np.random.default_rng(tmpl_seq), extents, n_labels)

    def one(ss):
        return make_pair(ss, extents, template, max_warp, field_sigma, multimodal)

    workers = min(worker_count(), max(1, n_pairs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            pairs = list(pool.map(one, children))
    else:
        pairs = [one(ss) for ss in children]
    if out_dir is not None:
        save_dataset(pairs, out_dir, dict(seed=seed, n_pairs=n_pairs, extents=",".join(map(str, extents)),
                                          n_labels=n_labels, max_warp=max_warp, field_sigma=field_sigma,
                                          multimodal=str(multimodal).lower()))
    return pairs


# ---------------------------------------------------------------------------
# raw volume IO

_DTYPES = {"float32": "<f4", "int32": "<i4"}


def write_volume(path: str, array: np.ndarray, dtype: str = "float32") -> None:
    """Raw little-endian payload plus a ``<path>.hdr`` text sidecar."""
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported volume dtype {dtype!r}")
    arr = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())
    with open(path + ".hdr", "w") as fh:
        fh.write(f"extents={','.join(str(n) for n in arr.shape)}\ndtype={dtype}\nendian=little\n")


def read_volume(path: str) -> np.ndarray:
    try:
        with open(path + ".hdr") as fh:
            meta = dict(line.strip().split("=", 1) for line in fh if "=" in line)
        shape = tuple(int(n) for n in meta["extents"].split(","))
        dtype = _DTYPES[meta["dtype"]]
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"bad or missing header for {path}: {exc}") from None
    with open(path, "rb") as fh:
        raw = fh.read()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return arr.astype(np.float64) if dtype == "<f4" else arr.astype(np.int32)


def save_dataset(pairs: list[Pair], out_dir: str, meta: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for i, p in enumerate(pairs):
        stem = os.path.join(out_dir, f"pair{i:03d}")
        write_volume(f"{stem}_moving.raw", p.moving)
        write_volume(f"{stem}_fixed.raw", p.fixed)
        write_volume(f"{stem}_labels_m.raw", p.labels_m, "int32")
        write_volume(f"{stem}_labels_f.raw", p.labels_f, "int32")
        write_volume(f"{stem}_gt_field.raw", p.gt_field)
    with open(os.path.join(out_dir, "dataset.txt"), "w") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"{k}={v}\n")
        fh.write(f"pairs={len(pairs)}\n")


def load_dataset(data_dir: str) -> list[Pair]:
    manifest = os.path.join(data_dir, "dataset.txt")
    try:
        with open(manifest) as fh:
            meta = dict(line.strip().split("=", 1) for line in fh if "=" in line)
        n = int(meta["pairs"])
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read dataset manifest {manifest}: {exc}") from None
    pairs = []
    for i in range(n):
        stem = os.path.join(data_dir, f"pair{i:03d}")
        pairs.append(Pair(read_volume(f"{stem}_moving.raw"), read_volume(f"{stem}_fixed.raw"),
                          read_volume(f"{stem}_labels_m.raw"), read_volume(f"{stem}_labels_f.raw"),
                          read_volume(f"{stem}_gt_field.raw")))
    return pairs
