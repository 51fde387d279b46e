"""Windowed cross-attention on 3D token grids.

Token fields are channel-last tensors of shape (H, W, D, C). Three attention
variants share one code path:

* fixed-window cross-attention: queries from the reference, keys and values
  from the base, both cut into the same rectangular windows;
* deformable window cross-attention (DW-MCA): each head samples its reference
  queries at ``p + offset`` where the offsets come from a small conv network
  applied to ``LN(x_b) + LN(x_r)``;
* expanded-window cross-attention: every base window attends to a search
  region ``alpha*h x beta*w x gamma*d`` around it (comparison kernel).
"""

from __future__ import annotations

import contextlib
import csv
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    ParameterStore,
    Tensor,
    conv3d,
    gelu,
    grid_sample_trilinear,
    layernorm,
    linear,
    matmul,
    softmax,
)
from .core.tensor import getitem, pad, reshape, roll, transpose
from .errors import ConfigError, ShapeError

MASK_VALUE = -1e9

_flop_counter: dict | None = None
_sampling_records: list | None = None
_sampling_tag: dict = {}


# ---------------------------------------------------------------------------
# window layout

@dataclass(frozen=True, eq=False)
class WindowLayout:
    grid: tuple[int, int, int]
    window: tuple[int, int, int]
    shift: tuple[int, int, int]
    padded: tuple[int, int, int]
    base_coords: np.ndarray        # (n_windows, N_b, 3), padded frame
    pad_mask: np.ndarray           # (n_windows, N_b), True on padding slots
    attn_mask: np.ndarray | None   # (n_windows, N_b, N_b) additive, or None

    @property
    def n_windows(self) -> int:
        return self.base_coords.shape[0]

    @property
    def window_volume(self) -> int:
        return self.window[0] * self.window[1] * self.window[2]

    @property
    def has_padding(self) -> bool:
        return self.padded != self.grid


def _partition_np(a: np.ndarray, window) -> np.ndarray:
    H, W, D = a.shape[:3]
    h, w, d = window
    rest = a.shape[3:]
    a = a.reshape((H // h, h, W // w, w, D // d, d) + rest)
    a = a.transpose((0, 2, 4, 1, 3, 5) + tuple(range(6, 6 + len(rest))))
    return a.reshape((-1, h * w * d) + rest)


def make_layout(grid: Sequence[int], window: Sequence[int],
                shift: Sequence[int] = (0, 0, 0)) -> WindowLayout:
    grid = tuple(int(g) for g in grid)
    window = tuple(int(w) for w in window)
    shift = tuple(int(s) for s in shift)
    if len(grid) != 3 or len(window) != 3 or len(shift) != 3:
        raise ConfigError("grid, window and shift need three extents each")
    if any(w < 1 or w > g for w, g in zip(window, grid)):
        raise ConfigError(f"window {window} must fit inside the token grid {grid}")
    if any(not 0 <= s < w for s, w in zip(shift, window)):
        raise ConfigError(f"shift {shift} must satisfy 0 <= shift < window {window}")
    padded = tuple(-(-g // w) * w for g, w in zip(grid, window))

    idx = np.stack(np.meshgrid(*[np.arange(n) for n in padded], indexing="ij"), axis=-1)
    base_coords = _partition_np(idx.astype(np.float64), window)

    is_pad = np.zeros(padded, dtype=bool)
    is_pad[grid[0]:, :, :] = True
    is_pad[:, grid[1]:, :] = True
    is_pad[:, :, grid[2]:] = True
    is_pad = np.roll(is_pad, tuple(-s for s in shift), axis=(0, 1, 2))
    pad_mask = _partition_np(is_pad, window)

    mask = None
    if any(shift):
        region = np.zeros(padded, dtype=np.int64)
        label = 0
        bounds = []
        for n, w, s in zip(padded, window, shift):
            bounds.append([(0, n - w), (n - w, n - s), (n - s, n)] if s else [(0, n)])
        for a0, a1 in bounds[0]:
            for b0, b1 in bounds[1]:
                for c0, c1 in bounds[2]:
                    region[a0:a1, b0:b1, c0:c1] = label
                    label += 1
        rw = _partition_np(region, window)
        mask = np.where(rw[:, :, None] != rw[:, None, :], MASK_VALUE, 0.0)
    if pad_mask.any():
        key_mask = np.where(pad_mask[:, None, :], MASK_VALUE, 0.0)
        key_mask = np.broadcast_to(key_mask, (pad_mask.shape[0],) + (pad_mask.shape[1],) * 2)
        mask = key_mask.copy() if mask is None else np.minimum(mask, key_mask)
    return WindowLayout(grid, window, shift, padded, base_coords, pad_mask, mask)


def _pad_to(x: Tensor, padded) -> Tensor:
    if x.shape[:3] == tuple(padded):
        return x
    if any(p < s for p, s in zip(padded, x.shape[:3])):
        raise ShapeError(f"field grid {x.shape[:3]} larger than layout padded grid {padded}")
    widths = [(0, p - s) for p, s in zip(padded, x.shape[:3])] + [(0, 0)] * (x.ndim - 3)
    return pad(x, widths)


def window_partition(x: Tensor, layout: WindowLayout) -> Tensor:
    """(H, W, D, C) -> (n_windows, N_b, C), zero padded to the layout grid."""
    if x.ndim != 4:
        raise ShapeError(f"window_partition expects (H,W,D,C), got {x.shape}")
    x = _pad_to(x, layout.padded)
    H, W, D, C = x.shape
    h, w, d = layout.window
    x = reshape(x, (H // h, h, W // w, w, D // d, d, C))
    x = transpose(x, (0, 2, 4, 1, 3, 5, 6))
    return reshape(x, (layout.n_windows, h * w * d, C))


def window_reverse(windows: Tensor, layout: WindowLayout, crop: bool = True) -> Tensor:
    """Inverse of :func:`window_partition`; ``crop`` removes the padding."""
    nW, N, C = windows.shape
    if nW != layout.n_windows or N != layout.window_volume:
        raise ShapeError(f"windows {windows.shape} do not match layout "
                         f"({layout.n_windows} windows of {layout.window_volume})")
    H, W, D = layout.padded
    h, w, d = layout.window
    x = reshape(windows, (H // h, W // w, D // d, h, w, d, C))
    x = transpose(x, (0, 3, 1, 4, 2, 5, 6))
    x = reshape(x, (H, W, D, C))
    if crop and layout.has_padding:
        g = layout.grid
        x = getitem(x, (slice(0, g[0]), slice(0, g[1]), slice(0, g[2])))
    return x


def cyclic_shift(x: Tensor, shifts: Sequence[int], direction: str = "forward") -> Tensor:
    """Circular roll of the grid axes; ``forward`` moves content towards the origin."""
    if direction not in ("forward", "inverse"):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    sign = -1 if direction == "forward" else 1
    amounts = [sign * (int(s) % n) for s, n in zip(shifts, x.shape[:3])]
    return roll(x, amounts, (0, 1, 2))


# ---------------------------------------------------------------------------
# attention kernel

@contextlib.contextmanager
def count_attention_flops():
    """Count multiply-adds spent in attention scores and attention-times-values."""
    global _flop_counter
    saved = _flop_counter
    _flop_counter = {"scores": 0, "av": 0}
    try:
        yield _flop_counter
    finally:
        _flop_counter = saved


def scaled_dot_product_attention(q, k, v, mask: np.ndarray | None = None,
                                 bias: Tensor | None = None, return_weights: bool = False):
    """softmax(q k^T / sqrt(D_k) + bias + mask) v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise ShapeError(f"head dims differ: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"incompatible q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    Dk = q.shape[-1]
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    scores = scores * (1.0 / math.sqrt(Dk))
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        scores = scores + Tensor(np.broadcast_to(mask, scores.shape))
    attn = softmax(scores, axis=-1)
    out = matmul(attn, v)
    if _flop_counter is not None:
        batch = int(np.prod(q.shape[:-2]))
        _flop_counter["scores"] += batch * q.shape[-2] * k.shape[-2] * Dk
        _flop_counter["av"] += batch * q.shape[-2] * k.shape[-2] * Dk
    return (out, attn) if return_weights else out


# ---------------------------------------------------------------------------
# parameters

@dataclass
class AttentionParams:
    n_heads: int
    norm_b_gamma: Tensor
    norm_b_beta: Tensor
    norm_r_gamma: Tensor
    norm_r_beta: Tensor
    u_q: Tensor
    u_k: Tensor
    u_v: Tensor
    proj_w: Tensor
    proj_b: Tensor
    offset_dw_kernel: Tensor
    offset_dw_bias: Tensor
    offset_pw_weight: Tensor
    offset_pw_bias: Tensor
    norm_mlp_gamma: Tensor
    norm_mlp_beta: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    rel_bias_table: Tensor | None = None

    @property
    def channels(self) -> int:
        return self.u_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.n_heads

    @property
    def offset_kernel(self) -> int:
        return self.offset_dw_kernel.shape[-1]

    @classmethod
    def from_store(cls, store, prefix: str, n_heads: int) -> "AttentionParams":
        kwargs = {}
        for f in cls.__dataclass_fields__:
            if f == "n_heads":
                continue
            key = f"{prefix}.{f}"
            if key in store:
                kwargs[f] = store[key]
            elif f != "rel_bias_table":
                raise KeyError(f"missing parameter {key}")
        params = cls(n_heads=n_heads, **kwargs)
        if params.channels % n_heads:
            raise ConfigError(f"channels {params.channels} not divisible by {n_heads} heads")
        return params


def init_attention_params(store: ParameterStore, prefix: str, channels: int, n_heads: int,
                          rng: np.random.Generator, offset_kernel: int = 5, mlp_ratio: int = 4,
                          rel_pos_window: Sequence[int] | None = None) -> AttentionParams:
    """Register one block's parameters; the offset pointwise layer starts at zero."""
    C = channels
    if C % n_heads:
        raise ConfigError(f"channels {C} not divisible by {n_heads} heads")
    hidden = mlp_ratio * C

    def dense(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    m = offset_kernel
    store.add(f"{prefix}.norm_b_gamma", np.ones(C))
    store.add(f"{prefix}.norm_b_beta", np.zeros(C))
    store.add(f"{prefix}.norm_r_gamma", np.ones(C))
    store.add(f"{prefix}.norm_r_beta", np.zeros(C))
    store.add(f"{prefix}.u_q", dense(C, C))
    store.add(f"{prefix}.u_k", dense(C, C))
    store.add(f"{prefix}.u_v", dense(C, C))
    store.add(f"{prefix}.proj_w", dense(C, C))
    store.add(f"{prefix}.proj_b", np.zeros(C))
    store.add(f"{prefix}.offset_dw_kernel", rng.normal(0.0, 1.0 / math.sqrt(m ** 3), size=(C, 1, m, m, m)))
    store.add(f"{prefix}.offset_dw_bias", np.zeros(C))
    store.add(f"{prefix}.offset_pw_weight", np.zeros((C, 3 * n_heads)))
    store.add(f"{prefix}.offset_pw_bias", np.zeros(3 * n_heads))
    store.add(f"{prefix}.norm_mlp_gamma", np.ones(C))
    store.add(f"{prefix}.norm_mlp_beta", np.zeros(C))
    store.add(f"{prefix}.fc1_w", dense(C, hidden))
    store.add(f"{prefix}.fc1_b", np.zeros(hidden))
    store.add(f"{prefix}.fc2_w", dense(hidden, C) * 0.5)
    store.add(f"{prefix}.fc2_b", np.zeros(C))
    if rel_pos_window is not None:
        h, w, d = rel_pos_window
        store.add(f"{prefix}.rel_bias_table", np.zeros((n_heads, (2 * h - 1) * (2 * w - 1) * (2 * d - 1))))
    return AttentionParams.from_store(store, prefix, n_heads)


def relative_position_index(window: Sequence[int]) -> np.ndarray:
    h, w, d = window
    coords = np.stack(np.meshgrid(np.arange(h), np.arange(w), np.arange(d), indexing="ij")).reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + np.array([h - 1, w - 1, d - 1])[:, None, None]
    return (rel[0] * (2 * w - 1) + rel[1]) * (2 * d - 1) + rel[2]


# ---------------------------------------------------------------------------
# offsets and deformable sampling

def offset_network_forward(x_b: Tensor, x_r: Tensor, params: AttentionParams) -> Tensor:
    """Depthwise m^3 conv, GELU, pointwise conv on ``x_b + x_r``; returns (H, W, D, 3*n_heads)."""
    if x_b.shape != x_r.shape:
        raise ShapeError(f"base {x_b.shape} and reference {x_r.shape} grids differ")
    s = x_b + x_r
    m = params.offset_kernel
    hidden = conv3d(transpose(s, (3, 0, 1, 2)), params.offset_dw_kernel, params.offset_dw_bias,
                    pad=m // 2, groups=s.shape[-1])
    hidden = transpose(gelu(hidden), (1, 2, 3, 0))
    return linear(hidden, params.offset_pw_weight, params.offset_pw_bias)


def _split_heads(windows: Tensor, n_heads: int) -> Tensor:
    nW, N, C = windows.shape
    return transpose(reshape(windows, (nW, N, n_heads, C // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    nW, nh, N, Dk = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (nW, N, nh * Dk))


def sampling_coords(offsets: Tensor, layout: WindowLayout, n_heads: int) -> Tensor:
    """p + offset per head, shape (n_heads, n_windows, N_b, 3); ``offsets`` in the padded frame."""
    ow = window_partition(offsets, layout)                  # (nW, N_b, 3*nh)
    nW, N, _ = ow.shape
    ow = transpose(reshape(ow, (nW, N, n_heads, 3)), (2, 0, 1, 3))
    return ow + Tensor(layout.base_coords)


def deformable_window_sample(x_r: Tensor, offsets: Tensor, layout: WindowLayout, head: int,
                             n_heads: int) -> Tensor:
    """Windows of head ``head``'s channels of ``x_r`` sampled at p + offset.

    Both fields are taken in the layout's padded frame (padded with zeros if
    given at grid size). Returns (n_windows, N_b, C // n_heads).
    """
    if x_r.shape[:3] not in (layout.grid, layout.padded) or offsets.shape[:3] != x_r.shape[:3]:
        raise ShapeError(f"field {x_r.shape} / offsets {offsets.shape} do not match layout grid {layout.grid}")
    if offsets.shape[-1] != 3 * n_heads:
        raise ShapeError(f"offsets need {3 * n_heads} channels, got {offsets.shape[-1]}")
    Dk = x_r.shape[-1] // n_heads
    field = _pad_to(x_r, layout.padded)
    field = getitem(field, (Ellipsis, slice(head * Dk, (head + 1) * Dk)))
    coords = getitem(sampling_coords(_pad_to(offsets, layout.padded), layout, n_heads), head)
    return grid_sample_trilinear(field, coords)


def _sample_heads(q_field: Tensor, offsets: Tensor, layout: WindowLayout, n_heads: int) -> Tensor:
    Hp, Wp, Dp, C = q_field.shape
    Dk = C // n_heads
    per_head = transpose(reshape(q_field, (Hp, Wp, Dp, n_heads, Dk)), (3, 0, 1, 2, 4))
    coords = sampling_coords(offsets, layout, n_heads)
    if _sampling_records is not None:
        _sampling_records.append(dict(_sampling_tag, coords=coords.data.copy()))
    sampled = grid_sample_trilinear(per_head, coords)      # (nh, nW, N_b, Dk)
    return transpose(sampled, (1, 0, 2, 3))


@contextlib.contextmanager
def record_sampling():
    """Collect the deformable sampling coordinates of every DW-MCA call."""
    global _sampling_records
    saved = _sampling_records
    _sampling_records = []
    try:
        yield _sampling_records
    finally:
        _sampling_records = saved


@contextlib.contextmanager
def sampling_tag(**tags):
    saved = dict(_sampling_tag)
    _sampling_tag.update(tags)
    try:
        yield
    finally:
        _sampling_tag.clear()
        _sampling_tag.update(saved)


def dump_sampling_grid(records, out_dir: str) -> list[str]:
    """Write one CSV per record with columns window_id, slot_id, head, x, y, z."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for n, rec in enumerate(records):
        tag = "_".join(f"{k}{rec[k]}" for k in ("stage", "block", "path") if k in rec) or f"call{n}"
        path = os.path.join(out_dir, f"sampling_grid_{tag}.csv")
        coords = rec["coords"]
        nh, nW, N, _ = coords.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["window_id", "slot_id", "head", "x", "y", "z"])
            for win in range(nW):
                for slot in range(N):
                    for head in range(nh):
                        x, y, z = coords[head, win, slot]
                        w.writerow([win, slot, head, repr(float(x)), repr(float(y)), repr(float(z))])
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# blocks

def _window_attention(xb_n: Tensor, xr_n: Tensor, params: AttentionParams, layout: WindowLayout,
                      offsets: Tensor | None = None, key_index: np.ndarray | None = None,
                      key_mask: np.ndarray | None = None) -> Tensor:
    nh = params.n_heads
    q = _pad_to(linear(xr_n, params.u_q), layout.padded)
    k = _pad_to(linear(xb_n, params.u_k), layout.padded)
    v = _pad_to(linear(xb_n, params.u_v), layout.padded)
    if any(layout.shift):
        q, k, v = (cyclic_shift(t, layout.shift) for t in (q, k, v))
        if offsets is not None:
            offsets = cyclic_shift(_pad_to(offsets, layout.padded), layout.shift)

    if key_index is None:
        kw = _split_heads(window_partition(k, layout), nh)
        vw = _split_heads(window_partition(v, layout), nh)
        mask = layout.attn_mask
    else:
        C = k.shape[-1]
        flat_k = reshape(k, (-1, C))
        flat_v = reshape(v, (-1, C))
        kw = _split_heads(getitem(flat_k, key_index), nh)
        vw = _split_heads(getitem(flat_v, key_index), nh)
        mask = None if key_mask is None else key_mask[:, None]

    if offsets is None:
        qw = _split_heads(window_partition(q, layout), nh)
    else:
        qw = _sample_heads(q, _pad_to(offsets, layout.padded), layout, nh)
    if mask is not None and mask.ndim == 3:
        mask = mask[:, None]

    bias = None
    if params.rel_bias_table is not None and key_index is None:
        idx = relative_position_index(layout.window)
        bias = getitem(params.rel_bias_table, (slice(None), idx))

    out = scaled_dot_product_attention(qw, kw, vw, mask=mask, bias=bias)
    out = window_reverse(_merge_heads(out), layout, crop=False)
    if any(layout.shift):
        out = cyclic_shift(out, layout.shift, "inverse")
    if layout.has_padding:
        g = layout.grid
        out = getitem(out, (slice(0, g[0]), slice(0, g[1]), slice(0, g[2])))
    return linear(out, params.proj_w, params.proj_b)


def _mlp(x: Tensor, params: AttentionParams) -> Tensor:
    h = layernorm(x, params.norm_mlp_gamma, params.norm_mlp_beta)
    h = gelu(linear(h, params.fc1_w, params.fc1_b))
    return linear(h, params.fc2_w, params.fc2_b)


def _check_pair(x_b: Tensor, x_r: Tensor, params: AttentionParams, layout: WindowLayout):
    if x_b.shape != x_r.shape:
        raise ShapeError(f"base {x_b.shape} and reference {x_r.shape} differ")
    if x_b.shape[:3] != layout.grid:
        raise ShapeError(f"token grid {x_b.shape[:3]} does not match layout grid {layout.grid}")
    C = x_b.shape[-1]
    if C != params.channels or C % params.n_heads:
        raise ConfigError(f"channels {C} incompatible with params ({params.channels} ch, {params.n_heads} heads)")


def cross_attention_block(x_b: Tensor, x_r: Tensor, params: AttentionParams, layout: WindowLayout,
                          deformable: bool = True) -> Tensor:
    """Pre-norm cross-attention block with residual MLP; output on the base grid."""
    _check_pair(x_b, x_r, params, layout)
    xb_n = layernorm(x_b, params.norm_b_gamma, params.norm_b_beta)
    xr_n = layernorm(x_r, params.norm_r_gamma, params.norm_r_beta)
    offsets = offset_network_forward(xb_n, xr_n, params) if deformable else None
    x = x_b + _window_attention(xb_n, xr_n, params, layout, offsets=offsets)
    return x + _mlp(x, params)


def dw_mca_block(x_b: Tensor, x_r: Tensor, params: AttentionParams, layout: WindowLayout) -> Tensor:
    """Deformable window-based multi-head cross-attention block."""
    return cross_attention_block(x_b, x_r, params, layout, deformable=True)


def fixed_window_ca_block(x_b: Tensor, x_r: Tensor, params: AttentionParams,
                          layout: WindowLayout) -> Tensor:
    return cross_attention_block(x_b, x_r, params, layout, deformable=False)


def search_window_index(layout: WindowLayout, factors: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Flat key indices (n_windows, N_s) of the border-clamped search region of each window.

    Also returns the matching padding-key mask (additive, (n_windows, 1, N_s)).
    """
    Hp, Wp, Dp = layout.padded
    h, w, d = layout.window
    starts = layout.base_coords[:, 0, :].astype(np.int64)
    axes_pos = []
    for ax, (ext, n, f) in enumerate(zip((h, w, d), (Hp, Wp, Dp), factors)):
        offs = np.arange(f * ext) - ((f - 1) * ext) // 2
        axes_pos.append(np.clip(starts[:, ax:ax + 1] + offs, 0, n - 1))
    px, py, pz = axes_pos
    idx = (px[:, :, None, None] * Wp + py[:, None, :, None]) * Dp + pz[:, None, None, :]
    idx = idx.reshape(layout.n_windows, -1)
    is_pad = np.zeros(layout.padded, dtype=bool)
    g = layout.grid
    is_pad[g[0]:], is_pad[:, g[1]:], is_pad[:, :, g[2]:] = True, True, True
    key_pad = is_pad.reshape(-1)[idx]
    mask = np.where(key_pad, MASK_VALUE, 0.0)[:, None, :] if key_pad.any() else None
    return idx, mask


def expanded_window_ca(x_b: Tensor, x_r: Tensor, params: AttentionParams, layout: WindowLayout,
                       alpha: int = 3, beta: int = 3, gamma: int = 3) -> Tensor:
    """Cross-attention of each base window against an enlarged search window (forward only)."""
    if min(alpha, beta, gamma) < 1:
        raise ConfigError(f"expansion factors must be >= 1, got {(alpha, beta, gamma)}")
    if any(layout.shift):
        raise ConfigError("expanded-window attention uses unshifted layouts")
    _check_pair(x_b, x_r, params, layout)
    idx, key_mask = search_window_index(layout, (alpha, beta, gamma))
    xb_n = layernorm(x_b, params.norm_b_gamma, params.norm_b_beta)
    xr_n = layernorm(x_r, params.norm_r_gamma, params.norm_r_beta)
    x = x_b + _window_attention(xb_n, xr_n, params, layout, key_index=idx, key_mask=key_mask)
    return x + _mlp(x, params)


def global_cross_attention(x_b: Tensor, x_r: Tensor, params: AttentionParams) -> Tensor:
    """Unwindowed cross-attention block (the whole grid is one window)."""
    layout = make_layout(x_b.shape[:3], x_b.shape[:3])
    return fixed_window_ca_block(x_b, x_r, params, layout)
