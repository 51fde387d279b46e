"""Registration network: dual cross-attention encoders and a conv decoder.

Volumes are channel-first tensors (1, H, W, D). Token fields inside the
encoder are channel-last (h, w, d, C). The model outputs a displacement
field u of shape (3, H, W, D) in voxel units; component i moves axis i.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import attention as attn
from .core import (
    ParameterStore,
    Tensor,
    concat,
    conv3d,
    layernorm,
    leaky_relu,
    linear,
    upsample2x,
)
from .core.tensor import as_tensor, getitem, pad, reshape, transpose
from .errors import ConfigError, ShapeError

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ConfigError(f"expected three extents, got {v!r}")
    return t


@dataclass(frozen=True)
class ModelConfig:
    image_size: Triple = (16, 16, 16)
    patch_size: int = 2
    embed_dim: int = 8
    depths: tuple[int, ...] = (2, 2)
    n_heads: tuple[int, ...] = (2, 2)
    window: Triple = (2, 2, 2)
    offset_kernel: int = 5
    mlp_ratio: int = 4
    decoder_channels: tuple[int, ...] = (16, 8)
    attention: str = "dw_mca"
    share_paths: bool = False
    rel_pos_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "image_size", _triple(self.image_size))
        object.__setattr__(self, "window", _triple(self.window))
        for name in ("depths", "n_heads", "decoder_channels"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        self.validate()

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    @property
    def n_upsamples(self) -> int:
        return int(round(math.log2(self.patch_size)))

    def stage_channels(self, s: int) -> int:
        return self.embed_dim * 2 ** s

    def stage_grid(self, s: int) -> Triple:
        g = tuple(n // self.patch_size for n in self.image_size)
        for _ in range(s):
            g = tuple(-(-n // 2) for n in g)
        return g

    def stage_window(self, s: int) -> Triple:
        return tuple(min(w, g) for w, g in zip(self.window, self.stage_grid(s)))

    def block_shift(self, s: int, j: int) -> Triple:
        """Half-window shift on odd blocks, only along axes with more than one window."""
        if j % 2 == 0:
            return (0, 0, 0)
        win = self.stage_window(s)
        return tuple(w // 2 if g > w else 0 for w, g in zip(win, self.stage_grid(s)))

    def validate(self) -> None:
        if self.patch_size < 2 or self.patch_size & (self.patch_size - 1):
            raise ConfigError(f"patch_size must be a power of two >= 2, got {self.patch_size}")
        if any(n % self.patch_size for n in self.image_size):
            raise ConfigError(f"image extents {self.image_size} not divisible by patch {self.patch_size}")
        if not self.depths or any(d < 1 for d in self.depths):
            raise ConfigError(f"depths must be positive, got {self.depths}")
        if len(self.n_heads) != len(self.depths):
            raise ConfigError(f"{len(self.depths)} stages but {len(self.n_heads)} head counts")
        for s, h in enumerate(self.n_heads):
            if h < 1 or self.stage_channels(s) % h:
                raise ConfigError(f"stage {s}: {self.stage_channels(s)} channels not divisible by {h} heads")
        if min(self.window) < 1 or self.offset_kernel < 1 or self.offset_kernel % 2 == 0:
            raise ConfigError("window extents must be positive and offset_kernel odd")
        expected = self.n_stages - 1 + self.n_upsamples
        if len(self.decoder_channels) != expected:
            raise ConfigError(f"decoder_channels needs {expected} widths, got {len(self.decoder_channels)}")
        if self.attention not in ("dw_mca", "fixed"):
            raise ConfigError(f"attention must be 'dw_mca' or 'fixed', got {self.attention!r}")
        if self.embed_dim < 1 or self.mlp_ratio < 1:
            raise ConfigError("embed_dim and mlp_ratio must be positive")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        base = dict(image_size=(160, 192, 224), patch_size=4, embed_dim=96, depths=(4, 4, 5),
                    n_heads=(4, 4, 8), window=(5, 6, 7), decoder_channels=(48, 32, 16, 16))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters

def _kaiming(rng, shape, slope=0.2):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / ((1 + slope ** 2) * fan_in)), size=shape)


def _paths(config: ModelConfig):
    return ("A",) if config.share_paths else ("A", "B")


def init_params(config: ModelConfig, rng: np.random.Generator | int = 0) -> ParameterStore:
    """Fresh parameters; the offset pointwise layers and the displacement head start at zero."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    store = ParameterStore()
    C0, p = config.embed_dim, config.patch_size
    for path in _paths(config):
        store.add(f"embed.{path}.w", rng.normal(0.0, 1.0 / math.sqrt(p ** 3), size=(C0, 1, p, p, p)))
        store.add(f"embed.{path}.b", np.zeros(C0))
    for s, depth in enumerate(config.depths):
        C = config.stage_channels(s)
        for j in range(depth):
            for path in _paths(config):
                rel = config.stage_window(s) if config.rel_pos_bias else None
                attn.init_attention_params(store, f"enc.s{s}.b{j}.{path}", C, config.n_heads[s], rng,
                                           offset_kernel=config.offset_kernel,
                                           mlp_ratio=config.mlp_ratio, rel_pos_window=rel)
        if s + 1 < config.n_stages:
            for path in _paths(config):
                store.add(f"merge.s{s}.{path}.norm_gamma", np.ones(8 * C))
                store.add(f"merge.s{s}.{path}.norm_beta", np.zeros(8 * C))
                store.add(f"merge.s{s}.{path}.w", rng.normal(0.0, 1.0 / math.sqrt(8 * C), size=(8 * C, 2 * C)))
    c_in = config.stage_channels(config.n_stages - 1)
    for i, width in enumerate(config.decoder_channels):
        if i < config.n_stages - 1:
            c_in += config.stage_channels(config.n_stages - 2 - i)
        elif i == len(config.decoder_channels) - 1:
            c_in += 2
        store.add(f"dec.l{i}.c0.w", _kaiming(rng, (width, c_in, 3, 3, 3)))
        store.add(f"dec.l{i}.c0.b", np.zeros(width))
        store.add(f"dec.l{i}.c1.w", _kaiming(rng, (width, width, 3, 3, 3)))
        store.add(f"dec.l{i}.c1.b", np.zeros(width))
        c_in = width
    store.add("dec.head.w", np.zeros((3, c_in, 3, 3, 3)))
    store.add("dec.head.b", np.zeros(3))
    return store


def parameter_groups(store: ParameterStore) -> dict[str, list[str]]:
    """Names grouped as embedding, attention, offsets, merging and decoder."""
    groups: dict[str, list[str]] = {"embedding": [], "attention": [], "offsets": [], "merging": [], "decoder": []}
    for name in store:
        if name.startswith("embed."):
            groups["embedding"].append(name)
        elif name.startswith("enc."):
            groups["offsets" if ".offset_" in name else "attention"].append(name)
        elif name.startswith("merge."):
            groups["merging"].append(name)
        else:
            groups["decoder"].append(name)
    return groups


# ---------------------------------------------------------------------------
# encoder

def _check_volume(v: Tensor, config: ModelConfig, what: str) -> Tensor:
    v = as_tensor(v)
    if v.ndim == 3:
        v = reshape(v, (1,) + v.shape)
    if v.ndim != 4 or v.shape[0] != 1:
        raise ShapeError(f"{what} must be (1,H,W,D), got {v.shape}")
    if v.shape[1:] != config.image_size:
        raise ShapeError(f"{what} extents {v.shape[1:]} differ from configured {config.image_size}")
    return v


def patch_embed(volume: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Strided conv tokenizer: (1, H, W, D) -> (H/p, W/p, D/p, C0)."""
    volume = as_tensor(volume)
    p = weight.shape[-1]
    if volume.ndim != 4 or volume.shape[0] != weight.shape[1]:
        raise ShapeError(f"patch_embed expects ({weight.shape[1]},H,W,D), got {volume.shape}")
    if any(n % p for n in volume.shape[1:]):
        raise ConfigError(f"volume extents {volume.shape[1:]} not divisible by patch size {p}")
    return transpose(conv3d(volume, weight, bias, stride=p), (1, 2, 3, 0))


def patch_merging(x: Tensor, norm_gamma: Tensor, norm_beta: Tensor, weight: Tensor) -> Tensor:
    """Concatenate 2x2x2 neighbourhoods (8C), normalise, project to 2C. Odd extents are zero padded."""
    H, W, D, C = x.shape
    widths = [(0, n % 2) for n in (H, W, D)] + [(0, 0)]
    x = pad(x, widths)
    H2, W2, D2 = (x.shape[0] // 2, x.shape[1] // 2, x.shape[2] // 2)
    x = reshape(x, (H2, 2, W2, 2, D2, 2, C))
    x = reshape(transpose(x, (0, 2, 4, 1, 3, 5, 6)), (H2, W2, D2, 8 * C))
    return linear(layernorm(x, norm_gamma, norm_beta), weight)


def _block_params(store, config, s, j, path):
    return attn.AttentionParams.from_store(store, f"enc.s{s}.b{j}.{path}", config.n_heads[s])


def dual_encoder_forward(moving: Tensor, fixed: Tensor, store: ParameterStore,
                         config: ModelConfig) -> list[Tensor]:
    """Skip pyramid, finest first; each entry is the sum of the two streams."""
    moving = _check_volume(moving, config, "moving")
    fixed = _check_volume(fixed, config, "fixed")
    pa, pb = ("A", "A") if config.share_paths else ("A", "B")
    xm = patch_embed(moving, store[f"embed.{pa}.w"], store[f"embed.{pa}.b"])
    xf = patch_embed(fixed, store[f"embed.{pb}.w"], store[f"embed.{pb}.b"])
    deformable = config.attention == "dw_mca"
    skips = []
    for s, depth in enumerate(config.depths):
        for j in range(depth):
            layout = attn.make_layout(xm.shape[:3], config.stage_window(s), config.block_shift(s, j))
            with attn.sampling_tag(stage=s, block=j, path="A"):
                new_m = attn.cross_attention_block(xm, xf, _block_params(store, config, s, j, pa),
                                                   layout, deformable)
            with attn.sampling_tag(stage=s, block=j, path="B"):
                new_f = attn.cross_attention_block(xf, xm, _block_params(store, config, s, j, pb),
                                                   layout, deformable)
            xm, xf = new_m, new_f
        skips.append(xm + xf)
        if s + 1 < config.n_stages:
            xm = patch_merging(xm, *(store[f"merge.s{s}.{pa}.{k}"] for k in ("norm_gamma", "norm_beta", "w")))
            xf = patch_merging(xf, *(store[f"merge.s{s}.{pb}.{k}"] for k in ("norm_gamma", "norm_beta", "w")))
    return skips


# ---------------------------------------------------------------------------
# decoder

def _crop(x: Tensor, extents) -> Tensor:
    if x.shape[1:] == tuple(extents):
        return x
    return getitem(x, (slice(None),) + tuple(slice(0, n) for n in extents))


def _conv_pair(x: Tensor, store, i: int) -> Tensor:
    x = leaky_relu(conv3d(x, store[f"dec.l{i}.c0.w"], store[f"dec.l{i}.c0.b"], pad=1), 0.2)
    return leaky_relu(conv3d(x, store[f"dec.l{i}.c1.w"], store[f"dec.l{i}.c1.b"], pad=1), 0.2)


def conv_decoder_forward(skips: list[Tensor], moving: Tensor, fixed: Tensor, store: ParameterStore,
                         config: ModelConfig) -> Tensor:
    """Upsample-concat-conv decoder; returns the displacement field (3, H, W, D)."""
    if len(skips) != config.n_stages:
        raise ShapeError(f"expected {config.n_stages} skip levels, got {len(skips)}")
    for s, sk in enumerate(skips):
        want = config.stage_grid(s) + (config.stage_channels(s),)
        if sk.shape != want:
            raise ShapeError(f"skip {s} has shape {sk.shape}, expected {want}")
    moving = _check_volume(moving, config, "moving")
    fixed = _check_volume(fixed, config, "fixed")
    x = transpose(skips[-1], (3, 0, 1, 2))
    level = 0
    for s in range(config.n_stages - 2, -1, -1):
        x = _crop(upsample2x(x), config.stage_grid(s))
        x = concat([x, transpose(skips[s], (3, 0, 1, 2))], axis=0)
        x = _conv_pair(x, store, level)
        level += 1
    for u in range(config.n_upsamples):
        x = upsample2x(x)
        if u == config.n_upsamples - 1:
            x = concat([_crop(x, config.image_size), moving, fixed], axis=0)
        x = _conv_pair(x, store, level)
        level += 1
    return conv3d(x, store["dec.head.w"], store["dec.head.b"], pad=1)


def model_forward(moving: Tensor, fixed: Tensor, store: ParameterStore, config: ModelConfig) -> Tensor:
    skips = dual_encoder_forward(moving, fixed, store, config)
    return conv_decoder_forward(skips, moving, fixed, store, config)


def count_parameters(store: ParameterStore) -> dict[str, int]:
    enc = sum(t.size for n, t in store.items() if not n.startswith("dec."))
    dec = sum(t.size for n, t in store.items() if n.startswith("dec."))
    return {"encoder": enc, "decoder": dec, "total": enc + dec}
