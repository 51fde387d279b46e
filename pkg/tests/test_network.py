import numpy as np
import pytest

from defxattn import network as N
from defxattn.core import ParameterStore, Tensor, gradcheck, tsum
from defxattn.errors import ConfigError, ShapeError


def _vols(rng, shape=(16, 16, 16)):
    return Tensor(rng.normal(size=(1,) + shape)), Tensor(rng.normal(size=(1,) + shape))


def _jitter(store, rng, scale=0.05):
    """Move the zero-initialised layers off zero so every gradient path is live."""
    for name, t in store.items():
        if name == "dec.head.w" or ".offset_pw_" in name:
            t.data = rng.normal(0, scale, size=t.shape)


def test_config_validation():
    assert N.ModelConfig().n_stages == 2
    with pytest.raises(ConfigError):
        N.ModelConfig(image_size=(15, 16, 16))
    with pytest.raises(ConfigError):
        N.ModelConfig(n_heads=(3, 2))
    with pytest.raises(ConfigError):
        N.ModelConfig(decoder_channels=(8,))
    with pytest.raises(ConfigError):
        N.ModelConfig(patch_size=3)
    with pytest.raises(ConfigError):
        N.ModelConfig.from_dict({"bogus": 1})
    cfg = N.ModelConfig.full_scale()
    assert cfg.stage_grid(0) == (40, 48, 56) and cfg.stage_channels(2) == 384
    assert N.ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_patch_embed_shapes(rng):
    st = ParameterStore()
    st.add("w", rng.normal(size=(8, 1, 4, 4, 4)))
    st.add("b", rng.normal(size=8))
    out = N.patch_embed(Tensor(rng.normal(size=(1, 16, 16, 16))), st["w"], st["b"])
    assert out.shape == (4, 4, 4, 8)
    zero = N.patch_embed(Tensor(np.zeros((1, 16, 16, 16))), st["w"], st["b"])
    assert np.array_equal(zero.data, np.broadcast_to(st["b"].data, (4, 4, 4, 8)))
    with pytest.raises(ConfigError):
        N.patch_embed(Tensor(np.zeros((1, 15, 16, 16))), st["w"], st["b"])


def test_patch_merging(rng):
    g, b = Tensor(np.ones(64)), Tensor(np.zeros(64))
    w = Tensor(rng.normal(size=(64, 16)))
    assert N.patch_merging(Tensor(rng.normal(size=(4, 4, 4, 8))), g, b, w).shape == (2, 2, 2, 16)
    assert N.patch_merging(Tensor(rng.normal(size=(3, 4, 4, 8))), g, b, w).shape == (2, 2, 2, 16)
    const = N.patch_merging(Tensor(np.broadcast_to(rng.normal(size=8), (4, 4, 4, 8)).copy()), g, b, w).data
    assert np.allclose(const, const[0, 0, 0], atol=1e-14)


def test_pyramid_shapes_patch4(rng):
    cfg = N.ModelConfig(patch_size=4, decoder_channels=(16, 8, 8))
    st = N.init_params(cfg, 0)
    skips = N.dual_encoder_forward(*_vols(rng), st, cfg)
    assert [s.shape for s in skips] == [(4, 4, 4, 8), (2, 2, 2, 16)]
    u = N.model_forward(*_vols(rng), st, cfg)
    assert u.shape == (3, 16, 16, 16)


def test_identity_at_init(rng):
    cfg = N.ModelConfig()
    st = N.init_params(cfg, 3)
    u = N.model_forward(*_vols(rng), st, cfg)
    assert u.shape == (3, 16, 16, 16) and not u.data.any()


def test_zero_inputs_give_zero_field():
    cfg = N.ModelConfig()
    st = N.init_params(cfg, 0)
    st["dec.head.w"].data = np.ones_like(st["dec.head.w"].data)
    z = Tensor(np.zeros((1, 16, 16, 16)))
    skips = [Tensor(np.zeros(cfg.stage_grid(s) + (cfg.stage_channels(s),))) for s in range(2)]
    assert not N.conv_decoder_forward(skips, z, z, st, cfg).data.any()


def test_shared_paths_symmetry(rng):
    cfg = N.ModelConfig(share_paths=True)
    st = N.init_params(cfg, 1)
    _jitter(st, rng, 0.3)
    m, _ = _vols(rng)
    sk_shared = N.dual_encoder_forward(m, m, st, cfg)
    # with moving == fixed the streams coincide, so each skip is twice one stream
    from defxattn import attention as A
    xm = N.patch_embed(m, st["embed.A.w"], st["embed.A.b"])
    for j in range(2):
        lay = A.make_layout(xm.shape[:3], cfg.stage_window(0), cfg.block_shift(0, j))
        xm = A.dw_mca_block(xm, xm, A.AttentionParams.from_store(st, f"enc.s0.b{j}.A", 2), lay)
    assert np.array_equal(sk_shared[0].data, 2.0 * xm.data)


def test_zero_offset_encoder_equals_fixed(rng):
    cfg = N.ModelConfig()
    st = N.init_params(cfg, 2)
    m, f = _vols(rng)
    a = N.dual_encoder_forward(m, f, st, cfg)
    b = N.dual_encoder_forward(m, f, st, N.ModelConfig(attention="fixed"))
    for x, y in zip(a, b):
        assert np.array_equal(x.data, y.data)


def test_shape_errors(rng):
    cfg = N.ModelConfig()
    st = N.init_params(cfg, 0)
    with pytest.raises(ShapeError):
        N.model_forward(Tensor(np.zeros((1, 16, 16, 8))), Tensor(np.zeros((1, 16, 16, 8))), st, cfg)
    with pytest.raises(ShapeError):
        N.conv_decoder_forward([Tensor(np.zeros((8, 8, 8, 8)))], *_vols(rng), st, cfg)


def test_decoder_smaller_than_encoder():
    counts = N.count_parameters(N.init_params(N.ModelConfig(), 0))
    assert counts["decoder"] < counts["encoder"]


def test_parameter_groups_cover_store():
    st = N.init_params(N.ModelConfig(), 0)
    groups = N.parameter_groups(st)
    assert sum(len(v) for v in groups.values()) == len(st)
    assert all(groups[k] for k in ("embedding", "attention", "offsets", "decoder"))


def test_model_gradcheck_every_group(rng):
    cfg = N.ModelConfig()
    st = N.init_params(cfg, 5)
    _jitter(st, rng)
    m, f = _vols(rng)

    def loss():
        u = N.model_forward(m, f, st, cfg)
        return tsum(u * u)

    groups = N.parameter_groups(st)
    picked, idx = {}, {}
    for g, names in groups.items():
        for name in rng.choice(names, size=min(2, len(names)), replace=False):
            picked[name] = st[name]
            idx[name] = rng.choice(st[name].size, size=min(4, st[name].size), replace=False)
    rep = gradcheck(loss, picked, indices=idx, tol=1e-4)
    assert rep.passed, str(rep)
