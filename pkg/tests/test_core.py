import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from defxattn.core import (
    ParameterStore,
    Tape,
    Tensor,
    backward,
    box_filter3d,
    conv3d,
    gelu,
    gradcheck,
    grid_sample_trilinear,
    layernorm,
    leaky_relu,
    matmul,
    softmax,
    tensor,
    upsample2x,
)
from defxattn.core import kernels
from defxattn.core.tensor import concat, getitem, pad, roll, stack
from defxattn.errors import AxisError, ConfigError, GraphError, NonFiniteError, ShapeError


def _store(**arrays):
    store = ParameterStore()
    for name, value in arrays.items():
        store.add(name, value)
    return store


class TestCreate:
    def test_identity(self):
        t = tensor([1, 0, 0, 1], shape=(2, 2))
        assert np.array_equal(t.data, np.eye(2))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            tensor([1, 2], shape=(3,))

    def test_rank4_scalar(self):
        t = tensor([5], shape=(1, 1, 1, 1))
        assert t.shape == (1, 1, 1, 1) and t.item() == 5.0
        assert t.grad is None


class TestMatmul:
    def test_identity(self, rng):
        x = rng.normal(size=(2, 2))
        assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(x)).data, x)

    def test_hand_expansion(self):
        out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        assert np.array_equal(out.data, [[19, 22], [43, 50]])

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_gradients(self, rng):
        p = _store(a=rng.normal(size=(3, 2, 4)), b=rng.normal(size=(3, 4, 5)), w=rng.normal(size=(5, 2)))
        rep = gradcheck(lambda: ((p["a"] @ p["b"]) @ p["w"]).sum() ** 2, p, tol=1e-7)
        assert rep.passed, rep


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)

    def test_no_overflow(self):
        assert np.array_equal(softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])

    def test_closed_form(self):
        # e^0 / (e^0 + 3) and 3 / (1 + 3)
        assert np.allclose(softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)

    def test_axis_error(self):
        with pytest.raises(AxisError):
            softmax(Tensor(np.ones((2, 2))), axis=2)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 7), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        y = softmax(Tensor(x), axis=-1).data
        assert np.all(y >= 0)
        assert np.abs(y.sum(axis=-1) - 1.0).max() <= 1e-12

    def test_sum_of_softmax_has_zero_gradient(self, rng):
        p = _store(x=rng.normal(size=(6,)))
        with Tape() as tape:
            loss = softmax(p["x"]).sum()
        backward(loss, tape)
        assert np.abs(p["x"].grad).max() < 1e-15


class TestLayerNorm:
    def test_constant_vector(self):
        out = layernorm(Tensor(np.full((3, 4), 2.5)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.array_equal(out.data, np.zeros((3, 4)))

    def test_two_values(self):
        out = layernorm(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=1e-14)
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-12)

    def test_zero_gamma(self, rng):
        out = layernorm(Tensor(rng.normal(size=(5, 2))), Tensor([0.0, 0.0]), Tensor([7.0, 7.0]))
        assert np.array_equal(out.data, np.full((5, 2), 7.0))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            layernorm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))

    def test_gradients(self, rng):
        p = _store(x=rng.normal(size=(3, 5)), g=rng.normal(size=5), b=rng.normal(size=5))
        w = Tensor(rng.normal(size=(3, 5)))
        rep = gradcheck(lambda: (layernorm(p["x"], p["g"], p["b"]) * w).sum() ** 2, p, tol=1e-6)
        assert rep.passed, rep


class TestConv3d:
    def test_pointwise_identity(self, rng):
        x = rng.normal(size=(3, 4, 5, 2))
        k = np.eye(3).reshape(3, 3, 1, 1, 1)
        assert np.array_equal(conv3d(Tensor(x), Tensor(k)).data, x)

    def test_box_kernel_interior(self):
        out = conv3d(Tensor(np.ones((1, 5, 5, 5))), Tensor(np.ones((1, 1, 3, 3, 3))), pad=1)
        assert out.data[0, 2, 2, 2] == 27.0
        assert out.data[0, 0, 0, 0] == 8.0

    def test_group_divisibility(self):
        with pytest.raises(ConfigError):
            conv3d(Tensor(np.ones((4, 3, 3, 3))), Tensor(np.ones((3, 1, 1, 1, 1))), groups=3)

    def test_output_extent(self):
        out = conv3d(Tensor(np.ones((2, 7, 8, 9))), Tensor(np.ones((4, 2, 3, 3, 3))), stride=2, pad=1)
        assert out.shape == (4, (7 + 2 - 3) // 2 + 1, (8 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_matches_direct_loops(self, rng):
        x = rng.normal(size=(4, 5, 4, 6))
        k = rng.normal(size=(6, 2, 3, 3, 3))
        b = rng.normal(size=6)
        out = conv3d(Tensor(x), Tensor(k), Tensor(b), stride=2, pad=1, groups=2).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for o in range(6):
            grp = o // 3
            for i in range(out.shape[1]):
                for j in range(out.shape[2]):
                    for l in range(out.shape[3]):
                        patch = xp[2 * grp:2 * grp + 2, 2 * i:2 * i + 3, 2 * j:2 * j + 3, 2 * l:2 * l + 3]
                        ref[o, i, j, l] = (patch * k[o]).sum() + b[o]
        assert np.abs(out - ref).max() < 1e-12

    @pytest.mark.parametrize("stride,pad,groups", [(1, 1, 1), (2, 0, 1), (1, 2, 4)])
    def test_gradients(self, rng, stride, pad, groups):
        k = 3 if pad < 2 else 5
        p = _store(x=rng.normal(size=(4, 5, 4, 5)), k=rng.normal(size=(4, 4 // groups, k, k, k)),
                   b=rng.normal(size=4))
        rep = gradcheck(lambda: (conv3d(p["x"], p["k"], p["b"], stride, pad, groups) ** 2).sum(), p, tol=1e-5)
        assert rep.passed, rep


class TestGridSample:
    def test_identity_grid_bit_exact(self, rng):
        x = rng.normal(size=(3, 4, 5, 2))
        grid = np.stack(np.meshgrid(*[np.arange(n) for n in x.shape[:3]], indexing="ij"), -1).astype(float)
        assert np.array_equal(grid_sample_trilinear(Tensor(x), Tensor(grid)).data, x)

    def test_midpoint(self):
        x = np.zeros((2, 1, 1, 1))
        x[1] = 2.0
        out = grid_sample_trilinear(Tensor(x), Tensor([[0.5, 0.0, 0.0]]))
        assert out.data[0, 0] == 1.0

    def test_border_clamp(self, rng):
        x = rng.normal(size=(3, 3, 3, 4))
        out = grid_sample_trilinear(Tensor(x), Tensor([[-5.0, -5.0, -5.0]]))
        assert np.array_equal(out.data[0], x[0, 0, 0])

    def test_bad_coords(self):
        with pytest.raises(ShapeError):
            grid_sample_trilinear(Tensor(np.ones((2, 2, 2, 1))), Tensor(np.ones((4, 2))))

    def test_gradients_jittered(self, rng):
        coords = rng.uniform(0.1, 2.9, size=(7, 3))
        coords = coords + 0.25 * (np.abs(coords - np.round(coords)) < 0.05)
        p = _store(x=rng.normal(size=(4, 4, 4, 3)), c=coords)
        w = Tensor(rng.normal(size=(7, 3)))
        rep = gradcheck(lambda: (grid_sample_trilinear(p["x"], p["c"]) * w).sum() ** 2, p, tol=1e-6)
        assert rep.passed, rep

    def test_batched_matches_single(self, rng):
        x = rng.normal(size=(2, 3, 4, 3, 2))
        c = rng.uniform(-1, 4, size=(2, 5, 3))
        out = grid_sample_trilinear(Tensor(x), Tensor(c)).data
        for b in range(2):
            assert np.array_equal(out[b], grid_sample_trilinear(Tensor(x[b]), Tensor(c[b])).data)

    @pytest.mark.skipif("cython" not in kernels.available_backends(), reason="extension not built")
    def test_backends_agree(self, rng):
        x = rng.normal(size=(1, 5, 4, 6, 3))
        c = rng.uniform(-2, 7, size=(1, 40, 3))
        g = rng.normal(size=(1, 40, 3))
        with kernels.use_backend("python"):
            fp = kernels.trilinear_forward(x, c)
            bp = kernels.trilinear_backward(x, c, g)
        with kernels.use_backend("cython"):
            fc = kernels.trilinear_forward(x, c)
            bc = kernels.trilinear_backward(x, c, g)
        assert np.array_equal(fp, fc)
        assert np.abs(bp[0] - bc[0]).max() < 1e-12
        assert np.abs(bp[1] - bc[1]).max() < 1e-12


class TestBackward:
    def test_sum_gives_ones(self, rng):
        p = _store(x=rng.normal(size=(2, 3, 4)))
        with Tape() as tape:
            loss = p["x"].sum()
        backward(loss, tape)
        assert np.array_equal(p["x"].grad, np.ones((2, 3, 4)))

    def test_square(self):
        p = _store(x=[3.0])
        with Tape() as tape:
            loss = (p["x"] * p["x"]).sum()
        backward(loss, tape)
        assert p["x"].grad[0] == 6.0

    def test_fan_out_accumulates(self, rng):
        p = _store(y=rng.normal(size=(3,)))
        with Tape() as tape:
            loss = p["y"].sum() + p["y"].sum()
        backward(loss, tape)
        assert np.array_equal(p["y"].grad, np.full(3, 2.0))

    def test_non_scalar_loss(self, rng):
        p = _store(x=rng.normal(size=(3,)))
        with Tape() as tape:
            y = p["x"] * 2.0
        with pytest.raises(ShapeError):
            backward(y, tape)

    def test_detached_graph(self, rng):
        p = _store(x=rng.normal(size=(3,)))
        loss = p["x"].sum()  # no tape active
        with pytest.raises(GraphError):
            backward(loss)

    def test_deterministic_replay(self, rng):
        p = _store(x=rng.normal(size=(2, 3, 3, 3)), k=rng.normal(size=(2, 2, 3, 3, 3)))

        def run():
            p.zero_grad()
            with Tape() as tape:
                y = gelu(conv3d(p["x"], p["k"], pad=1))
                loss = softmax(y.reshape(2, -1), axis=-1).sum() + (y * y).mean()
            backward(loss, tape)
            return p["x"].grad.copy(), p["k"].grad.copy()

        a, b = run(), run()
        assert all(np.array_equal(u, v) for u, v in zip(a, b))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_guard(self):
        with pytest.raises(NonFiniteError):
            Tensor([0.0]) / Tensor([0.0])


class TestGradcheck:
    def test_square_tight(self, rng):
        p = _store(x=rng.normal(size=(4,)))
        rep = gradcheck(lambda: (p["x"] * p["x"]).sum(), p, tol=1e-8)
        assert rep.passed and rep.max_rel_error < 1e-8

    def test_constant(self, rng):
        p = _store(x=rng.normal(size=(3,)))
        rep = gradcheck(lambda: Tensor(4.0) + 0.0 * p["x"].sum(), p, tol=1e-10)
        assert rep.passed

    def test_softmax_sum(self, rng):
        p = _store(x=rng.normal(size=(5,)))
        # both sides ~0, so compare absolutely (floor=1)
        rep = gradcheck(lambda: softmax(p["x"]).sum(), p, tol=1e-9, floor=1.0)
        assert rep.passed, rep

    def test_non_scalar(self, rng):
        p = _store(x=rng.normal(size=(3,)))
        with pytest.raises(ShapeError):
            gradcheck(lambda: p["x"] * 1.0, p)

    def test_misc_ops(self, rng):
        p = _store(a=rng.normal(size=(2, 3, 4, 5)), b=rng.uniform(0.5, 2.0, size=(5,)))
        idx = np.array([0, 2, 2, 1])

        def f():
            y = concat([p["a"], p["a"] * 2.0], axis=1) / p["b"]
            y = roll(pad(y, [(0, 0), (1, 1), (0, 1), (0, 0)]), (1, -2), (1, 2))
            y = stack([y, leaky_relu(y)], axis=0)
            y = getitem(y.reshape(-1, 5), idx) + box_filter3d(p["a"], 3).sum()
            return (upsample2x(y.reshape(1, 2, 2, 5)) ** 2).sum()

        rep = gradcheck(f, p, tol=1e-6)
        assert rep.passed, rep


def test_upsample_of_constant_is_constant():
    out = upsample2x(Tensor(np.full((2, 3, 4, 5), 1.5)))
    assert out.shape == (2, 6, 8, 10)
    assert np.allclose(out.data, 1.5, atol=1e-15)


def test_box_filter_matches_loops(rng):
    x = rng.normal(size=(1, 5, 6, 4))
    out = box_filter3d(Tensor(x), 3).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    for i, j, l in [(0, 0, 0), (2, 3, 1), (4, 5, 3)]:
        assert abs(out[0, i, j, l] - xp[0, i:i + 3, j:j + 3, l:l + 3].sum()) < 1e-12
