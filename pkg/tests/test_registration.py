import csv

import numpy as np
import pytest

from defxattn import registration as R
from defxattn.core import Tensor, gradcheck
from defxattn.errors import MetricError, ShapeError

from oracles import dice_loop, hd95_loop, invertibility_loop, jacobian_loop


def _linear_field(A, shape=(6, 7, 8)):
    x = R.identity_grid(shape)
    return np.einsum("ij,hwdj->ihwd", np.asarray(A, float), x)


def _blocky_labels(rng, shape=(8, 8, 8), n=3):
    coarse = rng.integers(0, n + 1, size=tuple(s // 2 for s in shape))
    return np.kron(coarse, np.ones((2, 2, 2), dtype=np.int64))


# -- warping ---------------------------------------------------------------------

def test_warp_identity_bit_exact(rng):
    img = rng.normal(size=(2, 5, 6, 7))
    out = R.warp_trilinear(Tensor(img), Tensor(np.zeros((3, 5, 6, 7))))
    assert np.array_equal(out.data, img)


def test_warp_integer_shift_on_ramp():
    ramp = np.arange(6, dtype=float)[None, :, None, None] * np.ones((1, 6, 4, 4))
    u = np.zeros((3, 6, 4, 4))
    u[0] = 1.0
    out = R.warp_trilinear(Tensor(ramp), Tensor(u)).data
    assert np.array_equal(out, np.minimum(ramp + 1, 5))


def test_warp_nearest_keeps_labels(rng):
    lab = rng.integers(0, 4, size=(5, 5, 5))
    u = np.zeros((3, 5, 5, 5))
    u[0] = 0.4
    assert np.array_equal(R.warp_nearest(lab, u), lab)
    with pytest.raises(ShapeError):
        R.warp_nearest(lab, np.zeros((3, 5, 5, 4)))


def test_warp_gradcheck(rng):
    img = Tensor(rng.normal(size=(1, 5, 5, 5)))
    u = Tensor(rng.uniform(-0.8, 0.8, size=(3, 5, 5, 5)))
    w = rng.normal(size=(1, 5, 5, 5))
    rep = gradcheck(lambda: (R.warp_trilinear(img, u) * w).sum(), {"img": img, "u": u},
                    indices={"u": np.arange(0, 375, 11)}, tol=1e-5)
    assert rep.passed, str(rep)


# -- losses ----------------------------------------------------------------------

def test_ncc_perfect_and_negated(rng):
    a = rng.normal(size=(1, 8, 8, 8))
    assert R.ncc_loss(a, a, 5).item() == pytest.approx(-1.0, abs=1e-6)
    assert R.ncc_loss(-a, a, 5).item() == pytest.approx(-1.0, abs=1e-6)
    assert R.ncc_loss(2.0 * a + 3.0, a, 5).item() == pytest.approx(-1.0, abs=1e-6)


def test_ncc_independent_noise_near_zero():
    r = np.random.default_rng(7)
    val = R.ncc_loss(r.normal(size=(16, 16, 16)), r.normal(size=(16, 16, 16)), 5).item()
    assert -0.1 <= val <= 0.0


def test_ncc_range_and_gradcheck(rng):
    a = Tensor(rng.normal(size=(1, 8, 8, 8)))
    b = Tensor(rng.normal(size=(1, 8, 8, 8)) + a.data)
    v = R.ncc_loss(a, b, 5).item()
    assert -1.0 <= v <= 0.0
    rep = gradcheck(lambda: R.ncc_loss(a, b, 5), {"a": a}, indices={"a": np.arange(0, 512, 13)}, tol=1e-4)
    assert rep.passed, str(rep)


def test_soft_dice_cases():
    m = np.zeros((1, 4, 4, 4))
    m[0, :2] = 1
    other = np.zeros((1, 4, 4, 4))
    other[0, 2:] = 1
    half = np.zeros((1, 4, 4, 4))
    half[0, 1:3] = 1
    assert R.soft_dice_loss(m, m).item() == pytest.approx(0.0, abs=1e-9)
    assert R.soft_dice_loss(m, other).item() == pytest.approx(1.0, abs=1e-6)
    assert R.soft_dice_loss(m, half).item() == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ShapeError):
        R.soft_dice_loss(m, np.zeros((2, 4, 4, 4)))


def test_diffusion_regularizer():
    assert R.diffusion_regularizer(np.zeros((3, 4, 4, 4))).item() == 0.0
    assert R.diffusion_regularizer(np.full((3, 4, 4, 4), 3.0)).item() == 0.0
    u = _linear_field([[1, 0, 0], [0, 0, 0], [0, 0, 0]], (4, 5, 6))
    terms = R.diffusion_terms(u)
    assert terms[0, 0] == 1.0 and terms.sum() == 1.0
    assert R.diffusion_regularizer(u).item() == pytest.approx(1.0 / 9.0, abs=1e-15)


def test_diffusion_gradcheck(rng):
    u = Tensor(rng.normal(size=(3, 4, 5, 6)))
    rep = gradcheck(lambda: R.diffusion_regularizer(u), {"u": u}, tol=1e-6)
    assert rep.passed, str(rep)


# -- Jacobian metrics --------------------------------------------------------------

def test_jacobian_linear_fields(rng):
    assert np.array_equal(R.jacobian_map(np.zeros((3, 5, 5, 5))), np.ones((5, 5, 5)))
    assert np.allclose(R.jacobian_map(_linear_field(0.1 * np.eye(3))), 1.331, atol=1e-12, rtol=0)
    A = rng.uniform(-0.3, 0.3, size=(3, 3))
    assert np.allclose(R.jacobian_map(_linear_field(A)), np.linalg.det(np.eye(3) + A), atol=1e-12, rtol=0)
    fold = _linear_field([[-2, 0, 0], [0, 0, 0], [0, 0, 0]])
    assert np.allclose(R.jacobian_map(fold), -1.0, atol=1e-12)
    with pytest.raises(ShapeError):
        R.jacobian_map(np.zeros((3, 2, 5, 5)))


def test_invertibility_identity_dilation_fold():
    assert R.invertibility_metrics(np.zeros((3, 6, 6, 6))) == {"sdlogj": 0.0, "pct_nonpositive": 0.0, "pct_ndv": 0.0}
    m = R.invertibility_metrics(_linear_field(0.1 * np.eye(3)))
    assert m["sdlogj"] < 1e-12 and m["pct_nonpositive"] == 0 and m["pct_ndv"] == 0
    m = R.invertibility_metrics(_linear_field([[-2, 0, 0], [0, 0, 0], [0, 0, 0]]))
    assert m["pct_nonpositive"] == 100.0 and m["pct_ndv"] == pytest.approx(100.0)


def test_invertibility_matches_loops(rng):
    u = rng.normal(0, 0.6, size=(3, 8, 8, 8))
    assert np.abs(R.jacobian_map(u) - jacobian_loop(u)).max() < 1e-10
    m = R.invertibility_metrics(u)
    sd, nonpos, ndv = invertibility_loop(u)
    assert abs(m["sdlogj"] - sd) < 1e-10
    assert abs(m["pct_nonpositive"] - nonpos) < 1e-10
    assert abs(m["pct_ndv"] - ndv) < 1e-10 and ndv > 0


# -- overlap metrics ------------------------------------------------------------------

def test_dice_cases(rng):
    a = _blocky_labels(rng)
    per, mean = R.dice_metric(a, a)
    assert mean == 1.0 and all(v == 1.0 for v in per.values())
    x = np.zeros((10, 10, 2), dtype=int)
    y = np.zeros((10, 10, 2), dtype=int)
    x[:5], y[5:] = 1, 1
    assert R.dice_metric(x, y, [1])[1] == 0.0
    y[:] = 0
    y[2:7] = 1
    assert R.dice_metric(x, y, [1])[1] == 0.6
    A = np.zeros(200, dtype=int)
    B = np.zeros(200, dtype=int)
    A[:100], B[50:150] = 1, 1
    assert R.dice_metric(A.reshape(5, 5, 8), B.reshape(5, 5, 8), [1])[1] == 0.5


def test_dice_symmetric_and_absent_labels(rng):
    a, b = _blocky_labels(rng), _blocky_labels(rng)
    pa, ma = R.dice_metric(a, b)
    pb, mb = R.dice_metric(b, a)
    assert pa == pb and ma == mb
    per, mean = R.dice_metric(np.ones((2, 2, 2), int), np.ones((2, 2, 2), int), [1, 7])
    assert np.isnan(per[7]) and mean == 1.0


def test_hd95_cases():
    a = np.zeros((8, 8, 8), dtype=int)
    b = np.zeros((8, 8, 8), dtype=int)
    a[1, 4, 4] = 1
    b[4, 4, 4] = 1
    assert R.hd95_metric(a, a, 1) == 0.0
    assert R.hd95_metric(a, b, 1) == 3.0
    with pytest.raises(MetricError):
        R.hd95_metric(a, np.zeros_like(a), 1)


def test_metrics_match_loops(rng):
    for _ in range(3):
        a, b = _blocky_labels(rng), _blocky_labels(rng)
        per, _ = R.dice_metric(a, b)
        for l, v in per.items():
            assert abs(v - dice_loop(a, b, l)) < 1e-10
            assert abs(R.hd95_metric(a, b, l) - hd95_loop(a, b, l)) < 1e-10


def test_metrics_csv_schema(tmp_path):
    row = {"pair_id": 0, "dice_mean": 0.5, "dice_1": 0.25, "dice_2": 0.75, "hd95": 1.0,
           "sdlogj": 0.0, "pct_nonpositive": 0.0, "pct_ndv": 0.0}
    path = tmp_path / "m.csv"
    R.write_metrics_csv(str(path), [row], [1, 2])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["pair_id", "dice_mean", "dice_1", "dice_2", "hd95", "sdlogj", "pct_nonpositive", "pct_ndv"]
    assert rows[1][1] == "0.5"
