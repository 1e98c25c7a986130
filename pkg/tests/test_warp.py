import numpy as np
import pytest
from hypothesis import given, strategies as st

from lkreg.data import random_velocity
from lkreg.errors import ShapeError, UsageError
from lkreg.tensor import Tensor, mul, no_grad, tsum
from lkreg.warp import (compose, exp_velocity, fold_fraction, jacobian_determinant, sd_log_jacobian, warp,
                        warp_nearest_array)

from conftest import gradcheck


def _grid(shape):
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))


def test_zero_displacement_is_bitwise_identity(rng):
    img = rng.standard_normal((1, 2, 7, 9))
    out = warp(Tensor(img), Tensor(np.zeros((1, 2, 7, 9))))
    assert np.array_equal(out.data, img)


def test_zero_displacement_nearest_is_identity(rng):
    lab = rng.integers(0, 4, (1, 1, 5, 6, 4)).astype(np.float64)
    assert np.array_equal(warp_nearest_array(lab, np.zeros((1, 3, 5, 6, 4))), lab)


def test_integer_shift_on_ramp_clamps_border():
    ramp = np.tile(np.arange(5, dtype=np.float64)[:, None], (1, 4))[None, None]  # value = x index
    u = np.zeros((1, 2, 5, 4))
    u[:, 0] = 1.0
    out = warp(Tensor(ramp), Tensor(u)).data[0, 0]
    np.testing.assert_array_equal(out[:, 0], [1, 2, 3, 4, 4])
    np.testing.assert_array_equal(out, np.tile(np.array([1, 2, 3, 4, 4.0])[:, None], (1, 4)))


def test_half_voxel_shift_interpolates_linearly():
    img = np.arange(6, dtype=np.float64)[None, None, :, None] * np.ones((1, 1, 6, 3))
    u = np.zeros((1, 2, 6, 3))
    u[:, 0] = 0.5
    out = warp(Tensor(img), Tensor(u)).data[0, 0, :, 0]
    np.testing.assert_allclose(out, [0.5, 1.5, 2.5, 3.5, 4.5, 5.0])


def test_nearest_rounds_half_up():
    img = np.arange(4, dtype=np.float64)[None, None, :, None] * np.ones((1, 1, 4, 2))
    u = np.zeros((1, 2, 4, 2))
    u[:, 0] = 0.5
    np.testing.assert_array_equal(warp_nearest_array(img, u)[0, 0, :, 0], [1, 2, 3, 3])


@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_warp_is_linear_in_image(seed, a, b):
    rng = np.random.default_rng(seed)
    I, J = rng.standard_normal((2, 1, 1, 6, 7))
    u = Tensor(2 * rng.standard_normal((1, 2, 6, 7)))
    lhs = warp(Tensor(a * I + b * J), u).data
    rhs = a * warp(Tensor(I), u).data + b * warp(Tensor(J), u).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_nearest_labels_stay_in_vocabulary(rng):
    lab = rng.choice([0, 3, 7], size=(1, 1, 8, 8)).astype(np.float64)
    out = warp_nearest_array(lab, 3 * rng.standard_normal((1, 2, 8, 8)))
    assert set(np.unique(out)) <= {0, 3, 7}


def test_nearest_while_recording_is_usage_error(rng):
    img = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
    with pytest.raises(UsageError):
        warp(img, Tensor(np.zeros((1, 2, 4, 4))), mode="nearest")
    with no_grad():
        warp(img, Tensor(np.zeros((1, 2, 4, 4))), mode="nearest")


def test_shape_mismatch_raises(rng):
    with pytest.raises(ShapeError):
        warp(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 2, 4, 5))))
    with pytest.raises(ShapeError):
        warp(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 3, 4, 4))))


@pytest.mark.parametrize("dims", [2, 3])
@pytest.mark.parametrize("seed", range(20))
def test_warp_gradcheck(dims, seed):
    rng = np.random.default_rng(seed)
    shape = (5, 6) if dims == 2 else (4, 4, 3)
    img = rng.standard_normal((1, 2) + shape)
    # keep samples away from integer grid lines, where linear interpolation has kinks
    u = rng.integers(-2, 3, (1, dims) + shape) + rng.uniform(0.1, 0.9, (1, dims) + shape)
    r = Tensor(rng.standard_normal((1, 2) + shape))
    assert gradcheck(lambda t: tsum(mul(warp(t[0], t[1]), r)), [img, u]) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_exp_velocity_gradcheck(seed):
    rng = np.random.default_rng(seed)
    v = random_velocity(rng, (8, 8), 1.5, smooth=1.5)
    r = Tensor(rng.standard_normal(v.shape))
    assert gradcheck(lambda t: tsum(mul(exp_velocity(t[0], 3), r)), [v], rng, max_entries=30) < 1e-6


# -- scaling and squaring ---------------------------------------------------------
def test_exp_of_zero_is_zero():
    assert np.array_equal(exp_velocity(Tensor(np.zeros((1, 3, 4, 5, 6))), 7).data, np.zeros((1, 3, 4, 5, 6)))


def test_exp_zero_steps_returns_velocity(rng):
    v = rng.standard_normal((1, 2, 5, 5))
    assert np.array_equal(exp_velocity(Tensor(v), 0).data, v)


def test_exp_negative_steps_rejected():
    with pytest.raises(ValueError):
        exp_velocity(Tensor(np.zeros((1, 2, 4, 4))), -1)


def test_exp_of_constant_field_is_constant():
    v = np.zeros((1, 2, 12, 12))
    v[:, 0], v[:, 1] = 1.25, -0.75
    u = exp_velocity(Tensor(v), 7).data
    np.testing.assert_allclose(u[:, :, 3:-3, 3:-3], v[:, :, 3:-3, 3:-3], atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_more_squaring_steps_converge(seed):
    # The truncation of u0 = v / 2^s is about |v| |grad v| / 2^(s+1), so the
    # 1e-3 bound needs |grad v| of roughly 0.15 or less: smoothing at extent / 4.
    v = random_velocity(np.random.default_rng(seed), (64, 64), 3.0, smooth=16)
    a = exp_velocity(Tensor(v), 7).data
    b = exp_velocity(Tensor(v), 10).data
    m = 6
    assert np.abs(a - b)[:, :, m:-m, m:-m].max() < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_inverse_consistency(seed):
    v = random_velocity(np.random.default_rng(seed), (48, 48), 3.0)
    fwd = exp_velocity(Tensor(v), 7)
    inv = exp_velocity(Tensor(-v), 7)
    resid = compose(fwd, inv).data
    m = 6
    assert np.abs(resid)[:, :, m:-m, m:-m].max() < 0.05


# -- Jacobian, folding ------------------------------------------------------------
def test_zero_field_has_unit_determinant():
    det = jacobian_determinant(np.zeros((1, 3, 4, 5, 6)))
    assert det.shape == (1, 1, 4, 5, 6)
    assert np.array_equal(det, np.ones_like(det))


def test_uniform_scaling_determinant_3d():
    u = 0.1 * _grid((6, 7, 5))[None]
    det = jacobian_determinant(u)
    np.testing.assert_allclose(det[0, 0, 1:-1, 1:-1, 1:-1], 1.331, atol=1e-12)
    assert sd_log_jacobian(u) < 1e-6


def test_translation_has_unit_determinant():
    u = np.zeros((1, 2, 6, 6))
    u[:, 0], u[:, 1] = 2.5, -1.0
    np.testing.assert_allclose(jacobian_determinant(u), 1.0, atol=1e-12)
    assert fold_fraction(u) == 0.0


def test_identity_metrics_are_zero():
    u = np.zeros((1, 2, 6, 6))
    assert fold_fraction(u) == 0.0
    assert sd_log_jacobian(u) == 0.0


def test_crafted_fold_counts_three_voxels():
    # Only row 5 moves along x. Central differences of that row are
    # 0,0,0,-0.5,-1.5,-2,-1.5,-0.5,0,0 so det = 1 + d(u_x)/dx is <= 0 at x = 4,5,6.
    u = np.zeros((1, 2, 10, 10))
    u[0, 0, :, 5] = [0, 0, 0, 0, -1, -3, -5, -6, -6, -6]
    det = jacobian_determinant(u)[0, 0]
    assert set(zip(*np.nonzero(det <= 0))) == {(4, 5), (5, 5), (6, 5)}
    assert fold_fraction(u) == pytest.approx(3.0, abs=1e-12)


def test_sd_log_jacobian_recomputes_from_determinant(rng):
    u = random_velocity(rng, (24, 24), 3.0)
    det = jacobian_determinant(u)
    assert sd_log_jacobian(u) == float(np.std(np.log(np.maximum(det, 1e-6))))


@pytest.mark.parametrize("dims", [2, 3])
def test_exp_of_smooth_velocity_never_folds(dims):
    # 50 fields per dimensionality, max magnitude 5 voxels
    shape = (40, 40) if dims == 2 else (16, 16, 16)
    ss = np.random.SeedSequence(2024 + dims)
    for child in ss.generate_state(50):
        v = random_velocity(np.random.default_rng(int(child)), shape, 5.0, smooth=min(shape) / 5)
        assert fold_fraction(exp_velocity(Tensor(v), 7)) == 0.0


def test_non_finite_displacement_propagates_nan():
    u = np.zeros((1, 2, 4, 4))
    u[0, 0, 1, 2] = np.nan
    out = warp(Tensor(np.ones((1, 1, 4, 4))), Tensor(u)).data
    assert np.isnan(out[0, 0, 1, 2]) and np.isfinite(np.delete(out.ravel(), 1 * 4 + 2)).all()
    from lkreg.errors import NumericalError
    with pytest.raises(NumericalError):
        warp_nearest_array(np.ones((1, 1, 4, 4)), u)
