import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import shift_naive
from tgvid.tensor import Tensor
from tgvid.video_ops import (Conv2Plus1DSpec, ShiftSpec, conv2plus1d, lateral_fuse,
                             matched_mid_channels, residual_frames, tsm_shift)


def test_shift_example_c4_t3():
    # channel c at time t holds 10*c + t + 1 so every source is distinguishable
    x = np.array([[[[10 * c + t + 1.0]] for t in range(3)] for c in range(4)])[None]
    out = tsm_shift(x, ShiftSpec("1/4", "1/4")).data[0, :, :, 0, 0]
    np.testing.assert_array_equal(out[0], [0.0, 1.0, 2.0])
    np.testing.assert_array_equal(out[1], [12.0, 13.0, 0.0])
    np.testing.assert_array_equal(out[2:], x[0, 2:, :, 0, 0])


def test_zero_shift_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 8, 4, 3, 3))
    np.testing.assert_array_equal(tsm_shift(x, ShiftSpec(0, 0)).data, x)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.sampled_from(["0", "1/8", "1/4", "1/3", "1/2"]),
       st.sampled_from(["0", "1/8", "1/4", "1/6"]), st.integers(0, 1000))
def test_shift_matches_index_oracle(c, t, ff, fb, seed):
    spec = ShiftSpec(ff, fb)
    nf, nb = int(c * spec.fraction_forward), int(c * spec.fraction_backward)
    if nf + nb > c:
        return
    x = np.random.default_rng(seed).standard_normal((2, c, t, 2, 3))
    np.testing.assert_array_equal(tsm_shift(x, spec).data, shift_naive(x, nf, nb))
    # frame-major layout gives the same result
    fm = x.transpose(0, 2, 1, 3, 4).reshape(2 * t, c, 2, 3)
    got = tsm_shift(fm, spec, n_frames=t).data.reshape(2, t, c, 2, 3).transpose(0, 2, 1, 3, 4)
    np.testing.assert_array_equal(got, shift_naive(x, nf, nb))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_shift_is_linear(seed, s):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 2, 8, 5, 2, 2))
    spec = ShiftSpec()
    lhs = tsm_shift(a + s * b, spec).data
    rhs = tsm_shift(a, spec).data + s * tsm_shift(b, spec).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_shift_backward_is_adjoint():
    rng = np.random.default_rng(1)
    x, g = rng.standard_normal((2, 2, 8, 5, 2, 2))
    xt = Tensor(x, requires_grad=True)
    y = tsm_shift(xt, ShiftSpec())
    y.backward(g)
    assert np.sum(y.data * g) == pytest.approx(np.sum(x * xt.grad), abs=1e-12)


def test_double_forward_shift_is_shift_by_two():
    x = np.stack([np.arange(1.0, 7.0)] * 2).reshape(1, 2, 6, 1, 1)
    spec = ShiftSpec("1/2", 0)
    twice = tsm_shift(tsm_shift(x, spec), spec).data[0, :, :, 0, 0]
    np.testing.assert_array_equal(twice[0], [0, 0, 1, 2, 3, 4])
    np.testing.assert_array_equal(twice[1], x[0, 1, :, 0, 0])


def test_shift_mass_bookkeeping():
    x = np.random.default_rng(2).standard_normal((1, 8, 5, 2, 2))
    out = tsm_shift(x, ShiftSpec()).data
    assert out[:, 2:].sum() == x[:, 2:].sum()
    assert out[:, 0].sum() == pytest.approx(x[:, 0].sum() - x[:, 0, -1].sum())
    assert out[:, 1].sum() == pytest.approx(x[:, 1].sum() - x[:, 1, 0].sum())


def test_shift_frame_major_needs_t():
    with pytest.raises(ValueError):
        tsm_shift(np.zeros((4, 8, 2, 2)), ShiftSpec())
    with pytest.raises(ValueError):
        ShiftSpec("3/4", 0)


def test_matched_mid_channels_example():
    spec = Conv2Plus1DSpec(4, 8, 3)
    assert spec.mid == 14
    assert spec.factored_weight_count() == 840
    assert spec.full3d_weight_count() == 864


def test_factored_never_exceeds_full3d():
    for k in (3, 5):
        for cin in range(1, 33):
            for cout in range(1, 33):
                spec = Conv2Plus1DSpec(cin, cout, k)
                assert spec.factored_weight_count() <= spec.full3d_weight_count(), (cin, cout, k)


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        Conv2Plus1DSpec(4, 8, 2)


def test_conv2plus1d_k1_and_passthrough():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 4, 5, 5))
    out = conv2plus1d(x, rng.standard_normal((2, 3, 1, 1, 1)), rng.standard_normal((6, 2, 1, 1, 1)))
    assert out.shape == (2, 6, 4, 5, 5)
    ws = np.zeros((3, 3, 1, 3, 3))
    wt = np.zeros((3, 3, 3, 1, 1))
    for c in range(3):
        ws[c, c, 0, 1, 1] = 1.0
        wt[c, c, 1, 0, 0] = 1.0
    np.testing.assert_array_equal(conv2plus1d(x, ws, wt).data, x)


def test_conv2plus1d_weight_shapes():
    spec = Conv2Plus1DSpec(4, 8, 3)
    assert spec.weight_shapes() == ((14, 4, 1, 3, 3), (8, 14, 3, 1, 1))
    assert matched_mid_channels(4, 8, 3) == 14


def test_residual_frames_identities():
    rng = np.random.default_rng(4)
    static = np.broadcast_to(rng.random((3, 1, 4, 4)), (3, 6, 4, 4))
    assert not residual_frames(static).any()
    ramp = np.arange(5.0)[None, :, None, None] * np.ones((2, 5, 3, 3))
    np.testing.assert_array_equal(residual_frames(ramp), np.ones((2, 4, 3, 3)))
    for _ in range(100):
        x = rng.standard_normal((3, int(rng.integers(2, 9)), 4, 4))
        d = residual_frames(x)
        np.testing.assert_array_equal(d, x[:, 1:] - x[:, :-1])
        np.testing.assert_array_equal(residual_frames(x[:, ::-1]), -d[:, ::-1])
    with pytest.raises(ValueError):
        residual_frames(np.zeros((3, 1, 2, 2)))


def test_lateral_fuse_shapes():
    rng = np.random.default_rng(5)
    fast = rng.standard_normal((1, 2, 16, 3, 3))
    slow = rng.standard_normal((1, 5, 4, 3, 3))
    out = lateral_fuse(fast, slow, 4, rng.standard_normal((4, 2, 5, 1, 1)))
    assert out.shape == (1, 9, 4, 3, 3)
    np.testing.assert_array_equal(out.data[:, :5], slow)
    eye = np.zeros((4, 2, 1, 1, 1))
    eye[0, 0] = eye[1, 1] = 1.0
    out = lateral_fuse(fast, fast, 1, eye)
    assert out.shape == (1, 6, 16, 3, 3)
    with pytest.raises(ValueError):
        lateral_fuse(rng.standard_normal((1, 2, 15, 3, 3)), slow, 4, rng.standard_normal((4, 2, 5, 1, 1)))
