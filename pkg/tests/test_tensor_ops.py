import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relmotion import tensor_ops as T

from oracles import central_diff, conv3d_oracle, gap_oracle, max_pool3d_oracle, rel_err

RNG = np.random.default_rng(20240817)


def rand_tensor(shape, scale=1.0):
    return (RNG.standard_normal(shape) * scale).astype(np.float32)


def make_kernel(kt, kh, kw, ci, co, scale=0.5):
    return T.ConvKernel(
        weights=rand_tensor((kt, kh, kw, ci, co), scale),
        bias=rand_tensor((co,), scale),
    )


# ---------------------------------------------------------------- conv3d

def test_conv3d_full_input_shape():
    x = rand_tensor((15, 90, 160, 3), 0.1)
    k = make_kernel(3, 3, 3, 3, 16, 0.1)
    out = T.conv3d(x, k)
    assert out.shape == (15, 90, 160, 16)
    assert out.dtype == np.float32
    assert np.all(np.isfinite(out))


def test_conv3d_identity_1x1x1():
    x = rand_tensor((4, 5, 6, 3))
    w = np.zeros((1, 1, 1, 3, 3), np.float32)
    for i in range(3):
        w[0, 0, 0, i, i] = 1.0
    k = T.ConvKernel(weights=w, bias=np.zeros(3, np.float32))
    out = T.conv3d(x, k)
    np.testing.assert_array_equal(out, x)


def test_conv3d_matches_loop_oracle():
    x = rand_tensor((3, 4, 4, 2))
    k = make_kernel(3, 3, 3, 2, 2)
    got = T.conv3d(x, k)
    want = conv3d_oracle(x, k.weights, k.bias)
    assert np.abs(got - want).max() < 1e-5


def test_conv3d_shift_gemm_path_matches_oracle():
    # large enough to take the shift-GEMM path
    x = rand_tensor((6, 24, 32, 3), 0.5)
    k = make_kernel(3, 3, 3, 3, 16, 0.3)
    got = T.conv3d(x, k)
    want = conv3d_oracle(x, k.weights, k.bias)
    assert np.abs(got - want).max() < 1e-4 * max(1.0, np.abs(want).max())


@pytest.mark.parametrize("stride", [(2, 2, 2), (1, 2, 2), (3, 1, 2)])
def test_conv3d_strided_matches_oracle(stride):
    x = rand_tensor((5, 6, 7, 2))
    k = make_kernel(3, 3, 3, 2, 3)
    got = T.conv3d(x, k, stride)
    want = conv3d_oracle(x, k.weights, k.bias, stride)
    assert got.shape == want.shape
    assert np.abs(got - want).max() < 1e-5


@given(
    t=st.integers(1, 4), h=st.integers(1, 5), w=st.integers(1, 5),
    ci=st.integers(1, 3), co=st.integers(1, 3),
    kt=st.sampled_from([1, 3]), ks=st.sampled_from([1, 3]),
    seed=st.integers(0, 2**32 - 1),
)
@settings(max_examples=40, deadline=None)
def test_conv3d_oracle_property(t, h, w, ci, co, kt, ks, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((t, h, w, ci)).astype(np.float32)
    k = T.ConvKernel(
        weights=rng.standard_normal((kt, ks, ks, ci, co)).astype(np.float32),
        bias=rng.standard_normal(co).astype(np.float32),
    )
    got = T.conv3d(x, k)
    want = conv3d_oracle(x, k.weights, k.bias)
    assert got.shape == want.shape == (t, h, w, co)  # SAME + stride 1 preserves dims
    assert np.abs(got - want).max() < 1e-5 * max(1.0, np.abs(want).max())


def test_conv3d_channel_mismatch():
    x = rand_tensor((2, 3, 3, 2))
    k = make_kernel(3, 3, 3, 3, 4)
    with pytest.raises(T.ShapeError):
        T.conv3d(x, k)


def test_conv3d_zero_sized_input():
    with pytest.raises(T.ShapeError):
        T.conv3d(np.zeros((0, 3, 3, 2), np.float32), make_kernel(1, 1, 1, 2, 2))


def test_conv3d_backward_zero_grad():
    x = rand_tensor((3, 4, 5, 2))
    k = make_kernel(3, 3, 3, 2, 3)
    gx, gw, gb = T.conv3d_backward(x, k, np.zeros((3, 4, 5, 3), np.float32))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv3d_backward_bias_is_grad_sum():
    x = rand_tensor((3, 4, 5, 2))
    k = make_kernel(3, 3, 3, 2, 3)
    go = rand_tensor((3, 4, 5, 3))
    _, _, gb = T.conv3d_backward(x, k, go)
    np.testing.assert_allclose(gb, go.sum(axis=(0, 1, 2)), rtol=1e-5)


@pytest.mark.parametrize("stride", [(1, 1, 1), (2, 2, 2)])
def test_conv3d_backward_finite_difference(stride):
    x = rand_tensor((3, 4, 4, 2))
    k = make_kernel(3, 3, 3, 2, 2)
    go = rand_tensor(T.conv3d(x, k, stride).shape)

    def obj_x(xv):
        return float(np.sum(conv3d_oracle(xv, k.weights, k.bias, stride) * go))

    gx, gw, gb = T.conv3d_backward(x, k, go, stride)
    assert rel_err(gx, central_diff(obj_x, x.copy())) < 1e-3

    def obj_w(wv):
        return float(np.sum(conv3d_oracle(x, wv, k.bias, stride) * go))

    assert rel_err(gw, central_diff(obj_w, k.weights.copy())) < 1e-3

    def obj_b(bv):
        return float(np.sum(conv3d_oracle(x, k.weights, bv, stride) * go))

    assert rel_err(gb, central_diff(obj_b, k.bias.copy())) < 1e-3


def test_conv3d_backward_shift_gemm_path_matches_im2col_path():
    # same math through both code paths
    x = rand_tensor((6, 24, 32, 3), 0.5)
    k = make_kernel(3, 3, 3, 3, 16, 0.3)
    go = rand_tensor((6, 24, 32, 16), 0.5)
    gx1, gw1, gb1 = T._conv3d_shift_gemm_backward(x, k, go)
    old = T._SHIFT_GEMM_MIN_VOLUME
    try:
        T._SHIFT_GEMM_MIN_VOLUME = 1 << 60
        gx2, gw2, gb2 = T.conv3d_backward(x, k, go)
    finally:
        T._SHIFT_GEMM_MIN_VOLUME = old
    assert np.abs(gx1 - gx2).max() < 1e-3
    assert np.abs(gw1 - gw2).max() < 1e-2  # large reductions, float32
    assert np.abs(gb1 - gb2).max() < 1e-3


# ---------------------------------------------------------------- pooling

def test_max_pool3d_spatial_row_shapes():
    out, arg = T.max_pool3d(rand_tensor((15, 45, 80, 16)), T.SPATIAL_POOL)
    assert out.shape == (15, 23, 40, 16)
    assert arg.shape == out.shape


def test_max_pool3d_temporal_row_shapes():
    out, _ = T.max_pool3d(rand_tensor((15, 3, 5, 16)), T.TEMPORAL_POOL)
    assert out.shape == (8, 3, 5, 16)


def test_max_pool3d_table_chains():
    h_chain = [90, 45, 23, 12, 6, 3]
    w_chain = [160, 80, 40, 20, 10, 5]
    for hin, hout, win, wout in zip(h_chain, h_chain[1:], w_chain, w_chain[1:]):
        out, _ = T.max_pool3d(rand_tensor((2, hin, win, 1)), T.SPATIAL_POOL)
        assert out.shape == (2, hout, wout, 1)
    t_chain = [15, 8, 4, 2, 1]
    for tin, tout in zip(t_chain, t_chain[1:]):
        out, _ = T.max_pool3d(rand_tensor((tin, 3, 5, 1)), T.TEMPORAL_POOL)
        assert out.shape == (tout, 3, 5, 1)


def test_max_pool3d_constant_input():
    x = np.full((5, 6, 7, 2), 3.25, np.float32)
    out, _ = T.max_pool3d(x, T.JOINT_POOL)
    assert np.all(out == 3.25)


@given(
    t=st.integers(1, 5), h=st.integers(1, 6), w=st.integers(1, 6), c=st.integers(1, 3),
    window=st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
    stride=st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
    seed=st.integers(0, 2**32 - 1),
)
@settings(max_examples=40, deadline=None)
def test_max_pool3d_matches_oracle(t, h, w, c, window, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((t, h, w, c)).astype(np.float32)
    out, arg = T.max_pool3d(x, T.PoolSpec(window=window, stride=stride))
    want, want_arg = max_pool3d_oracle(x, window, stride)
    np.testing.assert_array_equal(out, want.astype(np.float32))
    np.testing.assert_array_equal(arg, want_arg)


def test_max_pool3d_backward_increasing_input():
    x = np.arange(4 * 4 * 4 * 1, dtype=np.float32).reshape(4, 4, 4, 1)
    out, arg = T.max_pool3d(x, T.JOINT_POOL)
    gx = T.max_pool3d_backward(arg, np.ones_like(out), x.shape)
    # strictly increasing input: the winner is each window's last element
    assert gx.sum() == out.size
    assert np.all(gx.reshape(-1)[arg.ravel()] == 1.0)
    assert gx[3, 3, 3, 0] == 1.0 and gx[0, 0, 0, 0] == 0.0


def test_max_pool3d_backward_zero_grad():
    x = rand_tensor((4, 4, 4, 2))
    out, arg = T.max_pool3d(x, T.JOINT_POOL)
    gx = T.max_pool3d_backward(arg, np.zeros_like(out), x.shape)
    assert not gx.any()


def test_max_pool3d_backward_finite_difference():
    x = (RNG.permutation(3 * 4 * 4 * 2).astype(np.float32)).reshape(3, 4, 4, 2)
    spec = T.PoolSpec(window=(2, 2, 2), stride=(1, 2, 2))  # overlapping in t
    out, arg = T.max_pool3d(x, spec)
    go = rand_tensor(out.shape)
    gx = T.max_pool3d_backward(arg, go, x.shape)

    def obj(xv):
        o, _ = max_pool3d_oracle(xv, spec.window, spec.stride)
        return float(np.sum(o * go))

    # integer-valued input keeps windows tie-free and far from crossovers
    assert rel_err(gx, central_diff(obj, x.copy())) < 1e-3


def test_max_pool3d_backward_index_out_of_range():
    arg = np.full((1, 1, 1, 1), 99, np.int64)
    with pytest.raises(T.ConsistencyError):
        T.max_pool3d_backward(arg, np.ones((1, 1, 1, 1), np.float32), (1, 2, 2, 1))


# ---------------------------------------------------------------- relu

def test_relu_basic():
    x = np.array([-1.0, 0.0, 2.0], np.float32).reshape(1, 1, 3, 1)
    np.testing.assert_array_equal(
        T.relu(x).ravel(), np.array([0.0, 0.0, 2.0], np.float32)
    )


def test_relu_identity_on_nonnegative():
    x = np.abs(rand_tensor((2, 3, 4, 2)))
    np.testing.assert_array_equal(T.relu(x), x)


def test_relu_backward_finite_difference():
    x = rand_tensor((2, 3, 4, 2)) + np.float32(0.05)  # keep away from the kink
    x[x < 0.1] -= 0.2
    go = rand_tensor(x.shape)
    gx = T.relu_backward(x, go)

    def obj(xv):
        return float(np.sum(np.maximum(xv, 0.0).astype(np.float64) * go))

    assert rel_err(gx, central_diff(obj, x.copy())) < 1e-3


# ---------------------------------------------------------------- softmax

def test_channel_softmax_equal_logits():
    x = np.full((2, 3, 4, 2), 1.7, np.float32)
    np.testing.assert_allclose(T.channel_softmax(x), 0.5, atol=1e-7)


def test_channel_softmax_closed_form():
    x = np.zeros((1, 1, 1, 2), np.float32)
    x[0, 0, 0, 1] = np.log(3.0)
    p = T.channel_softmax(x)
    np.testing.assert_allclose(p.ravel(), [0.25, 0.75], atol=1e-6)


@given(seed=st.integers(0, 2**32 - 1), c=st.integers(1, 5))
@settings(max_examples=30, deadline=None)
def test_channel_softmax_normalized(seed, c):
    rng = np.random.default_rng(seed)
    x = (rng.standard_normal((2, 3, 2, c)) * 10).astype(np.float32)
    p = T.channel_softmax(x)
    assert np.all(p > 0) and np.all(p < 1 + 1e-6)
    np.testing.assert_allclose(p.sum(axis=3), 1.0, atol=1e-6)


def test_channel_softmax_backward_finite_difference():
    x = rand_tensor((2, 2, 2, 3))
    go = rand_tensor(x.shape)
    p = T.channel_softmax(x)
    gx = T.channel_softmax_backward(p, go)

    def obj(xv):
        z = xv - xv.max(axis=3, keepdims=True)
        e = np.exp(z.astype(np.float64))
        return float(np.sum(e / e.sum(axis=3, keepdims=True) * go))

    assert rel_err(gx, central_diff(obj, x.copy()), floor=1e-3) < 1e-3


# ---------------------------------------------------------------- GAP

def test_gap_shape():
    out = T.global_avg_pool_spatial(rand_tensor((1, 3, 5, 16)))
    assert out.shape == (1, 1, 1, 16)


def test_gap_constant():
    x = np.full((3, 4, 5, 2), -2.5, np.float32)
    np.testing.assert_allclose(T.global_avg_pool_spatial(x), -2.5, atol=1e-7)


def test_gap_matches_loop_oracle():
    x = rand_tensor((3, 5, 6, 4))
    got = T.global_avg_pool_spatial(x)
    assert np.abs(got - gap_oracle(x)).max() < 1e-6


def test_gap_backward_spreads_uniformly():
    go = rand_tensor((3, 1, 1, 4))
    gx = T.global_avg_pool_spatial_backward(go, (3, 5, 6, 4))
    np.testing.assert_allclose(gx[1, 2, 3], go[1, 0, 0] / 30.0, rtol=1e-6)


# ---------------------------------------------------------------- broadcast_mul

def test_broadcast_mul_ones_identity():
    f = rand_tensor((3, 4, 5, 16))
    out = T.broadcast_mul(f, np.ones((3, 4, 5, 1), np.float32))
    np.testing.assert_array_equal(out, f)


def test_broadcast_mul_zeros():
    f = rand_tensor((3, 4, 5, 16))
    out = T.broadcast_mul(f, np.zeros((3, 4, 5, 1), np.float32))
    assert not out.any()


def test_broadcast_mul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.broadcast_mul(rand_tensor((3, 4, 5, 16)), rand_tensor((3, 4, 4, 1)))


def test_broadcast_mul_backward_finite_difference():
    f = rand_tensor((2, 3, 4, 3))
    m = (RNG.random((2, 3, 4, 1)) * 0.8 + 0.1).astype(np.float32)
    go = rand_tensor(f.shape)
    gf, gm = T.broadcast_mul_backward(f, m, go)

    def obj_m(mv):
        return float(np.sum(f.astype(np.float64) * mv * go))

    assert rel_err(gm, central_diff(obj_m, m.copy())) < 1e-3
    # gradient wrt mask is the channel sum of features * grad_out
    np.testing.assert_allclose(
        gm, (f * go).sum(axis=3, keepdims=True), rtol=1e-5, atol=1e-6
    )

    def obj_f(fv):
        return float(np.sum(fv.astype(np.float64) * m * go))

    assert rel_err(gf, central_diff(obj_f, f.copy())) < 1e-3


# ---------------------------------------------------------------- purity

def test_kernels_do_not_mutate_inputs():
    x = rand_tensor((4, 6, 6, 3))
    snap = x.copy()
    k = make_kernel(3, 3, 3, 3, 4)
    T.conv3d(x, k)
    T.conv3d_backward(x, k, rand_tensor((4, 6, 6, 4)))
    for spec in (T.SPATIAL_POOL, T.TEMPORAL_POOL, T.JOINT_POOL, T.PoolSpec((1, 1, 1), (1, 1, 1))):
        T.max_pool3d(x, spec)
    T.relu(x)
    T.channel_softmax(x)
    T.global_avg_pool_spatial(x)
    T.broadcast_mul(x, np.ones((4, 6, 6, 1), np.float32))
    np.testing.assert_array_equal(x, snap)


# ---------------------------------------------------------------- determinism

def test_kernels_are_deterministic():
    x = rand_tensor((4, 10, 12, 3))
    k = make_kernel(3, 3, 3, 3, 8)
    a = T.conv3d(x, k)
    b = T.conv3d(x, k)
    np.testing.assert_array_equal(a, b)
    (o1, a1), (o2, a2) = T.max_pool3d(x, T.SPATIAL_POOL), T.max_pool3d(x, T.SPATIAL_POOL)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(a1, a2)
