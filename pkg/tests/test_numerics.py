import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import amga.numerics as nm
from amga.errors import DimensionError
from amga.numerics import GradTape, Tensor, backward, finite_diff_gradient
from amga.rng import Rng


# ---------------------------------------------------------------------------
# independent oracles


def matmul_triple_loop(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            for p in range(k):
                out[i, j] += float(a[i, p]) * float(b[p, j])
    return out


def conv_six_loops(x, k, stride, padding):
    b, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + w] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, o, oh, ow))
    for bi in range(b):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    s = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += float(xp[bi, ci, i * stride + u, j * stride + v]) * float(k[oi, ci, u, v])
                    out[bi, oi, i, j] = s
    return out


# ---------------------------------------------------------------------------
# forward ops


class TestDense:
    def test_identity_weights(self):
        x = Tensor([[1.0, 2.0]])
        w = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([0.0, 0.0])
        out = nm.dense_forward(x, w, b)
        assert np.allclose(out.data, [[1.0, 2.0]])

    def test_zero_input_passes_bias(self):
        x = Tensor([[0.0, 0.0]])
        w = Tensor(Rng(1).normal((2, 2)), dtype=np.float32)
        b = Tensor([3.0, 4.0])
        out = nm.dense_forward(x, w, b)
        assert np.allclose(out.data, [[3.0, 4.0]])

    def test_matches_triple_loop_oracle(self):
        rng = Rng(42)
        x = Tensor(rng.normal((2, 3)), dtype=np.float32)
        w = Tensor(rng.normal((3, 2)), dtype=np.float32)
        b = Tensor(rng.normal((2,)), dtype=np.float32)
        out = nm.dense_forward(x, w, b)
        expect = matmul_triple_loop(x.data, w.data) + b.data
        assert np.max(np.abs(out.data - expect)) < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
            nm.dense_forward(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


class TestConv:
    def test_identity_kernel(self):
        x = Tensor(Rng(2).uniform((1, 1, 6, 6)), dtype=np.float32)
        k = Tensor(np.ones((1, 1, 1, 1)), dtype=np.float32)
        out = nm.conv2d_forward(x, k, stride=1, padding=0)
        assert np.array_equal(out.data, x.data)

    def test_zero_kernel(self):
        x = Tensor(Rng(3).uniform((1, 2, 5, 5)), dtype=np.float32)
        k = Tensor(np.zeros((3, 2, 3, 3)), dtype=np.float32)
        out = nm.conv2d_forward(x, k, stride=1, padding=1)
        assert np.all(out.data == 0)

    def test_matches_six_loop_oracle(self):
        rng = Rng(4)
        x = Tensor(rng.normal((1, 1, 5, 5)), dtype=np.float32)
        k = Tensor(rng.normal((1, 1, 3, 3)), dtype=np.float32)
        out = nm.conv2d_forward(x, k, stride=1, padding=0)
        expect = conv_six_loops(x.data, k.data, 1, 0)
        assert out.shape == (1, 1, 3, 3)
        assert np.max(np.abs(out.data - expect)) < 1e-6

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
    def test_stride_padding_grid_vs_oracle(self, stride, padding):
        rng = Rng(stride * 17 + padding)
        x = Tensor(rng.normal((2, 3, 9, 8)), dtype=np.float32)
        k = Tensor(rng.normal((4, 3, 3, 3)), dtype=np.float32)
        out = nm.conv2d_forward(x, k, stride=stride, padding=padding)
        expect = conv_six_loops(x.data, k.data, stride, padding)
        assert out.shape == expect.shape
        assert np.max(np.abs(out.data - expect)) < 1e-5

    def test_exact_on_integer_inputs(self):
        rng = Rng(5)
        x = Tensor(np.floor(rng.uniform((1, 2, 6, 6), 0, 5)), dtype=np.float32)
        k = Tensor(np.floor(rng.uniform((2, 2, 3, 3), -3, 3)), dtype=np.float32)
        out = nm.conv2d_forward(x, k, stride=1, padding=1)
        expect = conv_six_loops(x.data, k.data, 1, 1)
        assert np.array_equal(out.data, expect.astype(np.float32))

    def test_kernel_larger_than_input_raises(self):
        with pytest.raises(DimensionError):
            nm.conv2d_forward(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), 1, 0)

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            nm.conv2d_forward(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))), 1, 0)


class TestReluSoftmaxLoss:
    def test_relu_values(self):
        out = nm.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_relu_all_negative(self):
        out = nm.relu(Tensor([-5.0, -0.5]))
        assert np.all(out.data == 0)

    def test_relu_gradient_is_positivity_indicator(self):
        tape = GradTape()
        x = Tensor([-1.0, 2.0], requires_grad=True)
        loss = nm.sum_all(nm.relu(x, tape), tape)
        g = backward(loss, tape)[x]
        assert np.array_equal(g, [0.0, 1.0])

    def test_softmax_symmetry(self):
        out = nm.softmax(Tensor([[0.0, 0.0]]))
        assert np.allclose(out.data, [[0.5, 0.5]])

    def test_softmax_no_overflow(self):
        out = nm.softmax(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] > 0.999999

    def test_softmax_matches_exp_sum_oracle(self):
        z = np.array([[1.0, 2.0, 3.0]])
        out = nm.softmax(Tensor(z))
        expect = np.exp(z) / np.exp(z).sum()
        assert np.max(np.abs(out.data - expect)) < 1e-7

    def test_softmax_rows_sum_to_one(self):
        z = Rng(6).uniform((8, 5), -1e4, 1e4)
        out = nm.softmax(Tensor(z, dtype=np.float32))
        assert np.max(np.abs(out.data.sum(axis=1) - 1.0)) < 1e-6

    def test_cross_entropy_perfect_prediction(self):
        p = Tensor([[0.0, 1.0, 0.0]])
        loss = nm.cross_entropy(p, [1])
        assert loss.item() <= 1e-11

    def test_cross_entropy_uniform_is_log_c(self):
        for c in (2, 5, 9):
            p = Tensor(np.full((3, c), 1.0 / c))
            loss = nm.cross_entropy(p, [0, 1, c - 1])
            assert abs(loss.item() - math.log(c)) < 1e-6

    def test_cross_entropy_direct_value(self):
        loss = nm.cross_entropy(Tensor([[0.7, 0.3]]), [0])
        assert abs(loss.item() - 0.35667494) < 1e-6

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(IndexError):
            nm.cross_entropy(Tensor([[0.5, 0.5]]), [2])


class TestPoolFlattenMisc:
    def test_maxpool_values(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        out = nm.maxpool2d(x, 2)
        assert np.array_equal(out.data, [[[[5, 7], [13, 15]]]])

    def test_avgpool_values(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        out = nm.avgpool2d(x, 2)
        assert np.allclose(out.data, [[[[2.5, 4.5], [10.5, 12.5]]]])

    def test_flatten_round_trip_gradient(self):
        tape = GradTape()
        x = Tensor(Rng(7).normal((2, 3, 2, 2)), requires_grad=True, dtype=np.float32)
        loss = nm.sum_all(nm.flatten(x, tape), tape)
        g = backward(loss, tape)[x]
        assert g.shape == x.shape
        assert np.all(g == 1.0)

    def test_weighted_sum_mixes(self):
        a, b = Tensor([1.0, 0.0]), Tensor([0.0, 1.0])
        w = Tensor([0.25, 0.75])
        out = nm.weighted_sum([a, b], w)
        assert np.allclose(out.data, [0.25, 0.75])

    def test_gather_spatial_remaps_and_zero_fills(self):
        x = Tensor(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
        idx = np.array([[3, -1], [0, 1]])
        out = nm.gather_spatial(x, idx)
        assert np.array_equal(out.data, [[[3, 0], [0, 1]], [[7, 0], [4, 5]]])

    def test_gather_spatial_backward_scatter_adds(self):
        tape = GradTape()
        x = Tensor(np.ones((1, 2, 2), dtype=np.float32), requires_grad=True)
        idx = np.array([[0, 0], [-1, 3]])  # duplicate source 0
        loss = nm.sum_all(nm.gather_spatial(x, idx, tape), tape)
        g = backward(loss, tape)[x]
        assert np.array_equal(g.reshape(-1), [2.0, 0.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# backward correctness


def test_backward_square_function():
    tape = GradTape()
    x = Tensor([3.0], requires_grad=True)
    loss = nm.sum_all(nm.mul(x, x, tape), tape)
    g = backward(loss, tape)[x]
    assert np.allclose(g, [6.0])


def test_backward_constant_gives_zero():
    tape = GradTape()
    x = Tensor([3.0], requires_grad=True)
    c = Tensor([5.0])
    loss = nm.sum_all(c, tape)  # never touches x
    g = backward(loss, tape)[x]
    assert np.array_equal(g, [0.0])


def test_backward_rejects_non_scalar():
    tape = GradTape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    out = nm.relu(x, tape)
    with pytest.raises(ValueError, match="scalar"):
        backward(out, tape)


def test_tape_replay_bit_identical():
    def run():
        tape = GradTape()
        rng = Rng(11)
        x = Tensor(rng.normal((2, 6)), requires_grad=True, dtype=np.float32)
        w = Tensor(rng.normal((6, 4)), requires_grad=True, dtype=np.float32)
        b = Tensor(rng.normal((4,)), requires_grad=True, dtype=np.float32)
        h = nm.relu(nm.dense_forward(x, w, b, tape), tape)
        loss = nm.cross_entropy(nm.softmax(h, tape), [0, 2], tape)
        g = backward(loss, tape)
        return g[x].copy(), g[w].copy(), g[b].copy()

    a = run()
    b = run()
    for ga, gb in zip(a, b):
        assert np.array_equal(ga, gb)


def _relative_gradcheck(analytic, numeric, rel_tol=1e-4, abs_tol=1e-6, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    big = np.abs(numeric) >= floor
    if big.any():
        rel = np.abs(analytic[big] - numeric[big]) / np.abs(numeric[big])
        assert rel.max() < rel_tol, f"relative gradient error {rel.max():.3e}"
    small = ~big
    if small.any():
        err = np.abs(analytic[small] - numeric[small])
        assert err.max() < abs_tol, f"absolute gradient error {err.max():.3e}"


def _random_mlp_loss(seed):
    """3-layer dense net in float64 for finite-difference comparison."""
    rng = Rng(seed)
    w1 = Tensor(rng.normal((5, 6)) * 0.7, dtype=np.float64)
    b1 = Tensor(rng.normal((6,)) * 0.2, dtype=np.float64)
    w2 = Tensor(rng.normal((6, 4)) * 0.7, dtype=np.float64)
    b2 = Tensor(rng.normal((4,)) * 0.2, dtype=np.float64)
    w3 = Tensor(rng.normal((4, 3)) * 0.7, dtype=np.float64)
    b3 = Tensor(rng.normal((3,)) * 0.2, dtype=np.float64)
    labels = [int(rng.randint(3)), int(rng.randint(3))]

    def f(x, tape=None):
        h1 = nm.relu(nm.dense_forward(x, w1, b1, tape), tape)
        h2 = nm.relu(nm.dense_forward(h1, w2, b2, tape), tape)
        logits = nm.dense_forward(h2, w3, b3, tape)
        return nm.cross_entropy(nm.softmax(logits, tape), labels, tape)

    x0 = Tensor(rng.normal((2, 5)), dtype=np.float64)
    return f, x0


def test_backward_matches_finite_difference_on_mlp():
    for seed in range(5):
        f, x0 = _random_mlp_loss(seed)
        tape = GradTape()
        x = Tensor(x0.data, requires_grad=True, dtype=np.float64)
        g = backward(f(x, tape), tape)[x]
        fd = finite_diff_gradient(f, x0, 1e-3)
        _relative_gradcheck(g, fd.data)


def test_finite_diff_of_sum_is_ones():
    x = Tensor(Rng(13).normal((3, 2)), dtype=np.float64)
    fd = finite_diff_gradient(lambda t: nm.sum_all(t), x, 1e-3)
    assert np.allclose(fd.data, 1.0, atol=1e-9)


def test_finite_diff_square_at_two():
    x = Tensor([2.0], dtype=np.float64)
    fd = finite_diff_gradient(lambda t: nm.sum_all(nm.mul(t, t)), x, 1e-3)
    assert abs(fd.data[0] - 4.0) < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10**6))
def test_softmax_rows_always_sum_to_one(seed):
    z = Rng(seed).uniform((4, 6), -1e4, 1e4)
    p = nm.softmax(Tensor(z, dtype=np.float32))
    assert np.max(np.abs(p.data.sum(axis=1) - 1.0)) < 1e-6
    assert np.all(p.data >= 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=10**6))
def test_forward_outputs_finite_on_finite_inputs(seed):
    rng = Rng(seed)
    x = Tensor(rng.uniform((2, 3, 8, 8), -50, 50), dtype=np.float32)
    k = Tensor(rng.normal((4, 3, 3, 3)), dtype=np.float32)
    h = nm.relu(nm.conv2d_forward(x, k, 2, 1))
    h = nm.flatten(nm.maxpool2d(h, 2))
    w = Tensor(rng.normal((h.shape[1], 3)), dtype=np.float32)
    b = Tensor(np.zeros(3), dtype=np.float32)
    p = nm.softmax(nm.dense_forward(h, w, b))
    assert np.all(np.isfinite(p.data))
