import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitquant import tensor
from bitquant.errors import ConfigError, ShapeError


def conv2d_loops(x, w, stride, padding):
    """Independent nested-loop convolution oracle.

    Accumulates channel-major, then kernel row, then kernel column, in
    FP32 -- the same order the im2col column layout induces -- so the
    comparison against conv2d can be exact.
    """
    n, c, h, win = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (win + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow), np.float32)
    for b in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = np.float32(0.0)
                    for ch in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                hi = i * stride + ki - padding
                                wj = j * stride + kj - padding
                                if 0 <= hi < h and 0 <= wj < win:
                                    acc += x[b, ch, hi, wj] * w[oc, ch, ki, kj]
                                # out-of-range taps are zero padding: they
                                # contribute exactly 0.0 and can be skipped
                    out[b, oc, i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = tensor.as_tensor([[1, 2], [3, 4]])
        eye = tensor.as_tensor(np.eye(2))
        assert np.array_equal(tensor.matmul(eye, a), a)
        assert np.array_equal(tensor.matmul(a, eye), a)

    def test_hand_worked_product(self):
        a = tensor.as_tensor([[1, 2], [3, 4]])
        b = tensor.as_tensor([[5, 6], [7, 8]])
        # dot products by hand: [1,2]@[5,7]=19, [1,2]@[6,8]=22, ...
        assert tensor.matmul(a, b).tolist() == [[19, 22], [43, 50]]

    def test_dimension_error_names_both_shapes(self):
        a = tensor.as_tensor(np.zeros((3, 4)))
        b = tensor.as_tensor(np.zeros((5, 2)))
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
            tensor.matmul(a, b)

    def test_rejects_non_2d(self):
        with pytest.raises(ShapeError):
            tensor.matmul(tensor.as_tensor(np.zeros(3)), tensor.as_tensor(np.zeros((3, 2))))

    def test_matches_stepwise_accumulation_bitwise(self):
        rng = np.random.default_rng(0)
        for m, k, n in [(1, 1, 1), (5, 7, 3), (17, 33, 9), (64, 100, 32), (8, 512, 8)]:
            a = rng.standard_normal((m, k)).astype(np.float32)
            b = rng.standard_normal((k, n)).astype(np.float32)
            want = np.zeros((m, n), np.float32)
            for p in range(k):
                want += a[:, p : p + 1] * b[p : p + 1, :]
            assert np.array_equal(tensor.matmul(a, b), want)

    def test_inputs_not_mutated(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((4, 5)).astype(np.float32)
        b = rng.standard_normal((5, 6)).astype(np.float32)
        a0, b0 = a.copy(), b.copy()
        tensor.matmul(a, b)
        assert np.array_equal(a, a0) and np.array_equal(b, b0)

    def test_requires_float32(self):
        with pytest.raises(TypeError):
            tensor.matmul(np.eye(2), np.eye(2))  # float64


class TestConv2d:
    def test_scaling_case(self):
        x = tensor.as_tensor(np.ones((1, 1, 3, 3)))
        w = tensor.as_tensor(np.full((1, 1, 1, 1), 2.0))
        out = tensor.conv2d(x, w, stride=1, padding=0)
        assert np.array_equal(out, np.full((1, 1, 3, 3), 2.0, np.float32))

    def test_hand_worked_windows(self):
        x = tensor.as_tensor(np.arange(1, 10).reshape(1, 1, 3, 3))
        w = tensor.as_tensor(np.ones((1, 1, 2, 2)))
        out = tensor.conv2d(x, w)
        assert out.reshape(2, 2).tolist() == [[12, 16], [24, 28]]

    def test_channel_mismatch(self):
        x = tensor.as_tensor(np.zeros((1, 2, 4, 4)))
        w = tensor.as_tensor(np.zeros((1, 3, 2, 2)))
        with pytest.raises(ShapeError, match="channel"):
            tensor.conv2d(x, w)

    def test_non_integral_output_size(self):
        x = tensor.as_tensor(np.zeros((1, 1, 5, 5)))
        w = tensor.as_tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ConfigError):
            tensor.conv2d(x, w, stride=2, padding=0)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_equals_nested_loops_bitwise(self, stride, padding):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 2, 2)).astype(np.float32)
        got = tensor.conv2d(x, w, stride=stride, padding=padding)
        want = conv2d_loops(x, w, stride, padding)
        assert np.array_equal(got, want)

    def test_non_square_kernel_equals_nested_loops(self):
        rng = np.random.default_rng(43)
        x = rng.standard_normal((2, 2, 7, 9)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 2)).astype(np.float32)
        got = tensor.conv2d(x, w, stride=1, padding=1)
        want = conv2d_loops(x, w, 1, 1)
        assert np.array_equal(got, want)

    def test_inputs_not_mutated(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        x0, w0 = x.copy(), w.copy()
        tensor.conv2d(x, w, padding=1)
        assert np.array_equal(x, x0) and np.array_equal(w, w0)


class TestElementwise:
    def test_relu(self):
        assert tensor.relu(tensor.as_tensor([-1, 0, 2])).tolist() == [0, 0, 2]

    def test_add(self):
        out = tensor.add(tensor.as_tensor([1, 2]), tensor.as_tensor([3, 4]))
        assert out.tolist() == [4, 6]

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tensor.add(tensor.as_tensor([1, 2]), tensor.as_tensor([1, 2, 3]))

    def test_scale_by_zero(self):
        assert tensor.scale(tensor.as_tensor([1, -2]), 0.0).tolist() == [0, 0]

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
    def test_relu_is_nonnegative_and_shape_preserving(self, values):
        x = tensor.as_tensor(values)
        out = tensor.relu(x)
        assert out.shape == x.shape
        assert np.all(out >= 0)
        assert np.array_equal(out, np.where(x > 0, x, 0))


class TestMinmax:
    def test_basic(self):
        lo, hi = tensor.minmax(tensor.as_tensor([-1.2, 0.3, 4.0]))
        assert lo == pytest.approx(-1.2) and hi == pytest.approx(4.0)

    def test_degenerate_single_value(self):
        assert tensor.minmax(tensor.as_tensor([5.0])) == (5.0, 5.0)

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            tensor.minmax(tensor.as_tensor([]))

    @settings(max_examples=30)
    @given(st.lists(st.floats(-1e9, 1e9), min_size=1, max_size=40))
    def test_bounds_all_elements(self, values):
        x = tensor.as_tensor(values)
        lo, hi = tensor.minmax(x)
        assert lo <= hi
        assert np.all((x >= np.float32(lo)) & (x <= np.float32(hi)))
