import numpy as np
import pytest

from tmlnet.tensor import Shape, as_tensor, reduce_mean, shape_of, tensor_new, window


class TestShape:
    def test_valid(self):
        s = Shape(3, 2, 2)
        assert s.size == 12
        assert s.as_tuple() == (3, 2, 2)

    @pytest.mark.parametrize("dims", [(0, 1, 1), (1, -2, 1), (1, 1, 0)])
    def test_rejects_nonpositive(self, dims):
        with pytest.raises(ValueError):
            Shape(*dims)

    def test_rejects_overflowing_product(self):
        with pytest.raises(ValueError):
            Shape(2**31, 2**31, 2**31)


class TestTensorNew:
    def test_fill_zero(self):
        t = tensor_new(Shape(2, 2, 1), 0.0)
        assert t.shape == (2, 2, 1)
        assert np.all(t == 0.0)

    def test_fill_value(self):
        t = tensor_new(Shape(1, 1, 1), 7.5)
        assert t[0, 0, 0] == 7.5

    def test_row_major_layout(self):
        # (i, j, k) -> i*cols*channels + j*channels + k; last index (2,1,1)
        # must land in the final flat slot.
        t = tensor_new(Shape(3, 2, 2), 1.0)
        assert np.all(t == 1.0)
        t[2, 1, 1] = 9.0
        assert t.ravel(order="C")[-1] == 9.0

    def test_write_read_round_trip(self):
        rng = np.random.default_rng(0)
        t = tensor_new(Shape(4, 5, 3))
        for _ in range(50):
            i, j, k = rng.integers(0, [4, 5, 3])
            v = float(rng.normal())
            t[i, j, k] = v
            assert t[i, j, k] == v


class TestWindow:
    def test_identity_window(self):
        t = as_tensor(np.arange(12.0).reshape(3, 4, 1))
        assert np.array_equal(window(t, 0, 0, 3, 4), t)

    def test_single_fiber(self):
        t = as_tensor(np.arange(24.0).reshape(3, 4, 2))
        w = window(t, 1, 2, 1, 1)
        assert w.shape == (1, 1, 2)
        assert np.array_equal(w[0, 0], t[1, 2])

    def test_column_window(self):
        # hand-indexed: column j=1 of [[1,2],[3,4]] is [2, 4]
        t = as_tensor([[1.0, 2.0], [3.0, 4.0]])
        w = window(t, 0, 1, 2, 1)
        assert w.shape == (2, 1, 1)
        assert np.array_equal(w[:, 0, 0], [2.0, 4.0])

    def test_out_of_bounds_rejected(self):
        t = tensor_new(Shape(3, 3, 1))
        for args in [(2, 0, 2, 1), (0, 3, 1, 1), (-1, 0, 1, 1), (0, 0, 4, 1), (0, 0, 0, 1)]:
            with pytest.raises(IndexError):
                window(t, *args)

    def test_window_of_window_composes(self):
        rng = np.random.default_rng(1)
        t = as_tensor(rng.random((6, 7, 2)))
        inner = window(window(t, 1, 2, 4, 4), 2, 1, 2, 2)
        assert np.array_equal(inner, window(t, 3, 3, 2, 2))


class TestReduceMean:
    def test_global_mean(self):
        t = as_tensor([[1.0, 3.0], [5.0, 7.0]])
        assert reduce_mean(t) == 4.0

    def test_all_zero(self):
        assert reduce_mean(tensor_new(Shape(3, 3, 2))) == 0.0

    def test_per_channel(self):
        # channel 0 holds {1, 3}, channel 1 holds {10, 30}
        t = np.array([[[1.0, 10.0], [3.0, 30.0]]])
        assert np.array_equal(reduce_mean(t, per_channel=True), [2.0, 20.0])

    def test_constant_tensor_mean_is_constant(self):
        t = tensor_new(Shape(4, 3, 5), 2.25)
        assert reduce_mean(t) == 2.25
        assert np.all(reduce_mean(t, per_channel=True) == 2.25)


def test_shape_of_round_trip():
    s = Shape(2, 3, 4)
    assert shape_of(tensor_new(s)) == s


def test_as_tensor_promotes_2d():
    t = as_tensor([[1.0, 2.0]])
    assert t.shape == (1, 2, 1)


def test_as_tensor_rejects_other_ranks():
    with pytest.raises(ValueError):
        as_tensor(np.zeros(3))
    with pytest.raises(ValueError):
        as_tensor(np.zeros((2, 2, 2, 2)))
