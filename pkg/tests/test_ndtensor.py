import threading

import numpy as np
import pytest

from aetransfer import ndtensor as nd
from aetransfer.ndtensor import Tape, Tensor

from gradcheck import max_rel_error, numeric_grad


def naive_conv(x, w, stride, pad):
    """Direct sliding-window sum."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, oc, i, j] = np.sum(patch * w[oc])
    return out


def away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


class TestForwardDefinitions:
    def test_relu(self):
        assert nd.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_additive_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        assert np.array_equal(nd.add(x, nd.zeros_like(x)).data, x.data)

    def test_conv_of_ones(self):
        out = nd.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), 1, 0)
        assert out.shape == (1, 1, 2, 2)
        assert np.all(out.data == 4.0)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_conv_matches_sliding_window(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x, w = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3))
        got = nd.conv2d(Tensor(x), Tensor(w), stride, pad).data
        np.testing.assert_allclose(got, naive_conv(x, w, stride, pad), rtol=1e-12, atol=1e-12)

    def test_softmax_cross_entropy_value(self):
        z = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
        y = np.array([1, 2])
        expected = np.mean([-np.log(np.exp(z[i, y[i]]) / np.exp(z[i]).sum()) for i in range(2)])
        assert nd.softmax_cross_entropy(Tensor(z), y).item() == pytest.approx(expected, rel=1e-14)

    def test_hinge_value(self):
        s = np.array([[3.0, 1.0, 2.5], [0.0, 2.0, 1.0]])
        y = np.array([0, 1])
        # row 0: max(0, 1+1-3) + max(0, 1+2.5-3) = 0.5 ; row 1: 0 + max(0, 1+1-2) = 0
        assert nd.hinge_loss(Tensor(s), y).item() == pytest.approx(0.25)

    def test_global_avg_pool_and_abs(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4) - 8
        assert nd.global_avg_pool(Tensor(x)).data.tolist() == [[-0.5]]
        assert nd.reduce_sum(nd.abs_(Tensor(x))).item() == np.abs(x).sum()

    def test_forward_primitive_dispatch(self):
        out = nd.forward_primitive("relu", [Tensor([-2.0, 3.0])])
        assert out.data.tolist() == [0.0, 3.0]
        with pytest.raises(ValueError):
            nd.forward_primitive("tanh", [Tensor([1.0])])

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        x, w = Tensor(rng.normal(size=(3, 2, 6, 6))), Tensor(rng.normal(size=(4, 2, 3, 3)))
        a = nd.conv2d(x, w, 1, 1).data
        b = nd.conv2d(x, w, 1, 1).data
        assert a.tobytes() == b.tobytes()


class TestErrors:
    def test_shape_mismatch_names_op(self):
        with pytest.raises(nd.ShapeError, match="matmul.*\\(2, 3\\).*\\(4, 2\\)"):
            nd.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with pytest.raises(nd.ShapeError, match="conv2d"):
            nd.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
        with pytest.raises(nd.ShapeError, match="add"):
            nd.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_output(self):
        with pytest.raises(nd.NonFiniteError, match="scalar_mul"):
            nd.scalar_mul(Tensor([1e308]), 1e10)

    def test_non_finite_input(self):
        with pytest.raises(nd.NonFiniteError):
            Tensor([np.nan])

    def test_backward_twice(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = nd.reduce_sum(x)
        tape.backward(loss)
        with pytest.raises(nd.TapeError):
            nd.backward(loss)

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = nd.relu(x)
        with pytest.raises(nd.ShapeError):
            tape.backward(y)

    def test_empty_tape(self):
        with Tape() as tape:
            loss = nd.reduce_sum(Tensor([1.0]))
        with pytest.raises(nd.TapeError):
            tape.backward(loss)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4)), requires_grad=True)
        with Tape():
            loss = nd.reduce_sum(x)
        nd.backward(loss)
        assert np.all(x.grad == 1.0)

    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape():
            loss = nd.reduce_sum(nd.mul(x, x))
        nd.backward(loss)
        assert x.grad.tolist() == [6.0]

    def test_tape_cleared(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = nd.reduce_sum(nd.mul(x, x))
        assert len(tape) == 2
        tape.backward(loss)
        assert len(tape) == 0 and tape.consumed

    def test_no_recording_without_grad(self):
        with Tape() as tape:
            nd.relu(Tensor([1.0]))
        assert len(tape) == 0

    def test_gradient_linearity(self):
        rng = np.random.default_rng(2)
        x0, w = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))

        def grad_of(losses):
            x = Tensor(x0, requires_grad=True)
            with Tape() as tape:
                h = nd.matmul(x, Tensor(w))
                parts = [nd.reduce_sum(nd.relu(h)), nd.reduce_sum(nd.mul(h, h))]
                total = parts[0]
                for p in parts[1:]:
                    total = nd.add(total, p)
                chosen = total if losses == "both" else parts[losses]
            tape.backward(chosen)
            return x.grad

        np.testing.assert_allclose(grad_of("both"), grad_of(0) + grad_of(1), rtol=0, atol=1e-12)

    def test_tapes_are_thread_local(self):
        results = {}

        def work(tag, value):
            x = Tensor([value], requires_grad=True)
            with Tape() as tape:
                loss = nd.reduce_sum(nd.mul(x, x))
            tape.backward(loss)
            results[tag] = x.grad[0]

        threads = [threading.Thread(target=work, args=(i, float(i))) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {i: 2.0 * i for i in range(4)}


def _check(build, *arrays, tol=1e-4):
    """Analytic gradients of sum(weights * build(*tensors)) against finite differences."""
    rng = np.random.default_rng(99)
    out_shape = build(*[Tensor(a) for a in arrays]).shape
    weights = rng.normal(size=out_shape)

    def scalar(*arrs):
        return float(np.sum(weights * build(*[Tensor(a) for a in arrs]).data))

    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = nd.reduce_sum(nd.mul(build(*ts), Tensor(weights)))
    tape.backward(loss)
    worst = 0.0
    for i, (t, a) in enumerate(zip(ts, arrays)):
        def f(v, i=i):
            arrs = list(arrays)
            arrs[i] = v
            return scalar(*arrs)
        worst = max(worst, max_rel_error(t.grad, numeric_grad(f, a)))
    assert worst < tol, worst
    return worst


class TestPrimitiveGradients:
    rng = np.random.default_rng(7)

    def test_add_broadcast(self):
        _check(nd.add, self.rng.normal(size=(3, 4, 2, 2)), self.rng.normal(size=(4, 1, 1)))

    def test_mul(self):
        _check(nd.mul, self.rng.normal(size=(3, 4)), self.rng.normal(size=(3, 4)))

    def test_scalar_mul(self):
        _check(lambda a: nd.scalar_mul(a, -2.5), self.rng.normal(size=(5,)))

    def test_matmul(self):
        _check(nd.matmul, self.rng.normal(size=(3, 4)), self.rng.normal(size=(4, 2)))

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
    def test_conv2d(self, stride, pad):
        _check(lambda x, w: nd.conv2d(x, w, stride, pad),
               self.rng.normal(size=(2, 2, 5, 5)), self.rng.normal(size=(3, 2, 3, 3)))

    def test_relu(self):
        _check(nd.relu, away_from_zero(self.rng, (4, 6)))

    def test_abs(self):
        _check(nd.abs_, away_from_zero(self.rng, (4, 6)))

    def test_reshape(self):
        _check(lambda a: nd.reshape(a, (6, 4)), self.rng.normal(size=(2, 3, 4)))

    def test_global_avg_pool(self):
        _check(nd.global_avg_pool, self.rng.normal(size=(2, 3, 4, 4)))

    def test_reduce_sum_axis(self):
        _check(lambda a: nd.reduce_sum(a, axis=1), self.rng.normal(size=(3, 4, 2)))

    def test_softmax_cross_entropy(self):
        _check(lambda z: nd.softmax_cross_entropy(z, [0, 2, 1]), self.rng.normal(size=(3, 4)))

    def test_hinge(self):
        # scores spaced so no margin sits within the finite-difference step of its kink
        s = np.array([[0.3, 1.9, -0.7, 0.8], [2.2, 0.1, 0.65, -1.3], [-0.4, 0.45, 1.7, 0.0]])
        _check(lambda z: nd.hinge_loss(z, [1, 0, 3]), s)
