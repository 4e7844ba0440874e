"""Central finite-difference checks (float64) for every operator and the full network."""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from ageatlas.agenet import AgeNet, NetConfig
from ageatlas.autodiff import (
    Tape,
    Tensor,
    add,
    backward,
    conv,
    conv3,
    flatten,
    gap,
    linear,
    mae_loss,
    projection1x1,
    relu,
    scale,
    stack,
)
from ageatlas.errors import NumericalError, ShapeError

EPS = 1e-6


def readout(t: Tensor, rng) -> Tensor:
    """Random linear functional of ``t`` as a (1,) tensor."""
    w = Tensor(rng.normal(size=(1, t.size)))
    return linear(flatten(t), w, Tensor(np.zeros(1)))


def dot(t: Tensor, r: Tensor) -> Tensor:
    return linear(flatten(t), r, Tensor(np.zeros(1)))


def check_gradients(fn, inputs, rng, samples=8):
    """Compare tape gradients of ``fn(*inputs)`` with central differences."""
    with Tape():
        loss = fn(*inputs)
    grads = backward(loss)
    for t in inputs:
        analytic = grads[t]
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for i in picks:
            saved = flat[i]
            flat[i] = saved + EPS
            up = fn(*inputs).item()
            flat[i] = saved - EPS
            down = fn(*inputs).item()
            flat[i] = saved
            numeric = (up - down) / (2 * EPS)
            np.testing.assert_allclose(analytic.reshape(-1)[i], numeric, rtol=1e-3, atol=1e-6)


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


SEEDS = range(20)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv3d(seed):
    rng = np.random.default_rng(seed)
    stride = 1 + seed % 2
    x, w, b = param(rng, 2, 5, 4, 3), param(rng, 3, 2, 3, 3, 3), param(rng, 3)
    r = Tensor(rng.normal(size=(1, 3 * int(np.prod([(n - 1) // stride + 1 for n in (5, 4, 3)])))))
    check_gradients(lambda x, w, b: dot(conv3(x, w, b, stride), r), [x, w, b], rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d(seed):
    rng = np.random.default_rng(100 + seed)
    stride = 1 + seed % 2
    x, w, b = param(rng, 2, 6, 5), param(rng, 2, 2, 3, 3), param(rng, 2)
    out_size = 2 * ((6 - 1) // stride + 1) * ((5 - 1) // stride + 1)
    r = Tensor(rng.normal(size=(1, out_size)))
    check_gradients(lambda x, w, b: dot(conv(x, w, b, stride), r), [x, w, b], rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_projection(seed):
    rng = np.random.default_rng(200 + seed)
    stride = 1 + seed % 2
    x, w = param(rng, 3, 5, 4, 3), param(rng, 2, 3)
    n = 2 * int(np.prod([(k - 1) // stride + 1 for k in (5, 4, 3)]))
    r = Tensor(rng.normal(size=(1, n)))
    check_gradients(lambda x, w: dot(projection1x1(x, w, stride), r), [x, w], rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_and_pooling(seed):
    rng = np.random.default_rng(300 + seed)
    a, b = param(rng, 2, 3, 4), param(rng, 2, 3, 4)
    r = Tensor(rng.normal(size=(1, 2)))
    check_gradients(
        lambda a, b: linear(gap(relu(add(scale(a, 1.7), b))), r, Tensor(np.zeros(1))), [a, b], rng
    )


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_stack_mae(seed):
    rng = np.random.default_rng(400 + seed)
    x, w, bias = param(rng, 5), param(rng, 3, 5), param(rng, 3)
    targets = rng.normal(size=3) * 3

    def fn(x, w, bias):
        h = linear(x, w, bias)
        return mae_loss(stack([readout_item(h, i) for i in range(3)]), targets)

    def readout_item(h, i):
        e = np.zeros((1, 3))
        e[0, i] = 1.0
        return linear(h, Tensor(e), Tensor(np.zeros(1)))

    check_gradients(fn, [x, w, bias], rng)


@pytest.mark.parametrize("seed", range(3))
def test_full_network(seed):
    rng = np.random.default_rng(500 + seed)
    config = NetConfig(channels=(2, 3, 4), hidden=5, input_dims=(6, 7, 5), seed=seed)
    net = AgeNet(config, mean_age=50.0)
    for t in net.params.values():
        t.data = t.data.astype(np.float64)
    x = Tensor(rng.normal(size=(1, 6, 7, 5)), requires_grad=True)
    names = ["stem.weight", "stage2.conv1.weight", "stage3.skip.weight", "fc1.bias", "fc2.weight"]

    def fn(x, *params):
        y, _ = net.apply(x)
        return mae_loss(y, [20.0])

    check_gradients(fn, [x] + [net.params[n] for n in names], rng, samples=4)


class TestTapeSemantics:
    def test_fan_out_is_summed(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        with Tape():
            loss = linear(add(x, x), Tensor(np.ones((1, 2))), Tensor(np.zeros(1)))
        grads = backward(loss)
        np.testing.assert_array_equal(grads[x], [2.0, 2.0])
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_relu_derivative_at_zero(self):
        x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
        with Tape():
            loss = linear(relu(x), Tensor(np.ones((1, 2))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(backward(loss)[x], [0.0, 1.0])

    def test_mae_derivative_at_zero_error(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        with Tape():
            loss = mae_loss(p, [3.0])
        assert backward(loss)[p][0] == 0.0

    def test_retained_intermediate(self, rng):
        x = param(rng, 2, 3)
        with Tape():
            h = relu(x)
            loss = readout(h, rng)
        grads = backward(loss, retain=[h.node_id])
        assert grads[h].shape == (2, 3)

    def test_values_without_tape(self, rng):
        y = relu(Tensor(np.array([-1.0, 2.0])))
        assert y.node_id is None
        np.testing.assert_array_equal(y.data, [0.0, 2.0])

    def test_backward_requires_tape(self):
        with pytest.raises(ValueError):
            backward(Tensor(np.ones(1)))

    def test_backward_requires_scalar(self, rng):
        x = param(rng, 3)
        with Tape():
            y = scale(x, 2.0)
        with pytest.raises(ShapeError):
            backward(y)

    def test_unknown_retained_node(self, rng):
        x = param(rng, 1)
        with Tape():
            y = scale(x, 2.0)
        with pytest.raises(ValueError):
            backward(y, retain=[99])

    def test_shape_errors(self, rng):
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
        with pytest.raises(ShapeError):
            conv(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
        with pytest.raises(ShapeError):
            mae_loss(Tensor(np.zeros(2)), [1.0])

    def test_non_finite_output(self):
        with pytest.raises(NumericalError):
            scale(Tensor(np.array([1e308])), 1e10)

    def test_shared_parameters_across_threads(self, rng):
        w = param(rng, 1, 4)
        b = Tensor(np.zeros(1), requires_grad=True)
        inputs = [rng.normal(size=4) for _ in range(8)]

        def grad_of(x):
            with Tape():
                loss = linear(Tensor(x), w, b)
            return backward(loss, set_leaf_grads=False)[w]

        with ThreadPoolExecutor(max_workers=4) as pool:
            results = list(pool.map(grad_of, inputs))
        for x, g in zip(inputs, results):
            np.testing.assert_allclose(g, x[None, :])

    @pytest.mark.parametrize("seed", range(5))
    def test_backward_is_linear(self, seed):
        rng = np.random.default_rng(400 + seed)
        x, w, b = param(rng, 2, 5, 4, 3), param(rng, 3, 2, 3, 3, 3), param(rng, 3)
        r1, r2 = Tensor(rng.normal(size=(1, 3))), Tensor(rng.normal(size=(1, 3)))

        def features():
            return gap(relu(conv3(x, w, b)))

        def grads_of(loss_fn):
            with Tape():
                loss = loss_fn(features())
            grads = backward(loss, set_leaf_grads=False)
            return [grads[t] for t in (x, w, b)]

        g1 = grads_of(lambda h: dot(h, r1))
        g2 = grads_of(lambda h: dot(h, r2))
        combined = grads_of(lambda h: add(scale(dot(h, r1), 2.0), scale(dot(h, r2), -0.5)))
        for a, b1, b2 in zip(combined, g1, g2):
            np.testing.assert_allclose(a, 2.0 * b1 - 0.5 * b2, rtol=0, atol=1e-5)

    def test_replay_is_bit_identical(self, rng):
        x, w, b = param(rng, 2, 6, 5, 4), param(rng, 3, 2, 3, 3, 3), param(rng, 3)
        r = Tensor(rng.normal(size=(1, 3)))

        def record():
            with Tape() as tape:
                loss = dot(gap(relu(conv3(x, w, b, stride=2))), r)
            grads = backward(loss, set_leaf_grads=False)
            return tape, loss, [grads[t] for t in (x, w, b)]

        tape1, loss1, grads1 = record()
        tape2, loss2, grads2 = record()
        assert [(n.op, n.inputs, n.shape) for n in tape1.nodes] == [
            (n.op, n.inputs, n.shape) for n in tape2.nodes
        ]
        assert np.array_equal(loss1.data, loss2.data)
        for g1, g2 in zip(grads1, grads2):
            assert np.array_equal(g1, g2)
