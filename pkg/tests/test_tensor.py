import math

import numpy as np
import oracles
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adnet.errors import ContractError, DimensionError, ParameterError, PropagationError
from adnet.tensor import (
    LrSchedule,
    OptimizerState,
    Tensor,
    adamw_step,
    concatenate,
    conv2d,
    cosine_lr,
    depth_to_space,
    gelu,
    grad_check,
    l2_normalize,
    layer_norm,
    matmul,
    maximum_over,
    pad2d,
    simple_gate,
    softmax_lastdim,
    space_to_depth,
)
from adnet.tensor.gradcheck import weighted_sum

SOBEL_GX = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


def t64(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)))
        np.testing.assert_array_equal(out.data, x)

    def test_sobel_on_vertical_step(self):
        x = np.zeros((1, 1, 5, 5))
        x[..., 2:] = 1.0
        out = conv2d(Tensor(x), Tensor(SOBEL_GX[None, None])).data[0, 0]
        # valid outputs are centred on input columns 1..3; the step lies between columns 1 and 2
        np.testing.assert_array_equal(out, [[4, 4, 0]] * 3)

    def test_depthwise_channels_independent(self, rng):
        x = rng.standard_normal((1, 8, 6, 6))
        w = Tensor(rng.standard_normal((8, 1, 3, 3)))
        base = conv2d(Tensor(x), w, padding=1, groups=8).data
        assert base.shape[1] == 8
        for j in range(8):
            xz = x.copy()
            xz[:, j] = 0
            diff = np.abs(conv2d(Tensor(xz), w, padding=1, groups=8).data - base).reshape(8, -1).max(axis=1)
            assert diff[j] > 0
            assert np.all(np.delete(diff, j) == 0)

    @pytest.mark.parametrize("groups,wshape,stride,padding", [
        (1, (3, 4, 3, 3), 1, 1), (1, (3, 4, 3, 3), 2, 1), (1, (5, 4, 1, 1), 1, 0),
        (4, (4, 1, 3, 3), 1, 1), (4, (4, 1, 3, 3), 2, 0), (2, (6, 2, 3, 3), 1, 1),
    ])
    def test_matches_loop_oracle(self, rng, groups, wshape, stride, padding):
        x = rng.standard_normal((2, 4, 7, 6))
        w = rng.standard_normal(wshape)
        b = rng.standard_normal(wshape[0])
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding, groups=groups).data
        np.testing.assert_allclose(got, oracles.conv(x, w, b, stride, padding, groups), atol=1e-12)

    def test_shape_errors(self):
        x = Tensor(np.zeros((1, 4, 5, 5)))
        with pytest.raises(DimensionError, match="groups"):
            conv2d(x, Tensor(np.zeros((4, 1, 3, 3))), groups=3)
        with pytest.raises(DimensionError, match="input-channel extent"):
            conv2d(x, Tensor(np.zeros((4, 3, 3, 3))))

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2 ** 16))
    def test_linearity(self, a, b, seed):
        r = np.random.default_rng(seed)
        x, y = r.standard_normal((1, 2, 5, 5)), r.standard_normal((1, 2, 5, 5))
        w = Tensor(r.standard_normal((3, 2, 3, 3)))
        lhs = conv2d(Tensor(a * x + b * y), w, padding=1).data
        rhs = a * conv2d(Tensor(x), w, padding=1).data + b * conv2d(Tensor(y), w, padding=1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)


class TestLayerNorm:
    def test_constant_input_gives_zero(self):
        out = layer_norm(Tensor(np.full((1, 4, 3, 3), 2.5)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.all(out.data == 0)

    def test_two_channel_closed_form(self):
        x = np.array([1.0, 3.0]).reshape(1, 2, 1, 1)
        out = layer_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_array_equal(out.data.ravel(), [-1.0, 1.0])

    def test_recomputation_oracle(self, rng):
        x = rng.standard_normal((2, 4, 4, 4))
        out = layer_norm(Tensor(x), eps=1e-6).data
        for n in range(2):
            for i in range(4):
                for j in range(4):
                    col = out[n, :, i, j]
                    assert abs(col.mean()) < 1e-6
                    v = x[n, :, i, j].var()
                    assert abs(col.var() - v / (v + 1e-6)) < 1e-6

    def test_negative_eps_rejected(self):
        with pytest.raises(ParameterError):
            layer_norm(Tensor(np.zeros((1, 2, 1, 1))), eps=-1e-3)


class TestSoftmax:
    def test_uniform_slice(self):
        np.testing.assert_allclose(softmax_lastdim(Tensor(np.zeros(4))).data, 0.25)

    def test_ln3(self):
        np.testing.assert_allclose(softmax_lastdim(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-7)

    def test_large_values_stable(self):
        out = softmax_lastdim(Tensor([1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.5, 0.5])

    def test_nan_rejected(self):
        with pytest.raises(PropagationError):
            softmax_lastdim(Tensor([0.0, float("nan")]))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_sums_to_one_and_positive(self, values):
        out = softmax_lastdim(Tensor(np.array(values, dtype=np.float64))).data
        assert abs(out.sum() - 1.0) < 1e-6
        assert np.all(out > 0)


class TestSimpleGate:
    def test_unit_gate(self, rng):
        x = rng.standard_normal((1, 4, 3, 3))
        x[:, :2] = 1.0
        np.testing.assert_array_equal(simple_gate(Tensor(x)).data, x[:, 2:])

    def test_zero_half_annihilates(self, rng):
        x = rng.standard_normal((1, 4, 3, 3))
        x[:, 2:] = 0.0
        assert np.all(simple_gate(Tensor(x)).data == 0)

    def test_direct_product(self, rng):
        x = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
        np.testing.assert_allclose(simple_gate(Tensor(x)).data, x[:, :2] * x[:, 2:], atol=1e-7)

    def test_odd_channels(self):
        with pytest.raises(DimensionError):
            simple_gate(Tensor(np.zeros((1, 3, 2, 2))))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = t64(rng.standard_normal((2, 3, 4)))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square(self):
        x = t64([1.0, 2.0])
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_rejected(self):
        x = t64([1.0, 2.0])
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_shared_node_visited_once(self):
        x = t64([3.0])
        y = x * 2.0
        (y + y * y).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0 + 8.0 * 3.0])

    def test_graph_released_after_backward(self):
        x = t64([1.0])
        y = x * 2.0
        loss = (y * y).sum()
        loss.backward()
        assert loss._parents == () and y._parents == ()

    def test_composite_conv_ln_softmax(self, rng):
        x = t64(rng.standard_normal((1, 2, 4, 4)))
        w = t64(rng.standard_normal((3, 2, 3, 3)))
        g = t64(rng.uniform(0.5, 1.5, 3))
        b = t64(rng.standard_normal(3))
        r = rng.standard_normal((1, 3, 4, 4))

        def f():
            return weighted_sum(softmax_lastdim(layer_norm(conv2d(x, w, padding=1), g, b)), r)

        assert grad_check(f, [x, w, g, b]).max_rel_error < 1e-4


def _gc(fn, inputs, **kw):
    return grad_check(fn, inputs, **kw).max_rel_error


@pytest.mark.parametrize("name", [
    "add_broadcast", "mul_broadcast", "div", "pow", "matmul", "reshape_transpose", "getitem", "concat", "mean",
    "max_axis", "max_global", "abs", "exp", "sqrt", "tanh", "sigmoid", "clip", "gelu", "l2_normalize",
    "maximum_over", "pad_edge", "pad_reflect", "space_depth",
])
def test_op_gradients(rng, name):
    a = t64(rng.standard_normal((2, 3, 4, 4)))
    b = t64(rng.standard_normal((1, 3, 1, 4)))
    pos = t64(rng.uniform(0.5, 2.0, (2, 3, 4, 4)))
    cases = {
        "add_broadcast": (lambda: a + b, [a, b]),
        "mul_broadcast": (lambda: a * b, [a, b]),
        "div": (lambda: a / pos, [a, pos]),
        "pow": (lambda: pos ** 1.7, [pos]),
        "matmul": (lambda: matmul(a, a.transpose(0, 1, 3, 2)), [a]),
        "reshape_transpose": (lambda: a.reshape(2, 12, 4).transpose(2, 0, 1), [a]),
        "getitem": (lambda: a[:, 1:, ::2], [a]),
        "concat": (lambda: concatenate([a, pos], axis=1), [a, pos]),
        "mean": (lambda: a.mean(axis=(1, 2), keepdims=True), [a]),
        "max_axis": (lambda: a.max(axis=1, keepdims=True), [a]),
        "max_global": (lambda: a.reshape(2, -1).max(axis=1), [a]),
        "abs": (lambda: a.abs(), [a]),
        "exp": (lambda: a.exp(), [a]),
        "sqrt": (lambda: pos.sqrt(), [pos]),
        "tanh": (lambda: a.tanh(), [a]),
        "sigmoid": (lambda: a.sigmoid(), [a]),
        "clip": (lambda: a.clip(-0.5, 0.5), [a]),
        "gelu": (lambda: gelu(a), [a]),
        "l2_normalize": (lambda: l2_normalize(a), [a]),
        "maximum_over": (lambda: maximum_over([a, pos, -a]), [a, pos]),
        "pad_edge": (lambda: pad2d(a, 1, mode="edge"), [a]),
        "pad_reflect": (lambda: pad2d(a, 2, mode="reflect"), [a]),
        "space_depth": (lambda: depth_to_space(space_to_depth(a) * 2.0), [a]),
    }
    fn, inputs = cases[name]
    r = rng.standard_normal(fn().shape)
    assert _gc(lambda: weighted_sum(fn(), r), inputs) <= 1e-4


@pytest.mark.parametrize("groups,wshape,stride,padding", [
    (1, (3, 4, 3, 3), 1, 1), (1, (3, 4, 3, 3), 2, 1), (1, (5, 4, 1, 1), 1, 0), (4, (4, 1, 3, 3), 1, 1),
    (2, (6, 2, 3, 3), 2, 1),
])
def test_conv_gradients(rng, groups, wshape, stride, padding):
    x = t64(rng.standard_normal((2, 4, 6, 5)))
    w = t64(rng.standard_normal(wshape))
    b = t64(rng.standard_normal(wshape[0]))
    r = rng.standard_normal(conv2d(x, w, b, stride, padding, groups).shape)
    assert _gc(lambda: weighted_sum(conv2d(x, w, b, stride, padding, groups), r), [x, w, b]) <= 1e-4


def test_norm_softmax_gate_gradients(rng):
    x = t64(rng.standard_normal((2, 4, 3, 3)))
    g = t64(rng.uniform(0.5, 1.5, 4))
    b = t64(rng.standard_normal(4))
    r = rng.standard_normal((2, 4, 3, 3))
    assert _gc(lambda: weighted_sum(layer_norm(x, g, b), r), [x, g, b]) <= 1e-4
    assert _gc(lambda: weighted_sum(softmax_lastdim(x), r), [x]) <= 1e-4
    r2 = rng.standard_normal((2, 2, 3, 3))
    assert _gc(lambda: weighted_sum(simple_gate(x), r2), [x]) <= 1e-4


class TestAdamW:
    def test_zero_grad_no_decay_is_noop(self):
        p = np.array([1.0, -2.0])
        state = OptimizerState(learning_rate=0.1, weight_decay=0.0)
        adamw_step(state, [p], [np.zeros(2)])
        np.testing.assert_array_equal(p, [1.0, -2.0])

    def test_decoupled_decay(self):
        p = np.array([1.0])
        state = OptimizerState(learning_rate=0.1, weight_decay=0.1)
        adamw_step(state, [p], [np.zeros(1)])
        np.testing.assert_allclose(p, [0.99], rtol=0, atol=1e-15)

    def test_first_step_by_hand(self):
        p = np.array([1.0])
        state = OptimizerState(learning_rate=1e-3)
        adamw_step(state, [p], [np.ones(1)])
        # decay 1 - 1e-3 * 1e-4, then m_hat = v_hat = 1 so the step is lr / (1 + eps)
        expected = (1.0 - 1e-7) - 1e-3 / (1.0 + 1e-8)
        np.testing.assert_allclose(p, [expected], rtol=0, atol=1e-15)
        assert abs(p[0] - 0.999) < 2e-7
        assert state.t == 1

    def test_step_count_and_shapes(self):
        p = np.zeros((2, 2))
        state = OptimizerState()
        for k in range(3):
            adamw_step(state, [p], [np.ones((2, 2))])
            assert state.t == k + 1
            assert state.m[0].shape == p.shape
        with pytest.raises(DimensionError):
            adamw_step(state, [p], [np.ones(3)])


class TestCosineLr:
    sched = LrSchedule(total_steps=1000)

    def test_endpoints(self):
        assert cosine_lr(self.sched, 0) == pytest.approx(3e-4, abs=1e-18)
        assert cosine_lr(self.sched, 1000) == pytest.approx(1e-6, abs=1e-18)

    def test_midpoint(self):
        assert cosine_lr(self.sched, 500) == pytest.approx(1.505e-4, rel=1e-12)

    def test_clamped(self):
        assert cosine_lr(self.sched, -5) == cosine_lr(self.sched, 0)
        assert cosine_lr(self.sched, 5000) == cosine_lr(self.sched, 1000)

    def test_monotone(self):
        lrs = [cosine_lr(self.sched, t) for t in range(1001)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_determinism(rng):
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = softmax_lastdim(layer_norm(conv2d(Tensor(x), Tensor(w), padding=1))).data
    b = softmax_lastdim(layer_norm(conv2d(Tensor(x), Tensor(w), padding=1))).data
    assert a.tobytes() == b.tobytes()


def test_float32_preserved_through_elementwise_ops(rng):
    x = Tensor(rng.standard_normal((1, 4, 3, 3)).astype(np.float32))
    g = Tensor(np.ones(4, dtype=np.float32))
    b = Tensor(np.zeros(4, dtype=np.float32))
    outs = [gelu(x), simple_gate(x), layer_norm(x, g, b), softmax_lastdim(x), l2_normalize(x),
            x.sigmoid(), (x * 2.5 + 1.0) / 3.0, x.clip(0.0, 1.0)]
    assert all(o.dtype == np.float32 for o in outs)
