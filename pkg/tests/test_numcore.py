"""Tape, optimizer, and schedule tests. The master check is agreement of
every op's adjoint with central finite differences."""

import math

import numpy as np
import pytest

from invae.numcore import (
    AdamState,
    NumericError,
    PlateauSchedule,
    ShapeError,
    Tape,
    TapeStateError,
    adam_step,
    plateau_update,
)


def central_diff(f, x0, h=1e-5):
    """Independent gradient oracle: central differences, entry by entry."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x0.copy()
        xm = x0.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-6))


def grad_check(build, x0, tol=1e-4):
    """build(tape, x_node) -> scalar node; compares tape grad to central diff."""
    tape = Tape()
    xn = tape.param(x0)
    out = build(tape, xn)
    tape.backward(out)

    def value(x):
        t2 = Tape()
        return float(build(t2, t2.param(x)).value)

    assert rel_err(xn.grad, central_diff(value, x0)) < tol


class TestForward:
    def test_leaky_relu_negative(self):
        tape = Tape()
        out = tape.leaky_relu(tape.constant(np.array([[-2.0]])), 0.5)
        assert out.value[0, 0] == -1.0

    def test_mse_identical_is_zero(self):
        tape = Tape()
        x = tape.constant(np.arange(6.0).reshape(2, 3))
        assert tape.mse(x, x).value == 0.0

    def test_matmul_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        b = rng.normal(size=(3, 3))
        tape = Tape()
        got = tape.matmul(tape.constant(a), tape.constant(b)).value
        want = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    want[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)

    def test_shape_mismatch_raises(self):
        tape = Tape()
        a = tape.constant(np.zeros((2, 3)))
        b = tape.constant(np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            tape.matmul(a, b)

    def test_mse_nan_flagged(self):
        tape = Tape()
        a = tape.constant(np.array([[np.nan]]))
        b = tape.constant(np.array([[0.0]]))
        with pytest.raises(NumericError):
            tape.mse(a, b)


class TestBackward:
    def test_mse_scalar_case(self):
        # mean convention: d/dx mean((x-0)^2) at x=3, n=1 -> 6
        tape = Tape()
        x = tape.param(np.array([[3.0]]))
        loss = tape.mse(x, tape.constant(np.array([[0.0]])))
        tape.backward(loss)
        assert x.grad[0, 0] == pytest.approx(6.0)

    def test_leaky_relu_negative_slope_gradient(self):
        tape = Tape()
        x = tape.param(np.array([[-2.0, 3.0]]))
        loss = tape.sum(tape.leaky_relu(x, 0.5))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [[0.5, 1.0]])

    def test_backward_on_foreign_node(self):
        t1 = Tape()
        loss = t1.sum(t1.param(np.ones((2, 2))))
        t2 = Tape()
        with pytest.raises(TapeStateError):
            t2.backward(loss)

    def test_backward_on_empty_tape(self):
        t1 = Tape()
        loss = t1.sum(t1.param(np.ones(2)))
        with pytest.raises(TapeStateError):
            Tape().backward(loss)

    def test_gradient_linearity(self):
        rng = np.random.default_rng(1)
        x0 = rng.normal(size=(4, 3))
        tgt = rng.normal(size=(4, 3))

        def grad_of(a, b):
            tape = Tape()
            x = tape.param(x0)
            l1 = tape.mse(x, tape.constant(tgt))
            l2 = tape.sum(tape.square(x))
            tape.backward(tape.add(tape.scale(l1, a), tape.scale(l2, b)))
            return x.grad

        g = grad_of(2.0, 3.0)
        np.testing.assert_allclose(
            g, 2.0 * grad_of(1.0, 0.0) + 3.0 * grad_of(0.0, 1.0), atol=1e-12
        )


OPS = {
    "matmul": lambda t, x: t.sum(t.matmul(x, t.constant(np.arange(12.0).reshape(4, 3) / 7))),
    "transpose": lambda t, x: t.sum(t.square(t.transpose(x))),
    "add_bias": lambda t, x: t.sum(t.square(t.add_bias(x, t.constant(np.arange(4.0) / 3)))),
    "leaky_relu": lambda t, x: t.sum(t.square(t.leaky_relu(x, 0.5))),
    "exp": lambda t, x: t.sum(t.exp(t.scale(x, 0.3))),
    "exp_scale": lambda t, x: t.sum(t.exp_scale(x, -0.4)),
    "mean": lambda t, x: t.mean(t.square(x)),
    "sum_rows": lambda t, x: t.sum(t.square(t.sum_rows(x))),
    "mse": lambda t, x: t.mse(x, t.constant(np.ones((3, 4)))),
    "slice_cols": lambda t, x: t.sum(t.square(t.slice_cols(x, [0, 2]))),
    "slice_rows": lambda t, x: t.sum(t.square(t.slice_rows(x, 1, 3))),
    "extreme_mean_top": lambda t, x: t.sum(t.square(t.extreme_mean(x, 2, True))),
    "extreme_mean_bot": lambda t, x: t.sum(t.square(t.extreme_mean(x, 2, False))),
    "weighted_sum": lambda t, x: t.weighted_sum(
        t.square(x), np.arange(12.0).reshape(3, 4) / 5
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    x0 = rng.normal(size=(3, 4))
    grad_check(OPS[name], x0)


def test_pairwise_sqdist_gradients():
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(4, 3))
    y0 = rng.normal(size=(5, 3))

    def build(t, x):
        return t.sum(t.exp_scale(t.pairwise_sqdist(x, t.constant(y0)), -0.25))

    grad_check(build, x0)


def test_concat_rows_gradients():
    rng = np.random.default_rng(8)
    x0 = rng.normal(size=(4, 3))

    def build(t, x):
        top = t.slice_rows(x, 0, 2)
        bot = t.slice_rows(x, 2, 4)
        return t.sum(t.square(t.concat_rows([bot, top])))

    grad_check(build, x0)


def test_two_layer_mlp_gradients_against_finite_differences():
    # 2-layer MLP with ~50 parameters, the module's stated master test
    rng = np.random.default_rng(9)
    X = rng.normal(size=(6, 5))
    target = rng.normal(size=(6, 2))
    w1_0 = rng.normal(size=(5, 6)) * 0.4
    w2_0 = rng.normal(size=(6, 2)) * 0.4

    def loss_nodes(t, w1, w2):
        h = t.leaky_relu(t.matmul(t.constant(X), w1), 0.5)
        out = t.matmul(h, w2)
        return t.mse(out, t.constant(target))

    tape = Tape()
    w1 = tape.param(w1_0)
    w2 = tape.param(w2_0)
    tape.backward(loss_nodes(tape, w1, w2))

    def value(w1v, w2v):
        t = Tape()
        return float(loss_nodes(t, t.param(w1v), t.param(w2v)).value)

    g1 = central_diff(lambda w: value(w, w2_0), w1_0)
    g2 = central_diff(lambda w: value(w1_0, w), w2_0)
    assert rel_err(w1.grad, g1) < 1e-4
    assert rel_err(w2.grad, g2) < 1e-4


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState(lr=0.1)
        adam_step(state, params, {"w": np.zeros(2)})
        np.testing.assert_allclose(params["w"], [1.0, -2.0])

    def test_first_step_magnitude_is_lr_times_sign(self):
        params = {"w": np.array([0.0, 0.0])}
        state = AdamState(lr=0.05)
        adam_step(state, params, {"w": np.array([10.0, -3.0])})
        np.testing.assert_allclose(params["w"], [-0.05, 0.05], rtol=1e-6)

    def test_converges_on_quadratic(self):
        # independent oracle: the argmin of (w-3)^2 is 3
        params = {"w": np.array([0.0])}
        state = AdamState(lr=0.1)
        for _ in range(200):
            grad = 2.0 * (params["w"] - 3.0)
            adam_step(state, params, {"w": grad})
        assert abs(params["w"][0] - 3.0) < 0.1


class TestPlateau:
    def test_decreasing_losses_keep_lr(self):
        sched = PlateauSchedule(lr=1e-3)
        for i in range(50):
            plateau_update(sched, 1.0 / (i + 1))
        assert sched.lr == 1e-3

    def test_constant_loss_halves_once_after_patience(self):
        sched = PlateauSchedule(lr=1e-3)
        lrs = [plateau_update(sched, 1.0) for _ in range(11)]
        assert lrs[-1] == pytest.approx(5e-4)
        assert lrs[-2] == pytest.approx(1e-3)

    def test_floor_and_cooldown_gaps(self):
        # simulate the full state machine for 100 stagnant epochs
        sched = PlateauSchedule(lr=1e-3)
        lrs = [plateau_update(sched, 1.0) for _ in range(100)]
        assert lrs[-1] == pytest.approx(1e-4)
        assert min(lrs) >= 1e-4
        drops = [i for i in range(1, 100) if lrs[i] < lrs[i - 1]]
        gaps = np.diff(drops)
        assert len(drops) >= 3
        assert np.all(gaps >= 10)
        assert not any(lr < 1e-4 for lr in lrs)

    def test_non_increasing(self):
        rng = np.random.default_rng(3)
        sched = PlateauSchedule(lr=1e-3)
        lrs = [plateau_update(sched, float(rng.uniform(0.5, 1.5))) for _ in range(300)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert math.isclose(lrs[-1], max(lrs[-1], 1e-4))
