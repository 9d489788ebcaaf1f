"""Reverse-mode autodiff: gradients against finite differences, Adam
against a hand-stepped reference, checkpoint round-trips."""

import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import dagspace.autodiff as ad
from dagspace.autodiff import Parameter, Tensor
from dagspace.nn import GatedSum, GruCell, Linear, Mlp2


def param(rng, shape, name):
    return Parameter(rng.normal(0.0, 1.0, size=shape), name)


def check(f, params, tolerance=1e-6):
    report = ad.grad_check(f, params, tolerance=tolerance)
    assert report.ok, str(report)
    return report


# ---------------------------------------------------------------------------
# Primitives


def test_matmul_grad(rng):
    a = param(rng, (3, 4), "a")
    b = param(rng, (4, 2), "b")
    check(lambda: ad.sum_(ad.matmul(a, b)), [a, b])


def test_add_mul_broadcast_grad(rng):
    a = param(rng, (3, 4), "a")
    b = param(rng, (1, 4), "b")
    check(lambda: ad.sum_(ad.mul(ad.add(a, b), a)), [a, b])


def test_concat_narrow_grad(rng):
    a = param(rng, (2, 3), "a")
    b = param(rng, (2, 2), "b")

    def f():
        c = ad.concat([a, b], axis=1)
        return ad.sum_(ad.square(ad.narrow(c, 1, 1, 3)))

    check(f, [a, b])


@pytest.mark.parametrize("op", [ad.sigmoid, ad.tanh, ad.exp, ad.square])
def test_unary_grads(rng, op):
    a = param(rng, (2, 5), "a")
    check(lambda: ad.sum_(op(a)), [a])


def test_relu_grad_away_from_kink():
    rng = np.random.default_rng(3)
    data = rng.normal(0.0, 1.0, size=(3, 4))
    data[np.abs(data) < 0.05] = 0.5  # keep FD away from the nondifferentiable point
    a = Parameter(data, "a")
    check(lambda: ad.sum_(ad.relu(a)), [a])


def test_log_grad(rng):
    a = Parameter(rng.uniform(0.5, 2.0, size=(2, 3)), "a")
    check(lambda: ad.sum_(ad.log(a)), [a])


@pytest.mark.parametrize("op", [ad.softmax, ad.log_softmax])
def test_softmax_grads(rng, op):
    a = param(rng, (3, 5), "a")
    w = Tensor(np.random.default_rng(9).normal(size=(3, 5)))
    check(lambda: ad.sum_(ad.mul(op(a, axis=1), w)), [a])


def test_sum_mean_axis_grads(rng):
    a = param(rng, (3, 4), "a")
    check(lambda: ad.sum_(ad.square(ad.mean(a, axis=0))), [a])
    check(lambda: ad.sum_(ad.square(ad.sum_(a, axis=1))), [a])


def test_pick_grad(rng):
    a = param(rng, (4, 5), "a")
    idx = np.array([0, 3, 2, 4])
    check(lambda: ad.sum_(ad.square(ad.pick(a, idx))), [a])


def test_where_const_grad(rng):
    a = param(rng, (3, 4), "a")
    b = param(rng, (3, 4), "b")
    mask = np.random.default_rng(1).random((3, 4)) < 0.5
    check(lambda: ad.sum_(ad.square(ad.where_const(mask, a, b))), [a, b])


def test_bce_with_logits_grad_and_value(rng):
    a = param(rng, (3, 2), "a")
    t = (np.random.default_rng(2).random((3, 2)) < 0.5).astype(np.float64)
    check(lambda: ad.sum_(ad.bce_with_logits(a, t)), [a])
    # value oracle: naive -t log s - (1-t) log(1-s)
    s = 1.0 / (1.0 + np.exp(-a.data))
    expected = -(t * np.log(s) + (1.0 - t) * np.log(1.0 - s))
    got = ad.bce_with_logits(Tensor(a.data), t).data
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_clip_grad_inside_range(rng):
    a = Parameter(np.random.default_rng(5).uniform(-0.8, 0.8, size=(2, 4)), "a")
    check(lambda: ad.sum_(ad.square(ad.clip(a, -1.0, 1.0))), [a])


def test_clip_zero_grad_outside_range():
    a = Parameter(np.array([[2.0, -3.0]]), "a")
    with ad.Tape() as tape:
        loss = ad.sum_(ad.clip(a, -1.0, 1.0))
        ad.backward(loss, tape)
    np.testing.assert_array_equal(a.grad, np.zeros((1, 2)))


def test_unbroadcast_bias_shape(rng):
    # gradient of a (1, k) bias broadcast over a batch must sum over rows
    b = param(rng, (1, 3), "b")
    x = Tensor(np.ones((5, 3)))
    with ad.Tape() as tape:
        ad.backward(ad.sum_(ad.add(x, b)), tape)
    np.testing.assert_allclose(b.grad, np.full((1, 3), 5.0))


def test_forward_primitive_dispatch(rng):
    a = Tensor(np.ones((2, 2)))
    out = ad.forward_primitive("tanh", a)
    np.testing.assert_allclose(out.data, np.tanh(np.ones((2, 2))))
    with pytest.raises(ValueError, match="unknown op-kind"):
        ad.forward_primitive("conv", a)


def test_shape_errors_are_diagnostic():
    with pytest.raises(ad.ShapeError, match="inner dimensions"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="do not broadcast"):
        ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ad.ShapeError, match="out of range"):
        ad.narrow(Tensor(np.ones((2, 3))), 1, 2, 5)


# ---------------------------------------------------------------------------
# Tape mechanics


def test_backward_needs_scalar():
    a = Parameter(np.ones((2, 2)), "a")
    with ad.Tape() as tape:
        out = ad.square(a)
        with pytest.raises(ad.ShapeError, match="scalar"):
            ad.backward(out, tape)


def test_tape_cannot_be_consumed_twice():
    a = Parameter(np.ones((1, 2)), "a")
    with ad.Tape() as tape:
        loss = ad.sum_(ad.square(a))
        ad.backward(loss, tape)
        with pytest.raises(RuntimeError, match="consumed"):
            ad.backward(loss, tape)


def test_no_grad_skips_recording():
    a = Parameter(np.ones((1, 2)), "a")
    with ad.Tape() as tape:
        with ad.no_grad():
            ad.sum_(ad.square(a))
        assert tape.entries == []


def test_gradient_accumulates_across_reuse(rng):
    # a appears twice in the graph; d/da (a*a + a) = 2a + 1
    a = param(rng, (1, 3), "a")
    with ad.Tape() as tape:
        loss = ad.sum_(ad.add(ad.mul(a, a), a))
        ad.backward(loss, tape)
    np.testing.assert_allclose(a.grad, 2.0 * a.data + 1.0, rtol=1e-12)


def test_grad_check_flags_wrong_gradient():
    """A deliberately wrong backward rule must fail the check (the check
    itself is under test here, so it cannot silently pass everything)."""
    a = Parameter(np.array([[0.3, -0.2]]), "a")

    def wrong():
        out = Tensor(np.sum(a.data * a.data), (a,))
        out._backward = lambda g: ad._accum(a, 4.0 * a.data * g)  # truth: 2a
        return ad._record(out)

    report = ad.grad_check(wrong, [a])
    assert not report.ok
    assert report.max_rel_err > 0.1
    assert report.worst[0] == "a"


# ---------------------------------------------------------------------------
# Learned components


def test_linear_and_mlp_grads(rng):
    lin = Linear(np.random.default_rng(0), 4, 3, "lin")
    mlp = Mlp2(np.random.default_rng(1), 4, 2, "mlp")
    x = np.random.default_rng(2).normal(size=(3, 4))
    check(lambda: ad.sum_(ad.square(lin(Tensor(x)))), list(lin.parameters()))
    check(lambda: ad.sum_(ad.square(mlp(Tensor(x)))), list(mlp.parameters()))


def test_gru_grads(rng):
    gru = GruCell(np.random.default_rng(0), 3, 4, "gru")
    x = np.random.default_rng(1).normal(size=(2, 3))
    h = np.random.default_rng(2).normal(size=(2, 4))
    check(lambda: ad.sum_(ad.square(gru(Tensor(x), Tensor(h)))),
          list(gru.parameters()))


def test_gru_matches_manual_equations():
    """One GRU step against hand-written gate arithmetic."""
    gru = GruCell(np.random.default_rng(7), 2, 3, "gru")
    x = np.array([[0.5, -1.0]])
    h = np.array([[0.1, 0.2, -0.3]])
    with ad.no_grad():
        out = gru(Tensor(x), Tensor(h)).data
    xw = x @ gru.w_x.data + gru.b_x.data
    hw = h @ gru.w_h.data
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    r = sig(xw[:, 0:3] + hw[:, 0:3])
    z = sig(xw[:, 3:6] + hw[:, 3:6])
    n = np.tanh(xw[:, 6:9] + r * hw[:, 6:9])
    np.testing.assert_allclose(out, z * h + (1.0 - z) * n, rtol=1e-12)


def test_gated_sum_grads_and_order_invariance(rng):
    agg = GatedSum(np.random.default_rng(0), 4, 3, "agg")
    xs = [np.random.default_rng(i).normal(size=(1, 4)) for i in range(3)]
    check(lambda: ad.sum_(ad.square(agg.message(Tensor(xs[0])))),
          list(agg.parameters()))
    with ad.no_grad():
        fwd = sum(agg.message(Tensor(x)).data for x in xs)
        rev = sum(agg.message(Tensor(x)).data for x in reversed(xs))
    np.testing.assert_allclose(fwd, rev, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 10**6))
def test_grad_check_property_random_mlp(rows, cols, seed):
    mlp = Mlp2(np.random.default_rng(seed), cols, 2, "m")
    x = np.random.default_rng(seed + 1).normal(size=(rows, cols))
    # Central differences are invalid when a ReLU pre-activation lies within
    # one FD step of its kink (e.g. seed 989 at 7.5e-6); skip those draws.
    pre = x @ mlp.fc1.weight.data + mlp.fc1.bias.data
    assume(np.abs(pre).min() > 1e-4)
    report = ad.grad_check(
        lambda: ad.sum_(ad.tanh(mlp(Tensor(x)))), list(mlp.parameters()))
    assert report.ok, str(report)


# ---------------------------------------------------------------------------
# Adam


def test_adam_single_step_known_values():
    """First Adam step moves each coordinate by exactly lr (up to eps)."""
    p = Parameter(np.array([1.0, -2.0]), "p")
    p.grad = np.array([0.5, -0.25])
    state = ad.AdamState(lr=0.1)
    ad.adam_step(state, [p])
    # bias-corrected first step: mhat = g, vhat = g^2 -> update = lr*sign(g)
    expected = np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -0.25]) / (
        np.abs([0.5, -0.25]) + state.eps)
    np.testing.assert_allclose(p.data, expected, rtol=1e-10)
    assert state.step == 1
    np.testing.assert_array_equal(p.grad, np.zeros(2))


def test_adam_two_steps_match_reference():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(3,))
    grads = [rng.normal(size=(3,)) for _ in range(2)]
    p = Parameter(vals.copy(), "p")
    state = ad.AdamState(lr=0.01)
    # hand-rolled reference
    m = np.zeros(3)
    v = np.zeros(3)
    ref = vals.copy()
    for t, g in enumerate(grads, 1):
        p.grad = g.copy()
        ad.adam_step(state, [p])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.999**t)
        ref -= 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_state_round_trip():
    p = Parameter(np.arange(4, dtype=np.float64).reshape(2, 2), "p")
    state = ad.AdamState(lr=0.05)
    p.grad = np.ones((2, 2))
    ad.adam_step(state, [p])
    restored = ad.AdamState.from_state_dict(state.state_dict(), [p])
    assert restored.step == state.step
    np.testing.assert_array_equal(restored.m["p"], state.m["p"])
    np.testing.assert_array_equal(restored.v["p"], state.v["p"])


# ---------------------------------------------------------------------------
# Checkpoints


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mlp = Mlp2(rng, 3, 2, "m")
    params = list(mlp.parameters())
    path = tmp_path / "ckpt.json"
    ad.save_checkpoint(path, params, extra={"note": 1})
    originals = {p.name: p.data.copy() for p in params}
    for p in params:
        p.data = p.data * 0.0
    doc = ad.load_checkpoint(path)
    assert doc["extra"] == {"note": 1}
    ad.restore_params(doc, params)
    for p in params:
        np.testing.assert_array_equal(p.data, originals[p.name])


def test_checkpoint_bytes_stable(tmp_path):
    mlp = Mlp2(np.random.default_rng(1), 2, 2, "m")
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    ad.save_checkpoint(a, list(mlp.parameters()))
    ad.save_checkpoint(b, list(mlp.parameters()))
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"format": 99, "params": {}}))
    with pytest.raises(ValueError, match="format"):
        ad.load_checkpoint(path)


def test_restore_params_shape_mismatch(tmp_path):
    p = Parameter(np.zeros((2, 2)), "p")
    path = tmp_path / "ckpt.json"
    ad.save_checkpoint(path, [p])
    q = Parameter(np.zeros((3, 3)), "p")
    with pytest.raises(ad.ShapeError):
        ad.restore_params(ad.load_checkpoint(path), [q])
    missing = Parameter(np.zeros((2, 2)), "other")
    with pytest.raises(KeyError):
        ad.restore_params(ad.load_checkpoint(path), [missing])
