import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from d2dpath import nn
from d2dpath.errors import InputError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_activations_at_zero():
    assert nn.sigmoid(0.0) == 0.5
    assert nn.tanh(0.0) == 0.0


@given(hnp.arrays(np.float64, 20, elements=st.floats(-1e3, 1e3)))
def test_sigmoid_symmetry_and_range(x):
    s = nn.sigmoid(x)
    assert np.all((s >= 0) & (s <= 1))
    assert np.allclose(nn.sigmoid(-x), 1 - s, atol=1e-12, rtol=0)


def test_sigmoid_saturates_without_warnings():
    with np.errstate(all="raise"):
        v = nn.sigmoid(np.array([-1e3, 1e3]))
    assert v[0] == 0.0 and v[1] == 1.0


def test_dense_identity():
    x = np.array([1.0, -2.0, 3.0])
    y, _ = nn.dense_forward(x, np.eye(3), np.zeros(3))
    assert np.array_equal(y, x)


def test_dense_single_sample_dW_is_outer():
    rng = np.random.default_rng(1)
    x, W, b = rng.normal(size=5), rng.normal(size=(3, 5)), rng.normal(size=3)
    g = rng.normal(size=3)
    _, cache = nn.dense_forward(x, W, b)
    dx, dW, db = nn.dense_backward(cache, g)
    assert np.allclose(dW, np.outer(g, x))
    assert np.allclose(dx, W.T @ g)
    assert np.allclose(db, g)


def test_dense_gradcheck():
    rng = np.random.default_rng(2)
    x, W, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)
    a = rng.normal(size=(4, 3))

    def loss():
        return float(np.sum(a * np.tanh(nn.dense_forward(x, W, b)[0])))

    y, cache = nn.dense_forward(x, W, b)
    dx, dW, db = nn.dense_backward(cache, a * (1 - np.tanh(y) ** 2))
    rep = nn.grad_check(loss, {"x": x, "W": W, "b": b}, {"x": dx, "W": dW, "b": db}, tol=1e-6)
    assert rep.passed, rep.worst


def test_dense_shape_mismatch():
    with pytest.raises(InputError):
        nn.dense_forward(np.ones(4), np.ones((3, 5)), np.zeros(3))


def test_dropout_identity_cases():
    rng = np.random.default_rng(0)
    v = rng.normal(size=10)
    assert np.array_equal(nn.dropout(v, 0.0, True, rng)[0], v)
    assert np.array_equal(nn.dropout(v, 0.7, False, rng)[0], v)
    with pytest.raises(InputError):
        nn.dropout(v, 1.0, True, rng)


def test_dropout_preserves_mean():
    rng = np.random.default_rng(3)
    v = np.ones(1000)
    means = [nn.dropout(v, 0.5, True, rng)[0].mean() for _ in range(10_000)]
    assert abs(np.mean(means) - 1.0) < 0.05


def test_xent_uniform_and_stable():
    loss, probs, _ = nn.softmax_xent(np.zeros(7), 3)
    assert math.isclose(loss, math.log(7), rel_tol=1e-12)
    assert np.allclose(probs, 1 / 7)
    loss, _, d = nn.softmax_xent(np.array([1000.0, 0.0]), 0)
    assert 0 <= loss < 1e-12
    assert np.all(np.isfinite(d))


def test_xent_target_range():
    with pytest.raises(InputError):
        nn.softmax_xent(np.zeros(3), 3)
    with pytest.raises(InputError):
        nn.softmax_xent(np.zeros(3), -1)


@given(hnp.arrays(np.float64, st.integers(2, 30), elements=finite), st.data())
def test_xent_matches_log_softmax(x, data):
    t = data.draw(st.integers(0, len(x) - 1))
    loss, probs, d = nn.softmax_xent(x, t)
    assert abs(loss - (-math.log(probs[t]))) < 1e-9 * max(1.0, loss)
    assert abs(probs.sum() - 1) < 1e-12
    onehot = np.eye(len(x))[t]
    assert np.allclose(d, probs - onehot)


@given(hnp.arrays(np.float64, 6, elements=finite), st.floats(-100, 100))
def test_softmax_shift_invariant(x, c):
    assert np.allclose(nn.softmax(x), nn.softmax(x + c), atol=1e-12)


def test_xent_gradcheck():
    rng = np.random.default_rng(4)
    x = rng.normal(size=6)
    _, _, d = nn.softmax_xent(x, 2)
    rep = nn.grad_check(lambda: nn.softmax_xent(x, 2)[0], {"x": x}, {"x": d}, tol=1e-7)
    assert rep.passed


def test_weighted_xent_matches_loop():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 5))
    rows = np.array([0, 0, 2, 3, 3])
    targets = np.array([1, 4, 0, 2, 2])
    w = rng.random(5)
    loss, d = nn.weighted_xent(logits, rows, targets, w)
    ref_loss, ref_d = 0.0, np.zeros_like(logits)
    for r, t, wi in zip(rows, targets, w):
        l_, _, g = nn.softmax_xent(logits[r], int(t))
        ref_loss += wi * l_
        ref_d[r] += wi * g
    assert math.isclose(loss, ref_loss, rel_tol=1e-12)
    assert np.allclose(d, ref_d, atol=1e-14)


def test_adam_zero_grad_is_noop():
    p = nn.Param("w", np.array([1.0, -2.0]))
    nn.adam_step([p], 0.1, t=1)
    assert np.array_equal(p.value, [1.0, -2.0])


def test_adam_first_step_is_lr_sign():
    p = nn.Param("w", np.zeros(3))
    p.grad[:] = [0.5, -3.0, 1e-3]
    nn.adam_step([p], 0.1, t=1)
    # bias-corrected m / sqrt(v) == g / |g| on the first step
    assert np.allclose(p.value, -0.1 * np.sign([0.5, -3.0, 1e-3]), atol=1e-6)


def test_adam_quadratic_bowl():
    p = nn.Param("w", np.full(4, 0.5))
    opt = nn.Adam(lr=0.1)
    history = []
    for _ in range(200):
        p.grad = 2 * p.value
        opt.step([p])
        history.append(float(p.value @ p.value))
    assert history[-1] < 1e-3
    # descending trend over windows
    windows = np.array(history).reshape(10, 20).mean(1)
    assert windows[-1] < windows[0]


def test_adam_rejects_bad_lr():
    with pytest.raises(InputError):
        nn.adam_step([], 0.0)


def test_grad_check_linear():
    rng = np.random.default_rng(6)
    w, a = rng.normal(size=8), rng.normal(size=8)
    rep = nn.grad_check(lambda: float(w @ a), {"w": w}, {"w": a})
    assert rep.max_rel_err < 1e-10


def test_grad_check_reports_wrong_gradient():
    w = np.array([1.0, 2.0])
    rep = nn.grad_check(lambda: float(w @ w), {"w": w}, {"w": np.array([2.0, 0.0])})
    assert not rep.passed
    assert rep.worst[0][2] == (1,)


@settings(max_examples=20)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3))
def test_checkpoint_round_trip(tmp_path_factory, shape):
    rng = np.random.default_rng(len(shape))
    params = {"a": rng.normal(size=shape), "b": rng.normal(size=3)}
    path = tmp_path_factory.mktemp("ck") / "m.json"
    nn.save_checkpoint(path, params, {"kind": "x"})
    header, back = nn.load_checkpoint(path)
    assert header == {"kind": "x"}
    for k, v in params.items():
        assert np.array_equal(back[k], v)


def test_checkpoint_version_required(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"header": {}, "params": {}}')
    with pytest.raises(InputError):
        nn.load_checkpoint(path)
