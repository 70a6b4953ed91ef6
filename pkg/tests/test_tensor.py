import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from desta import tensor as T
from desta.checkpoint import CheckpointError, load_arrays, save_arrays, save_parameters
from desta.gradcheck import check_gradients, finite_difference, relative_error
from desta.tensor import Parameter, ShapeError, TapeError, Tensor


def _p(shape, seed=0, scale=1.0):
    return Parameter(np.random.default_rng(seed).normal(0.0, scale, size=shape))


def _gradcheck(loss_fn, params, tol=1e-6):
    res = check_gradients(loss_fn, list(params.items()), samples_per_param=6)
    worst = max(r["rel_error"] for r in res)
    assert worst < tol, res


def _weighted_sum(y, seed=99):
    # a fixed random projection so every output entry contributes to the loss
    w = Tensor(np.random.default_rng(seed).normal(size=y.shape))
    return T.reshape(T.matmul(T.reshape(T.mul(y, w), (1, -1)), Tensor(np.ones((y.data.size, 1)))), ())


# --- per-primitive gradient checks -----------------------------------------


def test_grad_matmul_2d_and_batched():
    a, b = _p((3, 4), 1), _p((4, 5), 2)
    _gradcheck(lambda: _weighted_sum(T.matmul(a, b)), {"a": a, "b": b})
    a3, b3 = _p((2, 3, 4), 3), _p((2, 4, 2), 4)
    _gradcheck(lambda: _weighted_sum(T.matmul(a3, b3)), {"a": a3, "b": b3})


def test_grad_add_mul_broadcast_suffix():
    a, b = _p((3, 4), 1), _p((4,), 2)
    _gradcheck(lambda: _weighted_sum(T.add(a, b)), {"a": a, "b": b})
    _gradcheck(lambda: _weighted_sum(T.mul(a, b)), {"a": a, "b": b})


def test_grad_softmax_and_log_softmax():
    x = _p((3, 5), 5)
    _gradcheck(lambda: _weighted_sum(T.softmax(x, axis=-1)), {"x": x})
    _gradcheck(lambda: _weighted_sum(T.softmax(x, axis=0)), {"x": x})
    _gradcheck(lambda: _weighted_sum(T.log_softmax(x)), {"x": x})


def test_grad_layer_norm():
    x, g, b = _p((4, 6), 1), _p((6,), 2), _p((6,), 3)
    _gradcheck(lambda: _weighted_sum(T.layer_norm(x, g, b)), {"x": x, "g": g, "b": b})


def test_grad_gelu():
    x = _p((5, 3), 7, scale=2.0)
    _gradcheck(lambda: _weighted_sum(T.gelu(x)), {"x": x})


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (5, 0)])
def test_grad_conv1d(stride, padding):
    x, w, b = _p((17, 3), 1), _p((4, 3, 5), 2), _p((4,), 3)
    _gradcheck(lambda: _weighted_sum(T.conv1d(x, w, b, stride, padding)), {"x": x, "w": w, "b": b})


def test_grad_embedding_repeated_ids():
    table = _p((7, 4), 1)
    _gradcheck(lambda: _weighted_sum(T.embedding_lookup(table, [1, 3, 1, 6])), {"table": table})


def test_grad_concat_transpose_reshape():
    a, b = _p((2, 3), 1), _p((4, 3), 2)
    _gradcheck(lambda: _weighted_sum(T.transpose(T.reshape(T.concat([a, b]), (3, 2, 3)), (2, 0, 1))),
               {"a": a, "b": b})


def test_grad_cross_entropy_masked():
    logits = _p((6, 9), 4)
    tg, mask = [1, 2, 3, 4, 5, 6], [False, True, True, False, True, False]
    _gradcheck(lambda: T.cross_entropy_masked(logits, tg, mask)[0], {"logits": logits})


def test_grad_scalar_mul_and_sub():
    a, b = _p((3,), 1), _p((3,), 2)
    _gradcheck(lambda: _weighted_sum(T.scalar_mul(a - b, 2.5)), {"a": a, "b": b})


# --- properties --------------------------------------------------------------

arrays = st.integers(1, 6).flatmap(
    lambda n: st.lists(st.floats(-50, 50, allow_nan=False), min_size=n, max_size=n))


@given(arrays)
@settings(max_examples=60, deadline=None)
def test_softmax_is_a_distribution(values):
    p = T.softmax(Tensor(np.array(values)[None, :])).data
    assert np.all(p >= 0)
    assert math.isclose(p.sum(), 1.0, rel_tol=0, abs_tol=1e-12)


@given(arrays)
@settings(max_examples=60, deadline=None)
def test_log_softmax_matches_log_of_softmax(values):
    x = Tensor(np.array(values)[None, :])
    np.testing.assert_allclose(np.exp(T.log_softmax(x).data), T.softmax(x).data, atol=1e-12)


@given(st.integers(1, 400), st.integers(1, 9), st.integers(1, 6), st.integers(0, 4))
@settings(max_examples=80, deadline=None)
def test_conv1d_length_formula(t, k, stride, padding):
    expected = (t + 2 * padding - k) // stride + 1
    if expected < 1:
        with pytest.raises(ShapeError):
            T.conv1d(Tensor(np.zeros((t, 2))), Tensor(np.zeros((1, 2, k))), None, stride, padding)
        return
    out = T.conv1d(Tensor(np.zeros((t, 2))), Tensor(np.zeros((1, 2, k))), None, stride, padding)
    assert out.shape == (expected, 1) == (T.conv1d_length(t, k, stride, padding), 1)


def test_conv1d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(11, 3)), rng.normal(size=(2, 3, 4)), rng.normal(size=2)
    got = T.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((1, 1), (0, 0)))
    ref = np.array([[np.sum(xp[2 * t:2 * t + 4].T * w[o]) + b[o] for o in range(2)] for t in range(got.shape[0])])
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_gelu_tanh_form():
    x = np.linspace(-4, 4, 9)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, atol=1e-15)


def test_layer_norm_statistics():
    x = np.random.default_rng(1).normal(3.0, 5.0, size=(4, 16))
    y = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(-1), 1, atol=1e-3)


# --- tape behaviour ----------------------------------------------------------


def test_backward_is_deterministic():
    def run():
        T.reset_tape()
        a = _p((4, 4), 3)
        loss = _weighted_sum(T.gelu(T.matmul(a, a)))
        T.backward(loss)
        return a.grad.copy()

    assert np.array_equal(run(), run())


def test_grads_accumulate_across_backward_calls():
    a = _p((3,), 1)
    T.reset_tape()
    T.backward(_weighted_sum(a))
    once = a.grad.copy()
    T.reset_tape()
    T.backward(_weighted_sum(a))
    np.testing.assert_allclose(a.grad, 2 * once)


def test_frozen_parameters_do_not_join_the_tape():
    w = Parameter(np.ones((2, 2)), frozen=True)
    x = _p((2,), 1)
    T.reset_tape()
    T.backward(_weighted_sum(T.matmul(T.reshape(x, (1, 2)), w)))
    assert w.grad is None and x.grad is not None


def test_no_grad_detaches():
    a = _p((2,), 1)
    T.reset_tape()
    with T.no_grad():
        y = _weighted_sum(a)
    assert T.tape_size() == 0
    with pytest.raises(TapeError):
        T.backward(y)


def test_backward_rejects_non_scalar_and_stale_tape():
    a = _p((2,), 1)
    T.reset_tape()
    with pytest.raises(ShapeError):
        T.backward(T.mul(a, a))
    loss = _weighted_sum(a)
    T.reset_tape()
    with pytest.raises(TapeError):
        T.backward(loss)


def test_broadcast_errors_name_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\)"):
        T.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_cross_entropy_out_of_vocab_names_position():
    with pytest.raises(ValueError, match="position 2"):
        T.cross_entropy_masked(Tensor(np.zeros((3, 4))), [0, 1, 9], [True, True, True])


def test_cross_entropy_empty_mask_returns_flag():
    loss, empty = T.cross_entropy_masked(Tensor(np.zeros((3, 4))), [0, 1, 2], [False] * 3)
    assert empty and loss.item() == 0.0


def test_cross_entropy_uniform_logits_is_log_vocab():
    loss, _ = T.cross_entropy_masked(Tensor(np.zeros((2, 8))), [3, 5], [True, True])
    assert math.isclose(loss.item(), math.log(8), rel_tol=1e-14)


def test_scalar_loss_is_zero_dimensional():
    loss, _ = T.cross_entropy_masked(Tensor(np.zeros((2, 8))), [3, 5], [True, True])
    assert loss.shape == ()


# --- gradcheck helpers -------------------------------------------------------


def test_relative_error_floor():
    assert relative_error(1e-9, 0.0) == 1e-9
    assert relative_error(2.0, 4.0) == 0.5


def test_finite_difference_on_quadratic_restores_value():
    p = Parameter(np.array([3.0]))
    d = finite_difference(lambda: T.mul(p, p), p, (0,))
    assert math.isclose(d, 6.0, rel_tol=1e-9)
    assert p.data[0] == 3.0


# --- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    named = [("b.w", _p((3, 2), 1)), ("a.bias", Parameter(np.arange(3.0), frozen=True))]
    save_parameters(tmp_path / "m.ckpt", named, meta={"step": 7}, extra={"adam.m/b.w": np.ones((3, 2))})
    arrays, frozen, meta = load_arrays(tmp_path / "m.ckpt")
    assert meta["step"] == 7
    assert frozen == {"a.bias": True, "b.w": False, "adam.m/b.w": False}
    assert np.array_equal(arrays["b.w"], named[0][1].data)
    assert arrays["adam.m/b.w"].shape == (3, 2)


def test_checkpoint_bytes_are_deterministic(tmp_path):
    arrays = {"z": np.arange(4.0), "a": np.eye(2)}
    save_arrays(tmp_path / "1.ckpt", arrays)
    save_arrays(tmp_path / "2.ckpt", dict(reversed(list(arrays.items()))))
    assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 32)
    with pytest.raises(CheckpointError):
        load_arrays(bad)
    save_arrays(tmp_path / "ok.ckpt", {"a": np.ones(100)})
    data = (tmp_path / "ok.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        load_arrays(tmp_path / "cut.ckpt")
