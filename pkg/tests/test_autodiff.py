import math

import numpy as np
import pytest

from reddot import autodiff as ad
from reddot.autodiff import Tensor
from reddot.errors import ConfigError, FormatError, NumericalError, ShapeError, StateError

RNG = np.random.default_rng(1234)


def _weighted(f, shape, seed=0):
    """Scalarize a tensor function with fixed random weights so every output element matters."""
    w = Tensor(np.random.default_rng(seed).standard_normal(shape))
    return lambda *xs: (f(*xs) * w).sum()


def _attention_params(dim, rng, scale=0.3):
    p = {f"w_{n}": rng.standard_normal((dim, dim)) * scale for n in "qkvo"}
    p.update({f"b_{n}": rng.standard_normal(dim) * 0.1 for n in "qkvo"})
    return p


# -- linear


def test_linear_identity():
    x = RNG.standard_normal((3, 4))
    y = ad.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(y.data, x)


def test_linear_zero_input():
    b = np.array([1.0, -2.0])
    y = ad.linear(Tensor(np.zeros((3, 4))), Tensor(RNG.standard_normal((4, 2))), Tensor(b))
    np.testing.assert_array_equal(y.data, np.tile(b, (3, 1)))


def test_linear_gradient():
    x, w, b = RNG.standard_normal((3, 4)), RNG.standard_normal((4, 2)), RNG.standard_normal(2)
    report = ad.grad_check(_weighted(ad.linear, (3, 2)), [x, w, b])
    assert report.max_rel_error <= 1e-6


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


# -- layer norm


def test_layer_norm_constant_row():
    shift = np.array([0.5, -1.0, 2.0])
    y = ad.layer_norm(Tensor(np.full((2, 3), 7.0)), Tensor(np.ones(3)), Tensor(shift))
    np.testing.assert_allclose(y.data, np.tile(shift, (2, 1)), atol=1e-12)


def test_layer_norm_standardized_row():
    y = ad.layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(y.data, [1 / math.sqrt(1 + 1e-5), -1 / math.sqrt(1 + 1e-5)], rtol=1e-12)


def test_layer_norm_gradient():
    x = RNG.standard_normal((4, 6))
    g, s = RNG.standard_normal(6), RNG.standard_normal(6)
    report = ad.grad_check(_weighted(ad.layer_norm, (4, 6)), [x, g, s])
    assert report.max_rel_error <= 1e-5


# -- activations and dropout


def test_activation_values():
    assert ad.gelu(Tensor(np.array(0.0))).data == 0.0
    assert ad.sigmoid(Tensor(np.array(0.0))).data == 0.5
    # tanh-approximation reference at x = 1
    ref = 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * (1 + 0.044715)))
    assert ad.gelu(Tensor(np.array(1.0))).data == pytest.approx(ref, rel=1e-14)


def test_sigmoid_extremes_finite():
    y = ad.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


@pytest.mark.parametrize("op", [ad.gelu, ad.sigmoid])
def test_activation_gradients(op):
    x = RNG.standard_normal((5, 3)) * 2
    assert ad.grad_check(_weighted(op, (5, 3)), [x]).max_rel_error <= 1e-5


def test_dropout_zero_rate_identity():
    x = Tensor(RNG.standard_normal((4, 4)))
    assert ad.dropout(x, 0.0, True, np.random.default_rng(0)) is x


def test_dropout_eval_identity():
    x = Tensor(RNG.standard_normal((4, 4)))
    assert ad.dropout(x, 0.5, False) is x


def test_dropout_scaling():
    x = Tensor(np.ones((200, 200)))
    y = ad.dropout(x, 0.25, True, np.random.default_rng(0)).data
    kept = y != 0
    np.testing.assert_allclose(y[kept], 1 / 0.75, rtol=1e-6)
    assert abs(kept.mean() - 0.75) < 0.01


def test_dropout_gradient_frozen_mask():
    x = RNG.standard_normal((6, 5))
    mask = ad.dropout_mask(x.shape, 0.3, np.random.default_rng(1), np.float64)
    f = _weighted(lambda t: ad.dropout(t, 0.3, True, mask=mask), x.shape)
    assert ad.grad_check(f, [x]).max_rel_error <= 1e-5


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_bad_rate(p):
    with pytest.raises(ConfigError):
        ad.dropout(Tensor(np.ones(3)), p, True, np.random.default_rng(0))


# -- attention


def test_attention_single_token():
    rng = np.random.default_rng(0)
    params = {k: Tensor(v) for k, v in _attention_params(4, rng).items()}
    x = rng.standard_normal((1, 4))
    out, weights = ad.multi_head_self_attention(Tensor(x), 2, params, return_weights=True)
    np.testing.assert_array_equal(weights, np.ones((2, 1, 1)))
    v = x @ params["w_v"].data + params["b_v"].data
    np.testing.assert_allclose(out.data, v @ params["w_o"].data + params["b_o"].data, rtol=1e-12)


def test_attention_identical_tokens_uniform():
    rng = np.random.default_rng(1)
    params = {k: Tensor(v) for k, v in _attention_params(8, rng).items()}
    x = np.tile(rng.standard_normal(8), (5, 1))
    _, weights = ad.multi_head_self_attention(Tensor(x), 2, params, return_weights=True)
    np.testing.assert_allclose(weights, 0.2, atol=1e-12)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(2)
    params = {k: Tensor(v) for k, v in _attention_params(8, rng, 1.0).items()}
    _, weights = ad.multi_head_self_attention(Tensor(rng.standard_normal((3, 6, 8)) * 3), 4, params, return_weights=True)
    np.testing.assert_allclose(weights.sum(-1), 1.0, atol=1e-6)


def test_attention_gradient():
    rng = np.random.default_rng(3)
    params = _attention_params(8, rng)
    names = sorted(params)
    x = rng.standard_normal((5, 8))

    def f(x, *ps):
        return ad.multi_head_self_attention(x, 2, dict(zip(names, ps)))

    report = ad.grad_check(_weighted(f, (5, 8)), [x] + [params[n] for n in names])
    assert report.max_rel_error <= 1e-4


def test_attention_heads_divisibility():
    params = {k: Tensor(v) for k, v in _attention_params(6, np.random.default_rng(0)).items()}
    with pytest.raises(ConfigError):
        ad.multi_head_self_attention(Tensor(np.ones((2, 6))), 4, params)


# -- loss


def test_bce_values():
    assert ad.bce_with_logits(Tensor(np.array([0.0])), np.array([1])).data == pytest.approx(math.log(2), abs=1e-15)
    tiny = ad.bce_with_logits(Tensor(np.array([20.0])), np.array([1])).data
    assert tiny == pytest.approx(2.0611536181902037e-09, rel=1e-9)
    huge = ad.bce_with_logits(Tensor(np.array([-1e4, 1e4])), np.array([1, 0])).data
    assert huge == pytest.approx(1e4)


def test_bce_matches_naive():
    z = RNG.standard_normal(64) * 4
    t = (RNG.random(64) > 0.5).astype(float)
    s = 1 / (1 + np.exp(-z))
    naive = -np.mean(t * np.log(s) + (1 - t) * np.log(1 - s))
    assert abs(ad.bce_with_logits(Tensor(z), t).data - naive) < 1e-9


def test_bce_gradient():
    z = RNG.standard_normal((3, 4)) * 3
    t = (RNG.random((3, 4)) > 0.5).astype(float)
    assert ad.grad_check(lambda z: ad.bce_with_logits(z, t), [z]).max_rel_error <= 1e-6


# -- structural ops


def test_structural_gradients():
    a = RNG.standard_normal((2, 3, 4))
    b = RNG.standard_normal((2, 4, 5))
    c = RNG.standard_normal((2, 2, 4))
    idx = np.array([0, 2, 2])
    fs = [
        (lambda a, b: ad.matmul(a, b), [a, b], (2, 3, 5)),
        (lambda a: ad.transpose(a, (2, 0, 1)), [a], (4, 2, 3)),
        (lambda a: ad.reshape(a, (6, 4)), [a], (6, 4)),
        (lambda a: a[:, 1:], [a], (2, 2, 4)),
        (lambda a: a[:, idx], [a], (2, 3, 4)),
        (lambda a, c: ad.concat([a, c], axis=1), [a, c], (2, 5, 4)),
        (lambda a: ad.softmax(a, axis=-1), [a], (2, 3, 4)),
        (lambda a: a.sum(axis=1), [a], (2, 4)),
        (lambda a: a.mean(axis=(0, 2), keepdims=True), [a], (1, 3, 1)),
        (lambda a, c: a[:, :2] * c - c + 3.0 * a[:, 1:], [a, c], (2, 2, 4)),
    ]
    for f, xs, shape in fs:
        assert ad.grad_check(_weighted(f, shape), xs).max_rel_error <= 1e-6


def test_broadcast_add_gradient():
    x = RNG.standard_normal((4, 3))
    b = RNG.standard_normal((1, 3))
    assert ad.grad_check(_weighted(lambda x, b: x + b, (4, 3)), [x, b]).max_rel_error <= 1e-8


def test_shared_node_accumulates():
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    y = x * x + x
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)


# -- grad_check itself


def test_grad_check_sum_exact():
    report = ad.grad_check(lambda x: x.sum(), [RNG.standard_normal(10)])
    assert report.max_rel_error <= 1e-9


def test_grad_check_squared_norm():
    x = RNG.standard_normal(10)
    report = ad.grad_check(lambda x: (x * x).sum(), [x])
    assert report.max_rel_error <= 1e-8


def test_grad_check_detects_wrong_gradient():
    def broken(x):
        return ad._make(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

    report = ad.grad_check(lambda x: broken(x).sum(), [RNG.standard_normal(5) + 3])
    assert not report.passed


@pytest.mark.parametrize("trial", range(100))
def test_randomized_primitive_gradients(trial):
    rng = np.random.default_rng(trial)
    n, d = int(rng.integers(1, 5)), 2 * int(rng.integers(1, 4))
    x = rng.standard_normal((n, d)) * rng.uniform(0.1, 3)
    w, b = rng.standard_normal((d, 3)), rng.standard_normal(3)
    g, s = rng.standard_normal(d), rng.standard_normal(d)
    params = _attention_params(d, rng)
    names = sorted(params)

    def f(x, w, b, g, s, *ps):
        h = ad.layer_norm(x, g, s)
        h = h + ad.multi_head_self_attention(h, 2, dict(zip(names, ps)))
        return ad.sigmoid(ad.gelu(ad.linear(h, w, b)))

    report = ad.grad_check(_weighted(f, (n, 3), trial), [x, w, b, g, s] + [params[k] for k in names])
    assert report.max_rel_error <= 1e-4


# -- Adam


def _param_set(values):
    ps = ad.ParameterSet()
    for name, v in values.items():
        ps.add(name, np.asarray(v, dtype=np.float64))
    return ps


def test_adam_zero_gradient_no_change():
    ps = _param_set({"a": [1.0, -2.0], "b": [[3.0]]})
    before = ps.state_dict()
    for p in ps.params.values():
        p.grad = np.zeros_like(p.data)
    ad.adam_step(ps, lr=0.1)
    for name, value in ps.state_dict().items():
        np.testing.assert_array_equal(value, before[name])


def test_adam_first_step_magnitude():
    ps = _param_set({"w": 0.0})
    ps["w"].grad = np.array(1.0)
    ad.adam_step(ps, lr=1e-3)
    assert ps["w"].data == pytest.approx(-1e-3, rel=1e-6)


def test_adam_missing_gradient():
    ps = _param_set({"w": [1.0]})
    with pytest.raises(StateError):
        ad.adam_step(ps)


def test_adam_quadratic_bowl():
    target = np.array([3.0, -1.0, 0.5])
    ps = _param_set({"x": np.zeros(3)})
    losses = []
    for _ in range(10):
        ps.zero_grad()
        diff = ps["x"] - Tensor(target)
        loss = (diff * diff).sum()
        loss.backward()
        losses.append(loss.item())
        ad.adam_step(ps, lr=0.1)
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert all(m.shape == ps[n].shape for n, m in ps.first_moment.items())


# -- debug mode and checkpoints


def test_debug_mode_flags_nan():
    x = Tensor(np.array([1.0, np.nan]))
    with ad.debug_mode():
        with pytest.raises(NumericalError):
            ad.gelu(x)
    ad.gelu(x)  # silent outside debug mode


def test_checkpoint_roundtrip(tmp_path):
    ps = _param_set({"z.w": RNG.standard_normal((3, 2)), "a.b": RNG.standard_normal(2)})
    for p in ps.params.values():
        p.grad = np.ones_like(p.data)
    ad.adam_step(ps, lr=0.01)
    ad.save_checkpoint(ps, tmp_path / "c.ckpt", {"note": "x"})
    config, values, first, second, step = ad.load_checkpoint(tmp_path / "c.ckpt")
    assert config == {"note": "x"} and step == 1
    assert list(values) == ["a.b", "z.w"]
    for name in values:
        np.testing.assert_array_equal(values[name], ps[name].data.astype(np.float32))
        np.testing.assert_array_equal(first[name], ps.first_moment[name].astype(np.float32))
    # deterministic bytes
    ad.save_checkpoint(ps, tmp_path / "d.ckpt", {"note": "x"})
    assert (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "d.ckpt").read_bytes()


def test_checkpoint_corrupt(tmp_path):
    ps = _param_set({"w": [1.0, 2.0]})
    ad.save_checkpoint(ps, tmp_path / "c.ckpt")
    data = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(data[:-2])
    with pytest.raises(FormatError):
        ad.load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(FormatError):
        ad.load_checkpoint(tmp_path / "bad.ckpt")
