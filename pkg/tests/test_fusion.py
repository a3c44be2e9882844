import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from reddot.errors import ConfigError, DataError
from reddot.fusion import ABLATIONS, CONCAT_ONLY, FULL, OPS, FusionConfig, fuse


def test_equal_inputs():
    v = np.array([1.5, -2.0, 3.0])
    np.testing.assert_array_equal(fuse(v, v), [v, v, 2 * v, np.zeros(3), v * v])


def test_zero_text():
    f = np.array([1.0, -4.0])
    z = np.zeros(2)
    np.testing.assert_array_equal(fuse(f, z), [f, z, f, f, z])


def test_hand_arithmetic():
    expected = [[1, 2], [3, -1], [4, 1], [-2, 3], [3, -2]]
    np.testing.assert_array_equal(fuse(np.array([1.0, 2.0]), np.array([3.0, -1.0])), expected)


def test_dim_mismatch():
    with pytest.raises(DataError):
        fuse(np.ones(3), np.ones(4))


def test_batched():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((7, 4)), rng.standard_normal((7, 4))
    out = fuse(a, b)
    assert out.shape == (7, 5, 4)
    for i in range(7):
        np.testing.assert_array_equal(out[i], fuse(a[i], b[i]))


@pytest.mark.parametrize("name, ops", [
    ("concat", ("image", "text")),
    ("full", ("image", "text", "add", "sub", "mul")),
    ("no_sub", ("image", "text", "add", "mul")),
    ("no_add", ("image", "text", "sub", "mul")),
    ("no_mul", ("image", "text", "add", "sub")),
])
def test_ablation_token_subsets(name, ops):
    a, b = np.array([2.0, 5.0]), np.array([-1.0, 0.5])
    full = dict(zip(OPS, fuse(a, b, FULL)))
    out = fuse(a, b, ABLATIONS[name])
    assert ABLATIONS[name].ops == ops
    np.testing.assert_array_equal(out, [full[o] for o in ops])


def test_concat_only_is_plain_concatenation():
    a, b = np.arange(3.0), np.arange(3.0, 6.0)
    np.testing.assert_array_equal(fuse(a, b, CONCAT_ONLY).reshape(-1), np.concatenate([a, b]))


def test_config_names():
    assert FusionConfig.parse("image,text,add,sub,mul") == FULL
    assert FusionConfig(("image_token", "text_token", "multiply")).ops == ("image", "text", "mul")
    for bad in [("image",), ("image", "text", "div"), ("text", "image"), ("image", "text", "add", "add")]:
        with pytest.raises(ConfigError):
            FusionConfig(bad)


vec = arrays(np.float64, 5, elements=st.floats(-100, 100))


@settings(max_examples=100, deadline=None)
@given(vec, vec, st.floats(-10, 10))
def test_algebraic_properties(a, b, alpha):
    ab, ba = fuse(a, b), fuse(b, a)
    np.testing.assert_array_equal(ab[4], ba[4])  # product symmetric
    np.testing.assert_array_equal(ab[3], -ba[3])  # difference antisymmetric
    scaled = fuse(alpha * a, alpha * b)
    np.testing.assert_allclose(scaled[2], alpha * ab[2], rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(scaled[3], alpha * ab[3], rtol=1e-12, atol=1e-9)
