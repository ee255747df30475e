import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ternmm.errors import DataError, ShapeError
from ternmm.tensor import activation, matmul, normalize, softmax_rows


def test_matmul_hand_example():
    a = np.array([[1, 2], [3, 4]], dtype=np.float32)
    b = np.array([[5], [6]], dtype=np.float32)
    np.testing.assert_array_equal(matmul(a, b), [[17], [39]])


def test_matmul_1x1():
    np.testing.assert_array_equal(matmul([[2.0]], [[3.0]]), [[6.0]])


def test_matmul_identity_bitwise():
    rng = np.random.default_rng(0)
    x = rng.uniform(-3, 3, (2, 2)).astype(np.float32)
    eye = np.eye(2, dtype=np.float32)
    assert matmul(eye, x).tobytes() == x.tobytes()
    x = rng.uniform(-3, 3, (17, 9)).astype(np.float32)
    assert matmul(np.eye(17, dtype=np.float32), x).tobytes() == x.tobytes()


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.zeros((2, 3), np.float32), np.zeros((2, 2), np.float32))


def test_softmax_symmetry_and_overflow():
    np.testing.assert_allclose(softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]])
    np.testing.assert_allclose(softmax_rows([[1000.0, 1000.0]]), [[0.5, 0.5]])


def test_softmax_closed_form():
    out = softmax_rows([[0.0, math.log(3.0)]])
    np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-6)


def test_softmax_rejects_nonfinite():
    with pytest.raises(DataError):
        softmax_rows([[np.inf, 0.0]])


@given(
    st.lists(
        st.lists(st.floats(min_value=-50, max_value=50, width=32), min_size=2, max_size=8),
        min_size=1,
        max_size=6,
    ).filter(lambda rows: len({len(r) for r in rows}) == 1)
)
@settings(max_examples=150, deadline=None)
def test_softmax_rows_sum_to_one(rows):
    out = softmax_rows(np.array(rows, dtype=np.float32))
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_rms_norm_example():
    out = normalize(np.array([[3.0, 4.0]]), "rms", np.ones(2, np.float32), eps=1e-12)
    np.testing.assert_allclose(out, [[0.84852814, 1.13137085]], atol=1e-4)


def test_layer_norm_constant_row_is_bias():
    bias = np.array([1.5, -2.0, 0.25], dtype=np.float32)
    out = normalize(np.full((2, 3), 7.0, np.float32), "layer", np.ones(3, np.float32), bias)
    np.testing.assert_allclose(out, np.broadcast_to(bias, (2, 3)), atol=1e-2)


def test_zero_gain_zero_output():
    x = np.random.default_rng(0).normal(size=(4, 8)).astype(np.float32)
    assert not normalize(x, "rms", np.zeros(8, np.float32)).any()
    assert not normalize(x, "layer", np.zeros(8, np.float32), np.zeros(8, np.float32)).any()


@given(
    st.lists(st.floats(min_value=-20, max_value=20, width=32), min_size=4, max_size=32)
)
@settings(max_examples=100, deadline=None)
def test_rms_output_has_unit_rms(values):
    x = np.array([values], dtype=np.float32)
    ms = float(np.mean(x.astype(np.float64) ** 2))
    if ms < 1e-3:
        return
    out = normalize(x, "rms", np.ones(x.shape[1], np.float32), eps=ms * 1e-9)
    rms = math.sqrt(float(np.mean(out.astype(np.float64) ** 2)))
    assert abs(rms - 1.0) <= 1e-4


def test_activation_values():
    assert activation(np.array([0.0], np.float32), "gelu_tanh")[0] == 0.0
    # 0.5*(1+tanh(sqrt(2/pi)*1.044715)) = 0.8411920
    assert abs(activation(np.array([1.0], np.float32), "gelu_tanh")[0] - 0.8411920) < 1e-4
    assert abs(activation(np.array([1.0], np.float32), "silu")[0] - 0.73106) < 1e-4
    # quick_gelu(1) = sigmoid(1.702)
    expected = 1.0 / (1.0 + math.exp(-1.702))
    assert abs(activation(np.array([1.0], np.float32), "quick_gelu")[0] - expected) < 1e-5


@pytest.mark.parametrize("kind", ["silu", "gelu_tanh"])
def test_activation_monotone_on_nonnegative(kind):
    x = np.sort(np.random.default_rng(1).uniform(0, 20, 400)).astype(np.float32)
    y = activation(x, kind)
    assert np.all(np.diff(y) >= 0)


def test_unknown_kinds_rejected():
    with pytest.raises(DataError):
        activation(np.zeros(1, np.float32), "relu6")
    with pytest.raises(DataError):
        normalize(np.zeros((1, 1), np.float32), "batch", np.ones(1, np.float32))
