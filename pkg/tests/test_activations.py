import math

import mpmath
import numpy as np
import pytest

from autornn.activations import ACTIVATION_NAMES, ActivationKind, apply, derivative

KINDS = list(ActivationKind)
KINKED = {ActivationKind.RELU, ActivationKind.LEAKY_RELU, ActivationKind.ELU, ActivationKind.CELU}


def _mp(kind, x, alpha=1.0):
    """High-precision scalar oracle written from the formulas directly."""
    x = mpmath.mpf(x)
    if kind is ActivationKind.RELU:
        return max(x, 0)
    if kind is ActivationKind.TANH:
        return mpmath.tanh(x)
    if kind is ActivationKind.SIGMOID:
        return 1 / (1 + mpmath.exp(-x))
    if kind is ActivationKind.ELU:
        return x if x >= 0 else mpmath.exp(x) - 1
    if kind is ActivationKind.CELU:
        return max(0, x) + min(0, alpha * (mpmath.exp(x / alpha) - 1))
    if kind is ActivationKind.GELU:
        return x / 2 * (1 + mpmath.erf(x / mpmath.sqrt(2)))
    if kind is ActivationKind.LEAKY_RELU:
        return x if x >= 0 else mpmath.mpf("0.01") * x
    if kind is ActivationKind.SILU:
        return x / (1 + mpmath.exp(-x))


def test_eight_kinds_in_fixed_order():
    assert ACTIVATION_NAMES == ["relu", "tanh", "sigmoid", "elu", "celu", "gelu", "leaky_relu", "silu"]
    assert [int(k) for k in KINDS] == list(range(8))


def test_named_values():
    assert apply(ActivationKind.LEAKY_RELU, -1.0) == pytest.approx(-0.01, abs=1e-15)
    assert apply(ActivationKind.SIGMOID, 0.0) == 0.5
    for k in (ActivationKind.TANH, ActivationKind.GELU, ActivationKind.SILU):
        assert apply(k, 0.0) == 0.0
    assert apply(ActivationKind.ELU, -1.0) == pytest.approx(math.exp(-1) - 1, rel=1e-14)
    assert apply(ActivationKind.ELU, -1.0) == pytest.approx(-0.63212, abs=1e-5)
    assert apply(ActivationKind.CELU, -2.0) == pytest.approx(-0.86466, abs=1e-5)


@pytest.mark.parametrize("kind", KINDS)
def test_forward_matches_high_precision_oracle(kind):
    xs = np.random.default_rng(int(kind)).uniform(-8, 8, size=200)
    got = apply(kind, xs)
    want = np.array([float(_mp(kind, x)) for x in xs])
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)


def test_celu_alpha_is_used():
    a = 2.0
    assert apply(ActivationKind.CELU, -1.0, a) == pytest.approx(float(_mp(ActivationKind.CELU, -1.0, a)), rel=1e-13)
    assert derivative(ActivationKind.CELU, -1.0, a) == pytest.approx(math.exp(-0.5), rel=1e-13)


@pytest.mark.parametrize("kind", KINDS)
def test_derivative_matches_central_differences(kind):
    rng = np.random.default_rng(100 + int(kind))
    xs = rng.uniform(-6, 6, size=200)
    if kind in KINKED:
        xs = xs[np.abs(xs) > 1e-3]
    h = 1e-6
    numeric = (apply(kind, xs + h) - apply(kind, xs - h)) / (2 * h)
    analytic = derivative(kind, xs)
    err = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    assert err < 1e-6


def test_kink_takes_right_derivative():
    assert derivative(ActivationKind.TANH, 0.0) == 1.0
    for k in KINKED:
        assert derivative(k, 0.0) == 1.0, k


def test_identities():
    xs = np.linspace(-5, 5, 1001)
    pos = xs[xs >= 0]
    np.testing.assert_array_equal(apply(ActivationKind.RELU, pos), apply(ActivationKind.LEAKY_RELU, pos))
    np.testing.assert_allclose(apply(ActivationKind.ELU, xs), apply(ActivationKind.CELU, xs, 1.0), rtol=0, atol=0)
    np.testing.assert_allclose(apply(ActivationKind.SILU, xs), xs * apply(ActivationKind.SIGMOID, xs), rtol=1e-15)


def test_monotone_on_grid():
    xs = np.linspace(-20, 20, 4001)
    for k in (ActivationKind.SIGMOID, ActivationKind.TANH):
        assert np.all(np.diff(apply(k, xs)) >= 0)
    pos = xs[xs >= 0]
    assert np.all(np.diff(apply(ActivationKind.SILU, pos)) >= 0)


def test_extreme_inputs_stay_finite():
    xs = np.array([-1e3, -50.0, 50.0, 1e3])
    for k in KINDS:
        assert np.all(np.isfinite(apply(k, xs))) and np.all(np.isfinite(derivative(k, xs)))


def test_from_name_rejects_unknown():
    assert ActivationKind.from_name("leaky_relu") is ActivationKind.LEAKY_RELU
    with pytest.raises(ValueError):
        ActivationKind.from_name("relu6")
