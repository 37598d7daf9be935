"""Candidate activation functions for cell nodes, with analytic derivatives."""
from __future__ import annotations

import enum

import numpy as np
from scipy.special import erf, expit

LEAKY_SLOPE = 1e-2
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ActivationKind(enum.IntEnum):
    # integer codes index the controller's activation head; order is fixed
    RELU = 0
    TANH = 1
    SIGMOID = 2
    ELU = 3
    CELU = 4
    GELU = 5
    LEAKY_RELU = 6
    SILU = 7

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "ActivationKind":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown activation {name!r}") from None


ACTIVATION_NAMES = [k.label for k in ActivationKind]


def _expm1_neg(x, alpha=1.0):
    # alpha*(exp(x/alpha)-1) evaluated only where x < 0 to avoid overflow
    return alpha * np.expm1(np.minimum(x, 0.0) / alpha)


def apply(kind, x, alpha: float = 1.0):
    kind = ActivationKind(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind is ActivationKind.RELU:
        return np.maximum(x, 0.0)
    if kind is ActivationKind.TANH:
        return np.tanh(x)
    if kind is ActivationKind.SIGMOID:
        return expit(x)
    if kind is ActivationKind.ELU:
        return np.where(x >= 0, x, _expm1_neg(x))
    if kind is ActivationKind.CELU:
        return np.maximum(x, 0.0) + np.minimum(0.0, _expm1_neg(x, alpha))
    if kind is ActivationKind.GELU:
        return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))
    if kind is ActivationKind.LEAKY_RELU:
        return np.where(x >= 0, x, LEAKY_SLOPE * x)
    if kind is ActivationKind.SILU:
        return x * expit(x)
    raise ValueError(kind)


def derivative(kind, x, alpha: float = 1.0):
    """Elementwise derivative; kinks at 0 take the right-derivative."""
    kind = ActivationKind(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind is ActivationKind.RELU:
        return (x >= 0).astype(np.float64)
    if kind is ActivationKind.TANH:
        return 1.0 - np.tanh(x) ** 2
    if kind is ActivationKind.SIGMOID:
        s = expit(x)
        return s * (1.0 - s)
    if kind is ActivationKind.ELU:
        return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0)))
    if kind is ActivationKind.CELU:
        return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0) / alpha))
    if kind is ActivationKind.GELU:
        return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)
    if kind is ActivationKind.LEAKY_RELU:
        return np.where(x >= 0, 1.0, LEAKY_SLOPE)
    if kind is ActivationKind.SILU:
        s = expit(x)
        return s * (1.0 + x * (1.0 - s))
    raise ValueError(kind)
