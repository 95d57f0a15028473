"""Dense layers with explicit forward/backward passes.

Tensors are plain float64 numpy arrays, row-major, batch on axis 0.
Each forward returns (output, cache); the matching backward consumes
the upstream gradient and the cache and returns gradients for inputs
and parameters.  Everything runs in f64; f32 appears only at file
boundaries elsewhere in the package.

GELU uses the exact erf form, not the tanh approximation, so the
finite-difference tolerances asserted in the tests are meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np
from scipy.special import erf

from .errors import NumericalError, ShapeMismatchError


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


def _as_matrix(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got shape {x.shape}")
    return x


@dataclass
class LinearLayer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeMismatchError(
                f"linear layer W {self.W.shape} and b {self.b.shape} are inconsistent"
            )

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass
class LoraAdapter:
    """Additive low-rank update scaled by alpha/rank; B starts at zero."""

    A: np.ndarray  # (rank, in)
    B: np.ndarray  # (out, rank)
    rank: int
    alpha: float

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.shape[0] != self.rank or self.B.shape[1] != self.rank:
            raise ShapeMismatchError(
                f"adapter rank {self.rank} inconsistent with A {self.A.shape} / B {self.B.shape}"
            )
        if self.rank > min(self.A.shape[1], self.B.shape[0]):
            raise ShapeMismatchError("adapter rank exceeds min(in, out)")
        if self.alpha <= 0:
            raise ShapeMismatchError("alpha must be positive")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def identity(cls, dim: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.ones(dim), np.zeros(dim), np.zeros(dim), np.ones(dim), momentum, eps)


@dataclass
class GateUnit:
    Wg: np.ndarray  # (h, 2h)
    bg: np.ndarray  # (h,)

    def __post_init__(self):
        h = self.bg.shape[0]
        if self.Wg.shape != (h, 2 * h):
            raise ShapeMismatchError(
                f"gate weight {self.Wg.shape} inconsistent with hidden size {h}"
            )


# ---------------------------------------------------------------------------
# GELU


def gelu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    phi = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    return x * phi, x


def gelu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    phi = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    density = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return dy * (phi + x * density)


# ---------------------------------------------------------------------------
# Linear


def linear_forward(x: np.ndarray, layer: LinearLayer) -> tuple[np.ndarray, tuple]:
    x = _as_matrix(x, "linear input")
    if x.shape[1] != layer.in_dim:
        raise ShapeMismatchError(
            f"linear input dim {x.shape[1]} != layer in_dim {layer.in_dim}"
        )
    return x @ layer.W.T + layer.b, (x, layer)


def linear_backward(dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, layer = cache
    dx = dy @ layer.W
    dW = dy.T @ x
    db = dy.sum(axis=0)
    return dx, dW, db


# ---------------------------------------------------------------------------
# Batch normalization


def batchnorm_forward(
    x: np.ndarray, state: BatchNormState, mode: Mode
) -> tuple[np.ndarray, tuple]:
    """Column-wise batch norm; Train uses biased batch stats and updates
    running stats as r <- (1-momentum)*r + momentum*batch."""
    x = _as_matrix(x, "batchnorm input")
    if x.shape[1] != state.gamma.shape[0]:
        raise ShapeMismatchError(
            f"batchnorm input dim {x.shape[1]} != state dim {state.gamma.shape[0]}"
        )
    if mode is Mode.TRAIN:
        if x.shape[0] < 2:
            raise NumericalError("batchnorm in Train mode needs a batch of at least 2 rows")
        mean = x.mean(axis=0)
        var = x.var(axis=0)  # biased
        state.running_mean = (1.0 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1.0 - state.momentum) * state.running_var + state.momentum * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x - mean) * inv_std
    return state.gamma * x_hat + state.beta, (x_hat, inv_std, state.gamma, mode, x.shape[0])


def batchnorm_backward(dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_hat, inv_std, gamma, mode, n = cache
    dgamma = (dy * x_hat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dx_hat = dy * gamma
    if mode is Mode.TRAIN:
        # Batch statistics depend on x, so the Jacobian couples rows.
        dx = (
            inv_std
            / n
            * (n * dx_hat - dx_hat.sum(axis=0) - x_hat * (dx_hat * x_hat).sum(axis=0))
        )
    else:
        dx = dx_hat * inv_std
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Dropout


def dropout_forward(
    x: np.ndarray, p: float, mode: Mode, stream=None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: surviving units are scaled by 1/(1-p) in Train mode."""
    if not 0.0 <= p < 1.0:
        raise NumericalError(f"dropout rate must be in [0, 1), got {p}")
    x = np.asarray(x, dtype=np.float64)
    if mode is Mode.EVAL or p == 0.0:
        return x, None
    if stream is None:
        raise NumericalError("dropout in Train mode with p > 0 requires a random stream")
    keep = stream.uniform(x.size).reshape(x.shape) >= p
    mask = keep / (1.0 - p)
    return x * mask, mask


def dropout_backward(dy: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return dy if mask is None else dy * mask


# ---------------------------------------------------------------------------
# LoRA-adapted linear


def lora_forward(
    x: np.ndarray, base: LinearLayer, lora: LoraAdapter | None
) -> tuple[np.ndarray, tuple]:
    """y = x W^T + b + (alpha/rank) * (x A^T) B^T.  lora=None means plain linear."""
    y, base_cache = linear_forward(x, base)
    if lora is None:
        return y, (base_cache, None, None)
    if lora.A.shape[1] != base.in_dim or lora.B.shape[0] != base.out_dim:
        raise ShapeMismatchError(
            f"adapter shapes A {lora.A.shape} / B {lora.B.shape} do not match "
            f"base {base.out_dim}x{base.in_dim}"
        )
    xa = x @ lora.A.T  # (n, rank)
    return y + lora.scale * xa @ lora.B.T, (base_cache, lora, xa)


def lora_backward(
    dy: np.ndarray, cache: tuple
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Returns (dx, dW, db, dA, dB); dA/dB are None without an adapter."""
    base_cache, lora, xa = cache
    dx, dW, db = linear_backward(dy, base_cache)
    if lora is None:
        return dx, dW, db, None, None
    x, _ = base_cache
    dxa = lora.scale * dy @ lora.B  # (n, rank)
    dB = lora.scale * dy.T @ xa
    dA = dxa.T @ x
    dx = dx + dxa @ lora.A
    return dx, dW, db, dA, dB


# ---------------------------------------------------------------------------
# Gated fusion


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gated_fuse_forward(
    u: np.ndarray, v: np.ndarray, gate: GateUnit
) -> tuple[np.ndarray, tuple]:
    """Convex per-dimension blend: g = sigmoid(Wg [u;v] + bg), out = g*u + (1-g)*v."""
    u = _as_matrix(u, "fusion input u")
    v = _as_matrix(v, "fusion input v")
    if u.shape != v.shape:
        raise ShapeMismatchError(f"fusion inputs differ in shape: {u.shape} vs {v.shape}")
    if gate.bg.shape[0] != u.shape[1]:
        raise ShapeMismatchError(
            f"gate hidden size {gate.bg.shape[0]} != input dim {u.shape[1]}"
        )
    uv = np.concatenate([u, v], axis=1)
    g = _sigmoid(uv @ gate.Wg.T + gate.bg)
    return g * u + (1.0 - g) * v, (u, v, uv, g, gate)


def gated_fuse_backward(
    dy: np.ndarray, cache: tuple
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    u, v, uv, g, gate = cache
    h = u.shape[1]
    dg = dy * (u - v)
    dz = dg * g * (1.0 - g)
    dWg = dz.T @ uv
    dbg = dz.sum(axis=0)
    duv = dz @ gate.Wg
    du = dy * g + duv[:, :h]
    dv = dy * (1.0 - g) + duv[:, h:]
    return du, dv, dWg, dbg


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps a flat parameter vector to (scalar value, analytic gradient).
    Per-coordinate error is |a - n| / max(1e-8, |a| + |n|).
    """
    point = np.asarray(point, dtype=np.float64)
    _, analytic = f(point)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != point.shape:
        raise ShapeMismatchError(
            f"gradient shape {analytic.shape} != point shape {point.shape}"
        )
    worst = 0.0
    for i in range(point.size):
        shift = np.zeros_like(point)
        shift[i] = eps
        hi, _ = f(point + shift)
        lo, _ = f(point - shift)
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
        worst = max(worst, err)
    return worst
