"""Neural building blocks: Glorot init, batch normalization, inverted dropout."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .rng import Rng
from .tape import Var

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def glorot_init(fan_in: int, fan_out: int, rng: Rng) -> np.ndarray:
    """Uniform init on +-sqrt(6 / (fan_in + fan_out)), shape (fan_in, fan_out)."""
    if fan_in < 1 or fan_out < 1:
        raise ContractError("glorot_init fans must be positive")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def batchnorm(x: Var, gamma: Var, beta: Var, running_mean: np.ndarray,
              running_var: np.ndarray, mode: str,
              momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Var:
    """Column-wise batch normalization with learned scale and shift.

    Train mode normalizes by batch statistics (biased variance) and folds them
    into the running buffers in place; eval mode normalizes by the buffers.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    xv = x.value
    d = xv.shape[1]
    for name, arr in (("gamma", gamma.value), ("beta", beta.value)):
        if arr.shape != (1, d):
            raise ShapeError(f"batchnorm {name} must have shape (1, {d}), got {arr.shape}")
    if running_mean.shape != (1, d) or running_var.shape != (1, d):
        raise ShapeError("batchnorm running buffers must have shape (1, d)")
    tape = x.tape
    gv, bv = gamma.value, beta.value

    if mode == "train":
        if xv.shape[0] < 1:
            raise ContractError("batchnorm needs at least one row")
        mean = xv.mean(axis=0, keepdims=True)
        var = xv.var(axis=0, keepdims=True)  # biased, matches eval reconstruction
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.copy()
        var = running_var.copy()

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv_std
    out = gv * xhat + bv
    n = xv.shape[0]

    def backward(g):
        dgamma = (g * xhat).sum(axis=0, keepdims=True)
        dbeta = g.sum(axis=0, keepdims=True)
        if mode == "train":
            dxhat = g * gv
            dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0, keepdims=True)
                                  - xhat * (dxhat * xhat).sum(axis=0, keepdims=True))
        else:
            dx = g * gv * inv_std
        return dx, dgamma, dbeta

    return tape.node(out, (x, gamma, beta), backward, "batchnorm")


def dropout(x: Var, p: float, rng: Rng, mode: str) -> Var:
    """Inverted dropout: zero entries with probability p, scale rest by 1/(1-p)."""
    if mode not in ("train", "eval"):
        raise ContractError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= p
    scale = 1.0 / (1.0 - p)
    mask = keep * scale

    def backward(g):
        return (g * mask,)

    return x.tape.node(x.value * mask, (x,), backward, "dropout")
