"""Gradient-descent optimizers over name->array parameter dicts.

Steps are functional: they return a fresh dict of new arrays so callers can
hold snapshots (checkpoints, meta-learning clones) without aliasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def _check_aligned(params: dict, grads: dict, opname: str) -> None:
    if params.keys() != grads.keys():
        missing = sorted(params.keys() ^ grads.keys())
        raise ShapeError(f"{opname}: params and grads disagree on keys {missing}")
    for name, p in params.items():
        if p.shape != grads[name].shape:
            raise ShapeError(f"{opname}: shape mismatch for {name!r}: "
                             f"{p.shape} vs {grads[name].shape}")


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    _check_aligned(params, grads, "sgd_step")
    return {name: p - lr * grads[name] for name, p in params.items()}


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_init(params: dict) -> AdamState:
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()},
                     step=0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam update; mutates state, returns new params."""
    _check_aligned(params, grads, "adam_step")
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * (g * g)
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return out
