"""Non-neural reference forecasters: history averages, persistence, and AR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError


def _series(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ContractError("series must be nonempty")
    return arr


def avg_predict(series, j: int = 1) -> float:
    """Mean of the whole history; the horizon does not matter."""
    return float(_series(series).mean())


def avg_window_predict(series, d: int = 7, j: int = 1) -> float:
    """Mean of the trailing d days (window truncates at the series start)."""
    if d < 1:
        raise ContractError(f"window must be >= 1, got {d}")
    arr = _series(series)
    return float(arr[-min(d, arr.size):].mean())


def last_day_predict(series, j: int = 1) -> float:
    return float(_series(series)[-1])


@dataclass(frozen=True)
class ARCoefficients:
    coef: np.ndarray  # coef[k] multiplies the value k+1 steps back
    intercept: float
    differencing: int
    ridge: bool  # True when the OLS system was singular and ridge was used


def ar_fit(series, p: int = 7, differencing: int = 1) -> ARCoefficients:
    """OLS fit of an AR(p) on the (optionally once-differenced) series."""
    if p < 1:
        raise ContractError(f"AR order must be >= 1, got {p}")
    if differencing not in (0, 1):
        raise ContractError(f"differencing must be 0 or 1, got {differencing}")
    arr = _series(series)
    work = np.diff(arr) if differencing else arr
    if work.size < p + 2:
        raise DataError(f"need at least {p + 2} points after differencing, "
                        f"have {work.size}")
    rows = work.size - p
    design = np.empty((rows, p + 1))
    for k in range(p):
        design[:, k] = work[p - 1 - k:work.size - 1 - k]
    design[:, p] = 1.0
    target = work[p:]
    gram = design.T @ design
    rhs = design.T @ target
    ridge = False
    try:
        sol = np.linalg.solve(gram, rhs)
        # solve() can return garbage instead of raising on near-singular input
        if not np.all(np.isfinite(sol)) or np.linalg.cond(gram) > 1e12:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        ridge = True
        sol = np.linalg.solve(gram + 1e-6 * np.eye(p + 1), rhs)
    return ARCoefficients(coef=sol[:p].copy(), intercept=float(sol[p]),
                          differencing=differencing, ridge=ridge)


def ar_predict(coefficients: ARCoefficients, series, j: int = 1) -> float:
    """Recursive j-step forecast; feeds predictions back, clamps the result at 0."""
    if j < 1:
        raise ContractError(f"horizon must be >= 1, got {j}")
    coef = np.asarray(coefficients.coef, dtype=np.float64).reshape(-1)
    arr = _series(series)
    p = coef.size
    work = list(np.diff(arr) if coefficients.differencing else arr)
    if len(work) < p:
        raise DataError(f"series too short for AR({p}) prediction")
    for _ in range(j):
        lags = work[-1:-p - 1:-1]  # most recent first, matching ar_fit's layout
        work.append(float(np.dot(coef, lags) + coefficients.intercept))
    if coefficients.differencing:
        value = arr[-1] + sum(work[-j:])
    else:
        value = work[-1]
    return max(0.0, float(value))
