"""Shared test oracles: central finite differences and error measures."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


def central_difference(f: Callable[[], float], value: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of f with respect to `value`, perturbed in place.

    `f` must recompute the scalar objective from current array contents.
    """
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    """Worst-case elementwise relative error with a denominator floor.

    The floor turns the comparison into an absolute check for entries whose
    true magnitude sits below finite-difference noise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(
    f: Callable[[], float],
    analytic: Mapping[str, np.ndarray],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-5,
) -> dict[str, float]:
    """Compare analytic gradients against central differences per parameter.

    Returns the per-parameter worst relative error; raises AssertionError on
    the first parameter exceeding `tol`.
    """
    errors: dict[str, float] = {}
    for name, value in params.items():
        numeric = central_difference(f, value, h=h)
        err = rel_err(analytic[name], numeric, floor=floor)
        errors[name] = err
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3e} >= {tol}"
    return errors
