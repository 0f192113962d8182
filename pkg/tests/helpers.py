"""Shared test utilities: finite-difference oracle and gradient comparison."""

from __future__ import annotations

import numpy as np


def finite_diff_grad(loss_fn, values: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of `loss_fn()` w.r.t. `values`, in place.

    `loss_fn` must recompute the forward pass from the (mutated) array each
    call. The array is restored before returning.
    """
    grad = np.zeros_like(values)
    flat = values.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn()
        flat[i] = orig - step
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |analytic_i - numeric_i| / max(1, |numeric_i|)."""
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def assert_grads_close(analytic, numeric, tol=1e-4):
    err = relative_grad_error(np.asarray(analytic), np.asarray(numeric))
    assert err < tol, f"gradient mismatch: relative error {err:.3e} >= {tol}"
