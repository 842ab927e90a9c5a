"""Central finite differences, used as an oracle for analytic gradients."""

from __future__ import annotations

import numpy as np


def numerical_grad(f, array: np.ndarray, h: float = 1e-6, indices=None) -> np.ndarray:
    """Estimate d f() / d array by perturbing ``array`` in place.

    ``f`` takes no arguments and returns a float. When ``indices`` (flat
    positions) is given only those entries are estimated; the rest stay zero.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    todo = range(flat.size) if indices is None else indices
    for i in todo:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
