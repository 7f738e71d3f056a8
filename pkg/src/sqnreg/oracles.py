"""Finite-difference gradient oracle.

Used by the test suite and the ``gradcheck`` CLI subcommand as an
implementation-independent reference for every analytic gradient in the
package.
"""

from __future__ import annotations

import numpy as np


def fd_gradient(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function.

    ``fn`` maps an array of the same shape as ``x`` to a float; every
    coordinate is perturbed by ``+-step`` in turn.  O(n) evaluations, meant
    for small verification problems only.
    """
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm of the difference relative to the larger of the two norms."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)
