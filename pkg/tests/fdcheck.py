"""Central finite-difference oracle shared by gradient tests.

Independent of the tape: it re-runs a closure over raw parameter arrays with
per-element +/- h perturbations.
"""

import numpy as np

STEP = 1e-5


def central_diff(f, arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """d f / d arr, one central difference per element. Mutates arr in place
    during evaluation and restores it afterwards."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    grad = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * h)
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Worst-case elementwise relative error with a small absolute floor."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
