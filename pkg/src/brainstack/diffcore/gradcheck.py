"""Central finite differences: the independent oracle for ``backward``."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import OracleError
from .tensor import Parameter


def finite_difference_gradient(
    loss_fn: Callable[[], float], params: Iterable[Parameter], epsilon: float = 1e-3
) -> dict[str, np.ndarray]:
    """Estimate d loss / d param entry-wise as (f(p+eps) - f(p-eps)) / (2 eps).

    ``loss_fn`` is called with parameter values perturbed in place; it must be
    a deterministic function of them. Determinism is probed by evaluating the
    unperturbed loss twice.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    f0, f1 = float(loss_fn()), float(loss_fn())
    if f0 != f1:
        raise OracleError(f"loss_fn is not deterministic: {f0!r} != {f1!r}")
    out: dict[str, np.ndarray] = {}
    for p in params:
        flat = p.data.reshape(-1)
        grad = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(loss_fn())
            flat[i] = orig - epsilon
            fm = float(loss_fn())
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * epsilon)
        out[p.pid] = grad.reshape(p.shape)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """||a - b|| / max(||a||, ||b||, floor); the floor sits above finite-difference round-off, so gradients that are exactly zero compare as equal."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
