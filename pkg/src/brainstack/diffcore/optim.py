from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import StepAbortedError
from .tensor import Parameter


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """One SGD update with heavy-ball momentum and L2 weight decay.

    v <- momentum * v + grad + weight_decay * theta; theta <- theta - lr * v.
    Gradients are zeroed afterwards. A non-finite gradient aborts the whole
    step before any parameter is touched.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise StepAbortedError(p.pid)
    for p in params:
        v = p.momentum
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v
        p.zero_grad()
