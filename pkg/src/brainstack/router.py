"""Adaptive expert routing gate.

Each expert feature F_i is scored by one shared linear map h, the scores are
softmax-normalised into routing weights, and the fused representation
F_meta = sum_i alpha_i F_i feeds a linear class head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import Tensor, ops
from .diffcore.errors import ShapeError
from .diffcore.rng import make_rng
from .experts import ParamSet


@dataclass
class RoutingState:
    scores: Tensor   # (B, E)
    weights: Tensor  # (B, E), rows on the simplex


def init_router(d_route: int, num_classes: int, seed: int = 0, prefix: str = "router.", dtype=np.float64) -> ParamSet:
    """The score map h starts at zero, so routing begins exactly uniform and any
    preference between experts is learned; the class head is fan-in uniform."""
    ps = ParamSet(prefix, dtype)
    ps.add("h.w", np.zeros(d_route))
    ps.add("h.b", np.zeros(1))
    bound = 1.0 / math.sqrt(d_route)
    for name, shape in (("head.w", (d_route, num_classes)), ("head.b", (num_classes,))):
        ps.add(name, make_rng(seed, "init", prefix + name).uniform(-bound, bound, size=shape))
    return ps


def _stacked(features) -> tuple[Tensor, bool]:
    if isinstance(features, Tensor):
        if features.ndim != 3:
            raise ShapeError("route", f"stacked features must be (B, E, D), got {features.shape}")
        return features, False
    feats = [f if isinstance(f, Tensor) else Tensor(f) for f in features]
    if not feats:
        raise ShapeError("route", "need at least one expert feature")
    if any(f.shape != feats[0].shape for f in feats):
        raise ShapeError("route", f"expert features disagree in shape: {[f.shape for f in feats]}")
    single = feats[0].ndim == 1
    if single:
        feats = [ops.reshape(f, (1,) + f.shape) for f in feats]
    return ops.stack(feats, axis=1), single


def route_scores(features: Sequence | Tensor, ps: ParamSet) -> Tensor:
    """One score per expert from the shared projection h: (B, E, D) -> (B, E)."""
    stacked, single = _stacked(features)
    D = ps["h.w"].shape[0]
    if stacked.shape[-1] != D:
        raise ShapeError("route_scores", f"feature dim {stacked.shape[-1]} != router dim {D}")
    # multiply-and-sum per row keeps each score independent of the expert's position
    scores = ops.add(ops.sum(ops.mul(stacked, ps["h.w"]), axis=-1), ps["h.b"])
    return ops.reshape(scores, scores.shape[1:]) if single else scores


def routing_weights(scores) -> Tensor:
    return ops.softmax(scores, axis=-1, order_invariant=True)


def fuse(features: Sequence | Tensor, weights) -> Tensor:
    """F_meta: the alpha-weighted sum of expert features."""
    stacked, single = _stacked(features)
    a = weights if isinstance(weights, Tensor) else Tensor(weights)
    if single and a.ndim == 1:
        a = ops.reshape(a, (1,) + a.shape)
    out = ops.convex_combine(a, stacked)
    return ops.reshape(out, out.shape[1:]) if single else out


def predict(f_meta, ps: ParamSet) -> tuple[Tensor, np.ndarray]:
    """Class logits and argmax labels (ties go to the lowest class index)."""
    f = f_meta if isinstance(f_meta, Tensor) else Tensor(f_meta)
    single = f.ndim == 1
    logits = ops.linear(ops.reshape(f, (1,) + f.shape) if single else f, ps["head.w"], ps["head.b"])
    if single:
        logits = ops.reshape(logits, logits.shape[1:])
    return logits, np.argmax(logits.data, axis=-1)


class Router:
    def __init__(self, d_route: int, num_classes: int, seed: int = 0, dtype=np.float64):
        self.params = init_router(d_route, num_classes, seed, dtype=dtype)

    def __call__(self, features: Sequence[Tensor]) -> tuple[RoutingState, Tensor, Tensor]:
        stacked, _ = _stacked(features)
        scores = route_scores(stacked, self.params)
        alpha = routing_weights(scores)
        f_meta = ops.convex_combine(alpha, stacked)
        logits, _ = predict(f_meta, self.params)
        return RoutingState(scores, alpha), f_meta, logits
