"""Loss components and the epoch/loss-dependent weighting schedule.

The total objective is

    total = lam * fused + alpha * global + beta * local + gamma * distill

where the weights follow a warm-up phase (global expert only), then a linear
transition driven by training progress P in [0, 1], with the auxiliary terms
additionally gated by how far the fused loss sits below an upper estimate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .diffcore import Tensor, ops


class LabelError(IndexError):
    pass


class ContractError(ValueError):
    pass


def _logits2d(logits) -> tuple[Tensor, bool]:
    t = logits if isinstance(logits, Tensor) else Tensor(logits)
    single = t.ndim == 1
    return (ops.reshape(t, (1,) + t.shape) if single else t), single


def cross_entropy(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch (log-sum-exp stable)."""
    z, single = _logits2d(logits)
    y = np.atleast_1d(np.asarray(labels))
    K = z.shape[-1]
    if y.shape != (z.shape[0],):
        raise ContractError(f"{y.shape[0]} labels for {z.shape[0]} rows of logits")
    if y.size and (y.min() < 0 or y.max() >= K):
        raise LabelError(f"label out of range [0, {K})")
    return ops.scale(ops.mean(ops.pick(ops.log_softmax(z), y)), -1.0)


def distill_loss(global_logits, regional_logits: Sequence, temperature: float = 4.0) -> Tensor:
    """Sum over regional experts of KL(softmax(g/T) || softmax(r_i/T)), batch-averaged.

    The teacher side is a constant: no gradient reaches ``global_logits``.
    No T^2 rescaling is applied.
    """
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    if len(regional_logits) == 0:
        raise ContractError("distillation needs at least one regional expert")
    g, _ = _logits2d(global_logits)
    inv_t = 1.0 / temperature
    # same log_softmax routine on both sides, so identical logits give exactly 0
    log_p = ops.log_softmax(ops.scale(ops.detach(g), inv_t)).data
    p = np.exp(log_p)
    total = None
    for r in regional_logits:
        r, _ = _logits2d(r)
        if r.shape != g.shape:
            raise ContractError(f"regional logits {r.shape} vs global {g.shape}")
        log_q = ops.log_softmax(ops.scale(r, inv_t))
        kl = ops.mean(ops.sum(ops.mul(p, ops.sub(log_p, log_q)), axis=-1))
        total = kl if total is None else ops.add(total, kl)
    return total


def progress(epoch: float, t_warmup: float, t_transition: float) -> float:
    return min(1.0, max(0.0, (epoch - t_warmup) / t_transition))


def fused_weight(p: float, lambda_min: float, lambda_max: float) -> float:
    return (1.0 - p) * lambda_min + p * lambda_max


def aux_weight(x_max: float, p: float, fused_loss: float, max_loss_estimate: float) -> float:
    if max_loss_estimate <= 0:
        raise ContractError("max_loss_estimate must be positive")
    return x_max * p * (1.0 - min(fused_loss / max_loss_estimate, 1.0))


@dataclass(frozen=True)
class ScheduleConfig:
    t_warmup: int = 5
    t_transition: int = 20
    lambda_min: float = 0.2
    lambda_max: float = 1.0
    alpha_max: float = 0.8
    beta_max: float = 0.5
    gamma_max: float = 0.5
    max_loss_estimate: float | None = None  # None: ln K, the chance-level cross-entropy
    temperature: float = 4.0

    def __post_init__(self):
        if self.lambda_min > self.lambda_max:
            raise ValueError("lambda_min must not exceed lambda_max")
        if self.t_transition < 1:
            raise ValueError("t_transition must be >= 1")
        if self.t_warmup < 0:
            raise ValueError("t_warmup must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_loss_estimate is not None and self.max_loss_estimate <= 0:
            raise ValueError("max_loss_estimate must be positive")

    def loss_ceiling(self, num_classes: int | None = None) -> float:
        if self.max_loss_estimate is not None:
            return self.max_loss_estimate
        if num_classes is None:
            raise ContractError("max_loss_estimate unset and num_classes unknown")
        return math.log(num_classes)

    def with_(self, **changes) -> "ScheduleConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class ScheduledWeights:
    lam: float
    alpha: float
    beta: float
    gamma: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.lam, self.alpha, self.beta, self.gamma


def schedule_weights(epoch: int, fused_loss: float, cfg: ScheduleConfig,
                     num_classes: int | None = None) -> ScheduledWeights:
    """Loss weights for ``epoch`` given the current (detached) fused loss.

    Warm-up trains the global expert alone. Afterwards the global weight
    decays as alpha_max * (1 - P) * gate, while the regional and distillation
    weights grow with P (distillation with an extra factor P).
    """
    if epoch < cfg.t_warmup:
        return ScheduledWeights(0.0, cfg.alpha_max, 0.0, 0.0)
    p = progress(epoch, cfg.t_warmup, cfg.t_transition)
    ceiling = cfg.loss_ceiling(num_classes)
    gate = 1.0 - min(fused_loss / ceiling, 1.0)
    return ScheduledWeights(
        lam=fused_weight(p, cfg.lambda_min, cfg.lambda_max),
        alpha=cfg.alpha_max * (1.0 - p) * gate,
        beta=aux_weight(cfg.beta_max, p, fused_loss, ceiling),
        gamma=aux_weight(cfg.gamma_max, p, fused_loss, ceiling) * p,
    )


@dataclass
class LossBreakdown:
    fused: float
    global_: float
    local: float
    distill: float
    total: float
    graph: Tensor | None = None  # differentiable total when built from Tensors


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def total_loss(fused, global_, local, distill, w: ScheduledWeights) -> LossBreakdown:
    """Weighted sum of the four components.

    Components may be floats or scalar Tensors. Terms with zero weight are
    left out of the differentiable graph, so they contribute no gradient.
    """
    parts = (fused, global_, local, distill)
    values = [_value(c) for c in parts]
    if any(v < 0 for v in values):
        raise ContractError(f"loss components must be nonnegative, got {values}")
    total = math.fsum(wi * v for wi, v in zip(w.as_tuple(), values))
    graph = None
    for wi, c in zip(w.as_tuple(), parts):
        if wi != 0.0 and isinstance(c, Tensor):
            term = ops.scale(c, wi)
            graph = term if graph is None else ops.add(graph, term)
    return LossBreakdown(*values, total=total, graph=graph)
