"""Finite-difference gradient checks over primitives and whole model graphs.

Every check builds float64 parameters from a seed, differentiates a scalar
loss with ``backward`` and compares the whole gradient vector against
central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..diffcore import Context, Parameter, backward, finite_difference_gradient, make_rng, no_grad, ops, relative_error
from ..experts import CNetConfig, CTNetConfig, cnet_forward, ctnet_forward, init_expert
from ..objective import ScheduleConfig, cross_entropy, distill_loss, schedule_weights, total_loss
from ..router import Router

TOLERANCE = 1e-4
EPSILON = 1e-3
MODULES = ("ops", "cnet", "ctnet", "router", "objective")


@dataclass
class CheckResult:
    module: str
    name: str
    seed: int
    max_rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < TOLERANCE)


def compare(loss_fn: Callable, params: list[Parameter]) -> float:
    """Relative error between the full analytic and numeric gradient vectors."""
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic = np.concatenate([p.grad.ravel() for p in params])
    with no_grad():
        numeric = finite_difference_gradient(lambda: float(loss_fn().data), params, EPSILON)
    return relative_error(analytic, np.concatenate([numeric[p.pid].ravel() for p in params]))


def _param(rng, name: str, *shape, scale: float = 1.0) -> Parameter:
    return Parameter(name, scale * rng.standard_normal(shape))


def _probe(rng, y) -> Callable:
    """Contract an op output with fixed random weights into a scalar."""
    r = rng.standard_normal(y.shape)
    return lambda t: ops.sum(ops.mul(t, r))


def _op_cases() -> dict[str, Callable]:
    """Each case maps an rng to (params, loss_fn)."""

    def unary(f, *shape, scale=1.0):
        def build(rng):
            x = _param(rng, "x", *shape, scale=scale)
            probe = _probe(rng, f(x))
            return [x], lambda: probe(f(x))
        return build

    def binary(f, sa, sb):
        def build(rng):
            a, b = _param(rng, "a", *sa), _param(rng, "b", *sb)
            probe = _probe(rng, f(a, b))
            return [a, b], lambda: probe(f(a, b))
        return build

    def batch_norm(rng):
        x = _param(rng, "x", 4, 3, 5)
        g, b = _param(rng, "gamma", 3), _param(rng, "beta", 3)
        rm, rv = np.zeros(3), np.ones(3)
        f = lambda: ops.batch_norm(x, g, b, rm, rv, Context("train"))  # noqa: E731
        probe = _probe(rng, f())
        return [x, g, b], lambda: probe(f())

    def layer_norm(rng):
        x, g, b = _param(rng, "x", 3, 4, 6), _param(rng, "gamma", 6), _param(rng, "beta", 6)
        probe = _probe(rng, ops.layer_norm(x, g, b))
        return [x, g, b], lambda: probe(ops.layer_norm(x, g, b))

    def conv(groups, padding, bias):
        def build(rng):
            x = _param(rng, "x", 2, 4, 9)
            w = _param(rng, "w", 4, 4 // groups, 3)
            b = _param(rng, "b", 4) if bias else None
            f = lambda: ops.conv1d(x, w, b, groups=groups, padding=padding)  # noqa: E731
            probe = _probe(rng, f())
            return [x, w] + ([b] if bias else []), lambda: probe(f())
        return build

    def spatial(groups):
        def build(rng):
            x = _param(rng, "x", 2, 2, 3, 5)
            w = _param(rng, "w", 4, 2 // groups, 3)
            b = _param(rng, "b", 4)
            f = lambda: ops.spatial_conv(x, w, b, groups=groups)  # noqa: E731
            probe = _probe(rng, f())
            return [x, w, b], lambda: probe(f())
        return build

    def pointwise(rng):
        x, w, b = _param(rng, "x", 2, 3, 5), _param(rng, "w", 4, 3), _param(rng, "b", 4)
        probe = _probe(rng, ops.pointwise_conv(x, w, b))
        return [x, w, b], lambda: probe(ops.pointwise_conv(x, w, b))

    def linear(rng):
        x, w, b = _param(rng, "x", 3, 4), _param(rng, "w", 4, 2), _param(rng, "b", 2)
        probe = _probe(rng, ops.linear(x, w, b))
        return [x, w, b], lambda: probe(ops.linear(x, w, b))

    def attention(rng):
        q, k, v = (_param(rng, n, 2, 2, 3, 4) for n in "qkv")
        probe = _probe(rng, ops.attention(q, k, v))
        return [q, k, v], lambda: probe(ops.attention(q, k, v))

    def convex(rng):
        s, vals = _param(rng, "s", 3, 4), _param(rng, "v", 3, 4, 5)
        f = lambda: ops.convex_combine(ops.softmax(s, order_invariant=True), vals)  # noqa: E731
        probe = _probe(rng, f())
        return [s, vals], lambda: probe(f())

    def dropout(rng):
        x = _param(rng, "x", 3, 7)
        f = lambda: ops.dropout(x, 0.3, Context("train", seed=5))  # noqa: E731
        probe = _probe(rng, f())
        return [x], lambda: probe(f())

    def pick(rng):
        x = _param(rng, "x", 4, 3)
        labels = rng.integers(0, 3, size=4)
        return [x], lambda: ops.sum(ops.pick(ops.log_softmax(x), labels))

    def stack(rng):
        a, b = _param(rng, "a", 2, 3), _param(rng, "b", 2, 3)
        f = lambda: ops.stack([a, b, a], axis=1)  # noqa: E731
        probe = _probe(rng, f())
        return [a, b], lambda: probe(f())

    return {
        "add": binary(ops.add, (3, 4), (4,)),
        "sub": binary(ops.sub, (3, 1), (3, 4)),
        "mul": binary(ops.mul, (2, 3, 4), (3, 1)),
        "matmul": binary(ops.matmul, (2, 3, 4), (4, 5)),
        "scale": unary(lambda x: ops.scale(x, -2.5), 3, 4),
        "elu": unary(ops.elu, 4, 5),
        "reshape": unary(lambda x: ops.reshape(x, (6, 2)), 3, 4),
        "transpose": unary(lambda x: ops.transpose(x, (2, 0, 1)), 2, 3, 4),
        "index_select": unary(lambda x: ops.index_select(x, (2, 0, 2), axis=1), 2, 4, 3),
        "sum": unary(lambda x: ops.sum(x, axis=1), 3, 4),
        "mean": unary(lambda x: ops.mean(x, axis=0, keepdims=True), 3, 4),
        "avg_pool": unary(lambda x: ops.avg_pool(x, 3), 2, 3, 10),
        "softmax": unary(lambda x: ops.softmax(x, axis=-1), 3, 5),
        "softmax_sorted": unary(lambda x: ops.softmax(x, axis=-1, order_invariant=True), 3, 5),
        "log_softmax": unary(ops.log_softmax, 3, 5),
        "stack": stack,
        "pick": pick,
        "linear": linear,
        "conv1d": conv(1, "same", True),
        "conv1d_grouped": conv(2, "same", False),
        "conv1d_valid": conv(1, "valid", True),
        "spatial_conv": spatial(1),
        "spatial_conv_grouped": spatial(2),
        "depthwise_conv": lambda rng: _depthwise(rng),
        "pointwise_conv": pointwise,
        "batch_norm": batch_norm,
        "layer_norm": layer_norm,
        "convex_combine": convex,
        "dropout": dropout,
        "attention": attention,
    }


def _depthwise(rng):
    x, w = _param(rng, "x", 2, 2, 3, 5), _param(rng, "w", 4, 1, 3)
    probe = _probe(rng, ops.depthwise_conv(x, w))
    return [x, w], lambda: probe(ops.depthwise_conv(x, w))


SMALL_CNET = CNetConfig(in_channels=3, time_len=16, temporal_kernel=5, temporal_filters=2, depth_multiplier=2,
                        separable_kernel=3, pool1=2, pool2=2, dropout=0.25, feature_dim=5, num_classes=3)
SMALL_CTNET = CTNetConfig(in_channels=3, time_len=16, temporal_kernel=5, conv_filters=3, embed_dim=4, pool=4,
                          layers=1, heads=2, ff_dim=6, dropout=0.25, feature_dim=5, num_classes=3)


def _expert_case(cfg, forward):
    def build(rng, seed):
        ps = init_expert(cfg, seed, "e.")
        x = rng.standard_normal((2, cfg.in_channels, cfg.time_len))
        y = rng.integers(0, cfg.num_classes, size=2)

        def loss():
            # logits are read off the feature, so this reaches every parameter
            return cross_entropy(forward(x, ps, Context("train", seed=seed), cfg).logits, y)
        return list(ps), loss
    return build


def _router_case(rng, seed):
    E, D, K, B = 4, 5, 3, 3
    router = Router(D, K, seed)
    # h starts at zero; move it off the symmetric point so every path is exercised
    router.params["h.w"].data[...] = rng.standard_normal(D)
    feats = [_param(rng, f"F{i}", B, D) for i in range(E)]
    y = rng.integers(0, K, size=B)

    def loss():
        _, _, logits = router(feats)
        return cross_entropy(logits, y)
    return list(router.params) + feats, loss


def _objective_case(rng, seed):
    B, K = 3, 4
    fused, glob = _param(rng, "fused", B, K), _param(rng, "global", B, K)
    regional = [_param(rng, f"r{i}", B, K) for i in range(3)]
    y = rng.integers(0, K, size=B)
    sched = ScheduleConfig(t_warmup=2, t_transition=4)
    w = schedule_weights(4, 0.6, sched, K)
    # the teacher is a constant by contract, so the oracle holds it fixed too
    teacher = glob.data.copy()

    def loss():
        local = ops.mean(ops.stack([cross_entropy(r, y) for r in regional]))
        dist = distill_loss(teacher, regional, 2.0)
        return total_loss(cross_entropy(fused, y), cross_entropy(glob, y), local, dist, w).graph
    return [fused, glob] + regional, loss


def run_gradcheck(module: str = "all", seeds=range(20), on_result=None) -> list[CheckResult]:
    if module != "all" and module not in MODULES:
        raise ValueError(f"unknown module {module!r}; choose all or one of {', '.join(MODULES)}")
    chosen = MODULES if module == "all" else (module,)
    cases: list[tuple[str, str, Callable]] = []
    if "ops" in chosen:
        cases += [("ops", name, lambda rng, seed, b=b: b(rng)) for name, b in _op_cases().items()]
    if "cnet" in chosen:
        cases.append(("cnet", "cnet_forward", _expert_case(SMALL_CNET, cnet_forward)))
    if "ctnet" in chosen:
        cases.append(("ctnet", "ctnet_forward", _expert_case(SMALL_CTNET, ctnet_forward)))
    if "router" in chosen:
        cases.append(("router", "route_fuse_predict", _router_case))
    if "objective" in chosen:
        cases.append(("objective", "total_loss", _objective_case))
    results = []
    for mod, name, build in cases:
        for seed in seeds:
            t0 = time.perf_counter()
            params, loss = build(make_rng(seed, "gradcheck", name), seed)
            res = CheckResult(mod, name, seed, compare(loss, params), time.perf_counter() - t0)
            results.append(res)
            if on_result is not None:
                on_result(res)
    return results
