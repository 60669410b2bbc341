"""Regional (CNet) and global (CTNet) experts.

Both families map a (B, C, T) batch to an :class:`ExpertOutput`: a routed
feature of width ``feature_dim`` and class logits read off that feature by a
second linear map, so an expert's own supervision shapes what it routes.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from .diffcore import Context, Parameter, Tensor, ops
from .diffcore.errors import ShapeError
from .diffcore.rng import make_rng


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


def _check_common(cfg, problems: list[str]) -> None:
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, int) and not isinstance(v, bool) and f.name != "layers" and v < 1:
            problems.append(f"{f.name} must be >= 1, got {v}")
    if not 0.0 <= cfg.dropout < 1.0:
        problems.append(f"dropout must lie in [0, 1), got {cfg.dropout}")


@dataclass(frozen=True)
class CNetConfig:
    in_channels: int
    time_len: int = 256
    temporal_kernel: int = 64
    temporal_filters: int = 8
    depth_multiplier: int = 2
    separable_kernel: int = 16
    pool1: int = 4
    pool2: int = 8
    dropout: float = 0.25
    feature_dim: int = 64
    num_classes: int = 4

    @property
    def filters(self) -> int:
        return self.temporal_filters * self.depth_multiplier

    @property
    def flat_dim(self) -> int:
        return self.filters * (self.time_len // (self.pool1 * self.pool2))

    def violations(self) -> list[str]:
        problems: list[str] = []
        _check_common(self, problems)
        if self.pool1 >= 1 and self.pool2 >= 1 and self.time_len % (self.pool1 * self.pool2):
            problems.append(f"time_len {self.time_len} not divisible by pools {self.pool1}*{self.pool2}")
        return problems


@dataclass(frozen=True)
class CTNetConfig:
    in_channels: int
    time_len: int = 256
    temporal_kernel: int = 32
    conv_filters: int = 40
    embed_dim: int = 32
    pool: int = 8
    layers: int = 2
    heads: int = 4
    ff_dim: int = 64
    dropout: float = 0.25
    feature_dim: int = 64
    num_classes: int = 4

    @property
    def num_tokens(self) -> int:
        return self.time_len // self.pool

    def violations(self) -> list[str]:
        problems: list[str] = []
        _check_common(self, problems)
        if self.layers < 0:
            problems.append(f"layers must be >= 0, got {self.layers}")
        if self.heads >= 1 and self.embed_dim % self.heads:
            problems.append(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.pool >= 1 and self.time_len // self.pool < 1:
            problems.append(f"time_len {self.time_len} yields no tokens with pool {self.pool}")
        return problems


@dataclass
class ExpertOutput:
    feature: Tensor
    logits: Tensor


class ParamSet:
    """Named parameters and non-learnable buffers of one expert."""

    def __init__(self, prefix: str = "", dtype=np.float64):
        self.prefix = prefix
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Parameter:
        p = Parameter(self.prefix + name, value, dtype=self.dtype)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        out = {self.prefix + k: p.data for k, p in self.params.items()}
        out.update({self.prefix + k: v for k, v in self.buffers.items()})
        return out

    def load_state(self, state) -> None:
        for k, p in self.params.items():
            p.data[...] = state[self.prefix + k]
        for k, v in self.buffers.items():
            v[...] = state[self.prefix + k]


def _uniform(ps: ParamSet, seed: int, name: str, shape, fan_in: int) -> Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    rng = make_rng(seed, "init", ps.prefix + name)
    return ps.add(name, rng.uniform(-bound, bound, size=shape))


def _norm(ps: ParamSet, name: str, n: int, running: bool) -> None:
    ps.add(f"{name}.gamma", np.ones(n))
    ps.add(f"{name}.beta", np.zeros(n))
    if running:
        ps.buffers[f"{name}.running_mean"] = np.zeros(n, dtype=ps.dtype)
        ps.buffers[f"{name}.running_var"] = np.ones(n, dtype=ps.dtype)


def _linear_params(ps: ParamSet, seed: int, name: str, n_in: int, n_out: int) -> None:
    _uniform(ps, seed, f"{name}.w", (n_in, n_out), n_in)
    _uniform(ps, seed, f"{name}.b", (n_out,), n_in)


def init_expert(cfg: CNetConfig | CTNetConfig, seed: int = 0, prefix: str = "", dtype=np.float64) -> ParamSet:
    """Fan-in scaled uniform weights; norms start as the identity affine map.

    Values are drawn in float64 and then cast, so the float32 and float64
    versions of one seed agree up to rounding.
    """
    problems = cfg.violations()
    if problems:
        raise ConfigError(problems)
    ps = ParamSet(prefix, dtype)
    if isinstance(cfg, CNetConfig):
        F1, F2 = cfg.temporal_filters, cfg.filters
        _uniform(ps, seed, "temporal.w", (F1, 1, cfg.temporal_kernel), cfg.temporal_kernel)
        _norm(ps, "bn1", F1, True)
        _uniform(ps, seed, "spatial.w", (F2, 1, cfg.in_channels), cfg.in_channels)
        _norm(ps, "bn2", F2, True)
        _uniform(ps, seed, "sep_depth.w", (F2, 1, cfg.separable_kernel), cfg.separable_kernel)
        _uniform(ps, seed, "sep_point.w", (F2, F2), F2)
        _norm(ps, "bn3", F2, True)
        _linear_params(ps, seed, "feature", cfg.flat_dim, cfg.feature_dim)
        _linear_params(ps, seed, "logits", cfg.feature_dim, cfg.num_classes)
    elif isinstance(cfg, CTNetConfig):
        Ft, D, C = cfg.conv_filters, cfg.embed_dim, cfg.in_channels
        _uniform(ps, seed, "temporal.w", (Ft, 1, cfg.temporal_kernel), cfg.temporal_kernel)
        _uniform(ps, seed, "temporal.b", (Ft,), cfg.temporal_kernel)
        _uniform(ps, seed, "spatial.w", (Ft, Ft, C), Ft * C)
        _uniform(ps, seed, "spatial.b", (Ft,), Ft * C)
        _norm(ps, "bn", Ft, True)
        _uniform(ps, seed, "proj.w", (D, Ft), Ft)
        _uniform(ps, seed, "proj.b", (D,), Ft)
        for i in range(cfg.layers):
            blk = f"blocks.{i}"
            _norm(ps, f"{blk}.ln1", D, False)
            for name in ("q", "k", "v", "o"):
                _linear_params(ps, seed, f"{blk}.{name}", D, D)
            _norm(ps, f"{blk}.ln2", D, False)
            _linear_params(ps, seed, f"{blk}.ff1", D, cfg.ff_dim)
            _linear_params(ps, seed, f"{blk}.ff2", cfg.ff_dim, D)
        _norm(ps, "final_ln", D, False)
        _linear_params(ps, seed, "feature", D, cfg.feature_dim)
        _linear_params(ps, seed, "logits", cfg.feature_dim, cfg.num_classes)
    else:
        raise TypeError(f"unknown expert config {type(cfg).__name__}")
    return ps


def _as_ctx(mode) -> Context:
    return mode if isinstance(mode, Context) else Context(mode)


def _batched(x, cfg, op: str) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = x.ndim == 2
    if single:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1:] != (cfg.in_channels, cfg.time_len):
        raise ShapeError(op, f"expected (B, {cfg.in_channels}, {cfg.time_len}), got {x.shape}")
    return x, single


def _bn(x, ps: ParamSet, name: str, ctx: Context) -> Tensor:
    return ops.batch_norm(x, ps[f"{name}.gamma"], ps[f"{name}.beta"],
                          ps.buffers[f"{name}.running_mean"], ps.buffers[f"{name}.running_var"], ctx)


def _heads(h: Tensor, ps: ParamSet, single: bool) -> ExpertOutput:
    feature = ops.linear(h, ps["feature.w"], ps["feature.b"])
    logits = ops.linear(feature, ps["logits.w"], ps["logits.b"])
    if single:
        feature = ops.reshape(feature, feature.shape[1:])
        logits = ops.reshape(logits, logits.shape[1:])
    return ExpertOutput(feature, logits)


def _temporal_per_channel(x: Tensor, w, b=None) -> Tensor:
    """Same temporal filter bank on every electrode: (B, C, T) -> (B, F, C, T)."""
    B, C, T = x.shape
    y = ops.conv1d(ops.reshape(x, (B * C, 1, T)), w, b)
    return ops.transpose(ops.reshape(y, (B, C, y.shape[1], T)), (0, 2, 1, 3))


def cnet_forward(x, ps: ParamSet, mode, cfg: CNetConfig) -> ExpertOutput:
    """Compact convolutional expert on one region's channels.

    temporal conv -> BN -> depthwise spatial conv -> BN -> ELU -> pool ->
    dropout -> separable conv -> BN -> ELU -> pool -> dropout -> heads.
    """
    ctx = _as_ctx(mode)
    x, single = _batched(x, cfg, "cnet")
    B = x.shape[0]
    h = _temporal_per_channel(x, ps["temporal.w"])
    h = _bn(h, ps, "bn1", ctx)
    h = ops.spatial_conv(h, ps["spatial.w"], groups=cfg.temporal_filters)
    h = ops.elu(_bn(h, ps, "bn2", ctx))
    h = ops.dropout(ops.avg_pool(h, cfg.pool1), cfg.dropout, ctx)
    h = ops.conv1d(h, ps["sep_depth.w"], groups=cfg.filters)
    h = ops.pointwise_conv(h, ps["sep_point.w"])
    h = ops.elu(_bn(h, ps, "bn3", ctx))
    h = ops.dropout(ops.avg_pool(h, cfg.pool2), cfg.dropout, ctx)
    h = ops.reshape(h, (B, cfg.flat_dim))
    return _heads(h, ps, single)


def patch_embed(x, ps: ParamSet, mode, cfg: CTNetConfig) -> Tensor:
    """(B, C, T) -> tokens (B, T // pool, D)."""
    ctx = _as_ctx(mode)
    x, single = _batched(x, cfg, "patch_embed")
    if cfg.num_tokens == 0:
        raise ShapeError("patch_embed", f"time_len {cfg.time_len} too short for pool {cfg.pool}")
    h = _temporal_per_channel(x, ps["temporal.w"], ps["temporal.b"])
    h = ops.spatial_conv(h, ps["spatial.w"], ps["spatial.b"])
    h = ops.elu(_bn(h, ps, "bn", ctx))
    h = ops.avg_pool(h, cfg.pool)
    h = ops.pointwise_conv(h, ps["proj.w"], ps["proj.b"])
    z = ops.transpose(h, (0, 2, 1))
    return ops.reshape(z, z.shape[1:]) if single else z


def _ln(x, ps: ParamSet, name: str) -> Tensor:
    return ops.layer_norm(x, ps[f"{name}.gamma"], ps[f"{name}.beta"])


def transformer_encode(z, ps: ParamSet, mode, cfg: CTNetConfig, return_attention: bool = False):
    """Pre-norm encoder blocks followed by a final layer-norm.

    With ``return_attention`` also returns the (B, H, N, N) attention maps of
    each block.
    """
    ctx = _as_ctx(mode)
    z = z if isinstance(z, Tensor) else Tensor(z)
    single = z.ndim == 2
    if single:
        z = ops.reshape(z, (1,) + z.shape)
    B, N, D = z.shape
    H = cfg.heads
    if D != cfg.embed_dim or D % H:
        raise ShapeError("transformer", f"token dim {D} incompatible with embed_dim={cfg.embed_dim}, heads={H}")
    dh = D // H
    maps = []

    def split(t):
        return ops.transpose(ops.reshape(t, (B, N, H, dh)), (0, 2, 1, 3))

    for i in range(cfg.layers):
        blk = f"blocks.{i}"
        h = _ln(z, ps, f"{blk}.ln1")
        q = split(ops.linear(h, ps[f"{blk}.q.w"], ps[f"{blk}.q.b"]))
        k = split(ops.linear(h, ps[f"{blk}.k.w"], ps[f"{blk}.k.b"]))
        v = split(ops.linear(h, ps[f"{blk}.v.w"], ps[f"{blk}.v.b"]))
        a = ops.attention(q, k, v)
        maps.append(a.extras["attn"])
        a = ops.reshape(ops.transpose(a, (0, 2, 1, 3)), (B, N, D))
        z = ops.add(z, ops.linear(a, ps[f"{blk}.o.w"], ps[f"{blk}.o.b"]))
        h = _ln(z, ps, f"{blk}.ln2")
        h = ops.elu(ops.linear(h, ps[f"{blk}.ff1.w"], ps[f"{blk}.ff1.b"]))
        h = ops.dropout(h, cfg.dropout, ctx)
        z = ops.add(z, ops.linear(h, ps[f"{blk}.ff2.w"], ps[f"{blk}.ff2.b"]))
    z = _ln(z, ps, "final_ln")
    if single:
        z = ops.reshape(z, (N, D))
    return (z, maps) if return_attention else z


def ctnet_forward(x, ps: ParamSet, mode, cfg: CTNetConfig) -> ExpertOutput:
    ctx = _as_ctx(mode)
    x, single = _batched(x, cfg, "ctnet")
    z = transformer_encode(patch_embed(x, ps, ctx, cfg), ps, ctx, cfg)
    return _heads(ops.mean(z, axis=1), ps, single)


class Expert:
    """An expert bound to its config, parameters and input channels.

    ``channels`` selects rows of the full (B, C, T) input; ``None`` means all.
    """

    def __init__(self, cfg: CNetConfig | CTNetConfig, seed: int = 0, prefix: str = "",
                 channels: tuple[int, ...] | None = None, dtype=np.float64):
        self.cfg = cfg
        self.params = init_expert(cfg, seed, prefix, dtype)
        self.channels = channels
        self.kind = "cnet" if isinstance(cfg, CNetConfig) else "ctnet"

    def __call__(self, x, ctx) -> ExpertOutput:
        if self.channels is not None:
            x = ops.index_select(x, self.channels, axis=-2)
        if self.kind == "cnet":
            return cnet_forward(x, self.params, ctx, self.cfg)
        return ctnet_forward(x, self.params, ctx, self.cfg)

    def config_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self.cfg)}
