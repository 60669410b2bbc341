"""The stacked model: experts per variant, the router, state and checkpoints."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..diffcore import Context, as_tensor, load_checkpoint, save_checkpoint
from ..experts import CNetConfig, CTNetConfig, ConfigError, Expert, ExpertOutput
from ..montage import REGIONS, Montage, RegionPartition, format_montage, parse_montage
from ..router import Router, RoutingState

VARIANTS = ("full", "local_only", "homogeneous_cnet", "global_only", "homogeneous_ctnet", "no_distill", "no_warmup")
EXPERT_ORDER = ("global", "prefrontal", "frontal", "central", "ltemporal", "rtemporal", "parietal", "occipital")
REGION_KEYS = dict(zip(REGIONS, EXPERT_ORDER[1:]))


class VariantError(ValueError):
    pass


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise VariantError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    return variant


@dataclass(frozen=True)
class ModelConfig:
    C: int
    T: int
    K: int
    variant: str = "full"
    d_route: int = 64
    cnet: dict = field(default_factory=dict)   # overrides of CNetConfig fields
    ctnet: dict = field(default_factory=dict)  # overrides of CTNetConfig fields
    dtype: str = "float32"

    def __post_init__(self):
        check_variant(self.variant)
        if self.dtype not in ("float32", "float64"):
            raise ConfigError([f"dtype must be float32 or float64, got {self.dtype!r}"])

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    @property
    def has_global(self) -> bool:
        return self.variant != "local_only"

    @property
    def has_regional(self) -> bool:
        return self.variant != "global_only"

    def expert_config(self, kind: str, channels: int):
        common = dict(in_channels=channels, time_len=self.T, feature_dim=self.d_route, num_classes=self.K)
        if kind == "cnet":
            cfg = CNetConfig(**{**common, **self.cnet})
        else:
            cfg = CTNetConfig(**{**common, **self.ctnet})
        problems = cfg.violations()
        if problems:
            raise ConfigError(problems)
        return cfg


@dataclass
class ForwardResult:
    outputs: dict[str, ExpertOutput]  # keyed by expert name, in model order
    routing: RoutingState
    f_meta: object
    logits: object


class BrainStack:
    """Global and regional experts feeding one routing gate.

    Expert order is a subset of ``EXPERT_ORDER`` that depends on the variant.
    """

    def __init__(self, cfg: ModelConfig, partition: RegionPartition, seed: int = 0, montage: Montage | None = None):
        self.cfg = cfg
        self.partition = partition
        self.montage = montage
        self.seed = seed
        dtype = np.dtype(cfg.dtype)
        self.experts: dict[str, Expert] = {}
        if cfg.has_global:
            kind = "cnet" if cfg.variant == "homogeneous_cnet" else "ctnet"
            self.experts["global"] = Expert(cfg.expert_config(kind, cfg.C), seed, "global.", None, dtype)
        if cfg.has_regional:
            kind = "ctnet" if cfg.variant == "homogeneous_ctnet" else "cnet"
            for region in REGIONS:
                name = REGION_KEYS[region]
                chans = tuple(partition[region])
                if not chans:
                    raise ConfigError([f"region {region} has no channels"])
                self.experts[name] = Expert(cfg.expert_config(kind, len(chans)), seed, name + ".", chans, dtype)
        self.router = Router(cfg.d_route, cfg.K, seed, dtype=dtype)

    @property
    def names(self) -> list[str]:
        return list(self.experts)

    @property
    def regional_names(self) -> list[str]:
        return [n for n in self.experts if n != "global"]

    def param_groups(self) -> dict[str, list]:
        groups = {name: list(e.params) for name, e in self.experts.items()}
        groups["router"] = list(self.router.params)
        return groups

    def parameters(self) -> list:
        return [p for group in self.param_groups().values() for p in group]

    def forward(self, x, ctx: Context, experts: list[str] | None = None) -> dict[str, ExpertOutput]:
        x = as_tensor(x)
        return {n: self.experts[n](x, ctx) for n in (experts or self.names)}

    def route(self, outputs: dict[str, ExpertOutput]) -> ForwardResult:
        state, f_meta, logits = self.router([outputs[n].feature for n in self.names])
        return ForwardResult(outputs, state, f_meta, logits)

    def __call__(self, x, ctx: Context | str = "eval") -> ForwardResult:
        ctx = ctx if isinstance(ctx, Context) else Context(ctx)
        return self.route(self.forward(x, ctx))

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for e in self.experts.values():
            out.update(e.params.state())
        out.update(self.router.params.state())
        return {k: np.array(v, copy=True) for k, v in out.items()}

    def load_state_dict(self, state) -> None:
        expected = set(self.state_dict())
        missing = sorted(expected - set(state))
        if missing:
            raise KeyError(f"state is missing {missing[:5]}")
        for e in self.experts.values():
            e.params.load_state(state)
        self.router.params.load_state(state)

    def describe(self) -> dict:
        return {
            "model": asdict(self.cfg),
            "seed": self.seed,
            "experts": {n: e.config_dict() for n, e in self.experts.items()},
            "montage": format_montage(self.montage, self.partition) if self.montage is not None else None,
        }


def sidecar_path(ckpt: str | os.PathLike) -> str:
    return os.fspath(ckpt) + ".json"


def save_model(model: BrainStack, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Tensor checkpoint at ``path`` plus a JSON description next to it."""
    save_checkpoint(model.state_dict(), path)
    meta = model.describe()
    if extra:
        meta.update(extra)
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_model(path: str | os.PathLike) -> tuple[BrainStack, dict]:
    with open(sidecar_path(path), encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("montage") is None:
        raise ValueError(f"{sidecar_path(path)} carries no montage")
    montage, partition = parse_montage(meta["montage"])
    model = BrainStack(ModelConfig(**meta["model"]), partition, meta.get("seed", 0), montage)
    model.load_state_dict(load_checkpoint(path))
    return model, meta
