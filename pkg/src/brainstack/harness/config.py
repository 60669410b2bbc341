"""Experiment config files.

A flat ``key = value`` file; ``[section]`` headers are optional. Keys before
any header may be bare (``lr = 0.01``) when the name is unambiguous, or
qualified (``train.lr = 0.01``). A bare ``seed`` sets both the data and the
training seed. Expert fields go under ``[cnet]`` / ``[ctnet]``.

Sections: data, model, cnet, ctnet, train, schedule.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace

from ..data import SynthConfig
from ..experts import CNetConfig, CTNetConfig
from ..objective import ScheduleConfig
from .model import ModelConfig, check_variant
from .train import TrainConfig

ROOT = "__root__"


class ExperimentConfigError(ValueError):
    pass


_DATA_KEYS = {"C", "T", "K", "sessions", "trials_per_session", "sample_rate", "snr_db", "seed", "subjects",
              "subject_snr_spread_db", "carrier_freq_range", "informative_regions", "montage", "split"}
_MODEL_KEYS = {"d_route", "dtype"}
_TRAIN_KEYS = {"lr", "momentum", "weight_decay", "batch_size", "max_epochs", "patience", "seed", "variant"}
_SCHEDULE_KEYS = {f.name for f in fields(ScheduleConfig)}
_EXPERT_KEYS = {
    "cnet": {f.name for f in fields(CNetConfig)} - {"in_channels", "time_len", "feature_dim", "num_classes"},
    "ctnet": {f.name for f in fields(CTNetConfig)} - {"in_channels", "time_len", "feature_dim", "num_classes"},
}
SECTIONS = {"data": _DATA_KEYS, "model": _MODEL_KEYS, "train": _TRAIN_KEYS, "schedule": _SCHEDULE_KEYS, **_EXPERT_KEYS}


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    montage: str = "desk16"
    split: tuple[int, int, int] = (2, 1, 1)
    d_route: int = 64
    dtype: str = "float32"
    cnet: dict = field(default_factory=dict)
    ctnet: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)

    def model_config(self, C: int, T: int, K: int, variant: str | None = None) -> ModelConfig:
        return ModelConfig(C, T, K, variant or self.train.variant, self.d_route, dict(self.cnet),
                           dict(self.ctnet), self.dtype)

    def with_variant(self, variant: str) -> "ExperimentConfig":
        return replace(self, train=self.train.with_(variant=check_variant(variant)))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, synth=replace(self.synth, seed=seed), train=self.train.with_(seed=seed))


def _int(v: str) -> int:
    return int(v.strip())


def _float(v: str) -> float:
    return float(v.strip())


def _convert(section: str, key: str, raw: str):
    raw = raw.strip()
    if section == "data":
        if key in ("montage",):
            return raw
        if key == "split":
            parts = tuple(_int(p) for p in raw.split(","))
            if len(parts) != 3:
                raise ValueError("split needs three counts: train,val,test")
            return parts
        if key == "carrier_freq_range":
            lo, hi = (_float(p) for p in raw.split(","))
            return (lo, hi)
        if key == "informative_regions":
            return tuple(r.strip() for r in raw.split(",") if r.strip())
        if key in ("sample_rate", "snr_db", "subject_snr_spread_db"):
            return _float(raw)
        return _int(raw)
    if section == "model":
        return raw if key == "dtype" else _int(raw)
    if section == "train":
        if key == "variant":
            return raw
        if key in ("lr", "momentum", "weight_decay"):
            return _float(raw)
        return _int(raw)
    if section == "schedule":
        if key in ("t_warmup", "t_transition"):
            return _int(raw)
        if key == "max_loss_estimate" and raw.lower() in ("", "none", "auto"):
            return None
        return _float(raw)
    # expert sections
    return _float(raw) if key == "dropout" else _int(raw)


def _locate(key: str) -> list[tuple[str, str]]:
    """Resolve a key from the root section to (section, key) targets."""
    if key.startswith("informative_regions"):
        return [("data", key)]
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ExperimentConfigError(f"unknown section {section!r} in key {key!r}")
        return [(section, name)]
    if key == "seed":
        return [("data", "seed"), ("train", "seed")]
    owners = [s for s, keys in SECTIONS.items() if key in keys]
    if not owners:
        raise ExperimentConfigError(f"unknown config key {key!r}")
    if len(owners) > 1:
        raise ExperimentConfigError(f"key {key!r} is ambiguous; qualify it as one of "
                                    + ", ".join(f"{o}.{key}" for o in owners))
    return [(owners[0], key)]


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str  # keys are case-sensitive (C, T, K)
    try:
        parser.read_string(f"[{ROOT}]\n" + text)
    except configparser.Error as exc:
        raise ExperimentConfigError(str(exc)) from None
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if section == ROOT:
                targets = _locate(key)
            elif section in SECTIONS:
                targets = [(section, key)]
            else:
                raise ExperimentConfigError(f"unknown section [{section}]")
            for sec, name in targets:
                base = name.split(".", 1)[0]
                if base not in SECTIONS[sec]:
                    raise ExperimentConfigError(f"unknown key {name!r} in [{sec}]")
                try:
                    values[sec][name] = _convert(sec, base, raw)
                except ValueError as exc:
                    raise ExperimentConfigError(f"bad value for {sec}.{name}: {raw!r} ({exc})") from None
    return build_config(values)


def build_config(values: dict[str, dict]) -> ExperimentConfig:
    data = dict(values.get("data", {}))
    montage = data.pop("montage", "desk16")
    split = data.pop("split", (2, 1, 1))
    regions = {}
    for key in [k for k in data if k.startswith("informative_regions")]:
        v = data.pop(key)
        if key == "informative_regions":
            regions.setdefault("*", v)
        else:
            try:
                regions[int(key.split(".", 1)[1])] = v
            except ValueError:
                raise ExperimentConfigError(f"bad per-class key {key!r}; use informative_regions.<class>") from None
    try:
        synth = SynthConfig(**data)
        if regions:
            default = regions.pop("*", ("Occipital", "LeftTemporal"))
            per_class = {k: tuple(default) for k in range(synth.K)}
            per_class.update(regions)
            synth = replace(synth, informative_regions=per_class)
        model = values.get("model", {})
        schedule = ScheduleConfig(**values.get("schedule", {}))
        train = TrainConfig(**{**values.get("train", {}), "schedule": schedule})
        return ExperimentConfig(synth, montage, tuple(split), model.get("d_route", 64), model.get("dtype", "float32"),
                                dict(values.get("cnet", {})), dict(values.get("ctnet", {})), train)
    except (TypeError, ValueError) as exc:
        raise ExperimentConfigError(str(exc)) from None


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
