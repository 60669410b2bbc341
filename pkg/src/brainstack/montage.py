"""Electrode montages and the seven-region anatomical partition.

Region-map files are line oriented::

    # comment
    channels: Fp1 Fp2 F3 ...
    region Prefrontal: Fp1 Fp2
    ...

The ``channels`` line fixes channel indices. Channels that no region lists
are legal and reach only the global expert.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

REGIONS: tuple[str, ...] = (
    "Prefrontal", "Frontal", "Central", "LeftTemporal", "RightTemporal", "Parietal", "Occipital",
)


class MontageError(ValueError):
    pass


class OverlapError(MontageError):
    pass


class UnknownChannelError(MontageError):
    pass


class IncompletePartitionError(MontageError):
    pass


@dataclass(frozen=True)
class Montage:
    channel_names: tuple[str, ...]

    def __post_init__(self):
        if not self.channel_names:
            raise MontageError("montage needs at least one channel")
        if len(set(self.channel_names)) != len(self.channel_names):
            dupes = sorted({n for n in self.channel_names if self.channel_names.count(n) > 1})
            raise MontageError(f"duplicate channel names: {dupes}")

    @property
    def C(self) -> int:
        return len(self.channel_names)

    def index(self, name: str) -> int:
        return self.channel_names.index(name)


@dataclass(frozen=True)
class RegionPartition:
    """Region name -> channel indices, in canonical region order."""

    regions: Mapping[str, tuple[int, ...]]

    def __getitem__(self, region: str) -> tuple[int, ...]:
        return self.regions[region]

    def sizes(self) -> list[int]:
        return [len(self.regions[r]) for r in REGIONS]

    def union(self) -> set[int]:
        return {i for idx in self.regions.values() for i in idx}


def validate_partition(partition: RegionPartition | Mapping[str, Sequence[int]], C: int) -> list[str]:
    """Every violated partition invariant against ``C`` channels; empty means valid."""
    regions = partition.regions if isinstance(partition, RegionPartition) else partition
    problems = []
    for r in REGIONS:
        if r not in regions:
            problems.append(f"missing region {r}")
    for r in regions:
        if r not in REGIONS:
            problems.append(f"unknown region {r}")
    owner: dict[int, str] = {}
    for r, idx in regions.items():
        if len(idx) == 0:
            problems.append(f"empty region {r}")
        for i in idx:
            if not 0 <= i < C:
                problems.append(f"index {i} in {r} out of range for C={C}")
            if i in owner:
                problems.append(f"channel {i} in both {owner[i]} and {r}")
            else:
                owner[i] = r
    return problems


def parse_montage(text: str) -> tuple[Montage, RegionPartition]:
    channels: list[str] | None = None
    assigned: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, sep, rest = line.partition(":")
        if not sep:
            raise MontageError(f"line {lineno}: expected 'key: values'")
        names = rest.split()
        head = head.strip()
        if head == "channels":
            if channels is not None:
                raise MontageError(f"line {lineno}: second channels line")
            channels = names
        elif head.startswith("region "):
            region = head[len("region "):].strip()
            if region not in REGIONS:
                raise MontageError(f"line {lineno}: unknown region {region!r}")
            if region in assigned:
                raise MontageError(f"line {lineno}: region {region} listed twice")
            assigned[region] = names
        else:
            raise MontageError(f"line {lineno}: unrecognised key {head!r}")
    if channels is None:
        raise MontageError("no channels line")
    montage = Montage(tuple(channels))

    owner: dict[str, str] = {}
    regions: dict[str, tuple[int, ...]] = {}
    for region in REGIONS:
        if region not in assigned:
            raise IncompletePartitionError(f"region {region} missing")
        idx = []
        for name in assigned[region]:
            if name not in montage.channel_names:
                raise UnknownChannelError(f"channel {name!r} in {region} is not in the montage")
            if name in owner:
                raise OverlapError(f"channel {name!r} assigned to both {owner[name]} and {region}")
            owner[name] = region
            idx.append(montage.index(name))
        if not idx:
            raise IncompletePartitionError(f"region {region} is empty")
        regions[region] = tuple(idx)
    return montage, RegionPartition(regions)


def format_montage(montage: Montage, partition: RegionPartition) -> str:
    lines = ["channels: " + " ".join(montage.channel_names)]
    for r in REGIONS:
        lines.append(f"region {r}: " + " ".join(montage.channel_names[i] for i in partition[r]))
    return "\n".join(lines) + "\n"


def slice_region(trial, partition: RegionPartition, region: str) -> np.ndarray:
    """Rows of ``trial`` (a Trial or a (..., C, T) array) belonging to ``region``."""
    x = getattr(trial, "x", trial)
    x = np.asarray(x)
    if region not in REGIONS:
        raise KeyError(f"unknown region {region!r}")
    idx = np.asarray(partition[region], dtype=np.intp)
    C = x.shape[-2]
    if idx.max() >= C:
        raise IndexError(f"region {region} needs channel {idx.max()}, trial has C={C}")
    return x[..., idx, :]


def prefix_region(name: str) -> str | None:
    """10-10 name-prefix grouping; ``None`` for channels outside all regions."""
    n = name.upper()
    if n in ("T7", "TP7", "FT7"):
        return "LeftTemporal"
    if n in ("T8", "TP8", "FT8"):
        return "RightTemporal"
    if n.startswith("FP"):
        return "Prefrontal"
    if n.startswith("FC"):
        return "Central"
    if n.startswith("AF") or n.startswith("F"):
        return "Frontal"
    if n.startswith("CP"):
        return "Parietal"
    if n.startswith("C"):
        return "Central"
    if n.startswith("PO") or n.startswith("O"):
        return "Occipital"
    if n.startswith("P"):
        return "Parietal"
    return None


def partition_by_prefix(channel_names: Sequence[str]) -> tuple[Montage, RegionPartition]:
    montage = Montage(tuple(channel_names))
    groups: dict[str, list[int]] = {r: [] for r in REGIONS}
    for i, name in enumerate(channel_names):
        region = prefix_region(name)
        if region is not None:
            groups[region].append(i)
    empty = [r for r, idx in groups.items() if not idx]
    if empty:
        raise IncompletePartitionError(f"no channels for {empty}")
    return montage, RegionPartition({r: tuple(groups[r]) for r in REGIONS})


def load_default(name: str = "desk16") -> tuple[Montage, RegionPartition]:
    """Shipped montages: ``desk16`` and ``tenten64``."""
    text = resources.files("brainstack").joinpath("montages").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return parse_montage(text)


def load_montage(spec: str) -> tuple[Montage, RegionPartition]:
    """A shipped montage name or a path to a region-map file."""
    if spec in ("desk16", "tenten64"):
        return load_default(spec)
    with open(spec, encoding="utf-8") as fh:
        return parse_montage(fh.read())
