"""Synthetic region-localised EEG, trial files, normalisation and splits.

Trial file layout (little-endian): b"SSEG", u32 version=1, u32 C, u32 T,
u32 K, u32 trial count; per trial: u32 trial_id, u16 subject length + UTF-8
subject, u32 session_id, u32 label, C*T f32 samples row-major.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .diffcore.rng import make_rng
from .montage import REGIONS, Montage, RegionPartition

MAGIC = b"SSEG"
VERSION = 1
ZSCORE_EPS = 1e-8


class TrialFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class SplitError(ValueError):
    pass


class SynthConfigError(ValueError):
    pass


@dataclass
class Trial:
    x: np.ndarray  # (C, T) float32
    label: int
    subject_id: str
    session_id: int
    trial_id: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trial):
            return NotImplemented
        return (self.label, self.subject_id, self.session_id, self.trial_id) == (
            other.label, other.subject_id, other.session_id, other.trial_id
        ) and self.x.dtype == other.x.dtype and np.array_equal(self.x, other.x)


@dataclass
class TrialSet:
    trials: list[Trial]
    C: int
    T: int
    K: int
    montage: Montage | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.trials)

    def __post_init__(self):
        for t in self.trials:
            if t.x.shape != (self.C, self.T):
                raise ValueError(f"trial {t.trial_id} has shape {t.x.shape}, set is ({self.C}, {self.T})")
            if not 0 <= t.label < self.K:
                raise ValueError(f"trial {t.trial_id} label {t.label} outside [0, {self.K})")

    def X(self) -> np.ndarray:
        if not self.trials:
            return np.zeros((0, self.C, self.T), dtype=np.float32)
        return np.stack([t.x for t in self.trials])

    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=np.int64)

    def subjects(self) -> list[str]:
        return sorted({t.subject_id for t in self.trials})

    def sessions(self, subject: str | None = None) -> list[int]:
        return sorted({t.session_id for t in self.trials if subject is None or t.subject_id == subject})

    def subset(self, trials: list[Trial]) -> "TrialSet":
        return TrialSet(trials, self.C, self.T, self.K, self.montage)

    def for_subject(self, subject: str) -> "TrialSet":
        return self.subset([t for t in self.trials if t.subject_id == subject])


def _all_classes(regions: Sequence[str], K: int) -> dict[int, tuple[str, ...]]:
    return {k: tuple(regions) for k in range(K)}


@dataclass
class SynthConfig:
    C: int = 16
    T: int = 256
    K: int = 4
    sessions: int = 4
    trials_per_session: int = 80
    sample_rate: float = 256.0
    snr_db: float = 20.0
    informative_regions: Mapping[int, Sequence[str]] | None = None  # None: Occipital + LeftTemporal for every class
    carrier_freq_range: tuple[float, float] = (8.0, 30.0)
    seed: int = 0
    subjects: int = 1
    subject_snr_spread_db: float = 0.0  # subjects' SNRs spread evenly over snr_db +/- spread/2

    def class_regions(self) -> dict[int, tuple[str, ...]]:
        if self.informative_regions is None:
            return _all_classes(("Occipital", "LeftTemporal"), self.K)
        return {int(k): tuple(v) for k, v in self.informative_regions.items()}


def pink_noise(rng: np.random.Generator, C: int, T: int) -> np.ndarray:
    """Gaussian noise with a 1/f power spectrum, unit variance per channel."""
    spec = np.fft.rfft(rng.standard_normal((C, T)), axis=-1)
    f = np.arange(spec.shape[-1], dtype=np.float64)
    shaping = np.zeros_like(f)
    shaping[1:] = 1.0 / np.sqrt(f[1:])
    x = np.fft.irfft(spec * shaping, n=T, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def generate_synthetic(cfg: SynthConfig, partition: RegionPartition, montage: Montage | None = None) -> TrialSet:
    """Noise on every channel plus a class-specific sinusoidal burst on the
    channels of that class's informative regions.

    Each class has a fixed carrier frequency; phase and burst onset are
    jittered per trial. The burst amplitude is set so that signal power over
    the trial is ``snr_db`` above the unit noise power (before the per-channel
    gain in [0.5, 1]). Labels are balanced within each session.
    """
    class_regions = cfg.class_regions()
    for k in range(cfg.K):
        regions = class_regions.get(k, ())
        if not regions:
            raise SynthConfigError(f"class {k} has no informative regions")
        unknown = [r for r in regions if r not in REGIONS]
        if unknown:
            raise SynthConfigError(f"class {k}: unknown regions {unknown}")
    if max(partition.union()) >= cfg.C:
        raise SynthConfigError(f"partition references channels beyond C={cfg.C}")
    if not np.isfinite(cfg.snr_db):
        raise SynthConfigError("snr_db must be finite")

    lo, hi = cfg.carrier_freq_range
    freqs = np.linspace(lo, hi, cfg.K) if cfg.K > 1 else np.array([lo])
    t = np.arange(cfg.T) / cfg.sample_rate
    burst_len = cfg.T // 2
    window = np.hanning(burst_len)
    trials: list[Trial] = []
    trial_id = 0
    for s in range(cfg.subjects):
        subject = f"S{s + 1:02d}"
        offset = 0.0 if cfg.subjects == 1 else cfg.subject_snr_spread_db * (s / (cfg.subjects - 1) - 0.5)
        snr = cfg.snr_db + offset
        amp = np.sqrt(2.0 * 10 ** (snr / 10.0) * burst_len / cfg.T / np.mean(window ** 2)) if burst_len else 0.0
        gains = make_rng(cfg.seed, subject, "gain").uniform(0.5, 1.0, size=(cfg.K, cfg.C))
        masks = np.zeros((cfg.K, cfg.C))
        for k in range(cfg.K):
            for r in class_regions[k]:
                masks[k, list(partition[r])] = 1.0
        for session in range(cfg.sessions):
            rng = make_rng(cfg.seed, subject, "session", session)
            labels = rng.permutation(np.resize(np.arange(cfg.K), cfg.trials_per_session))
            for label in labels:
                x = pink_noise(rng, cfg.C, cfg.T)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                onset = int(rng.integers(0, cfg.T - burst_len + 1))
                envelope = np.zeros(cfg.T)
                envelope[onset:onset + burst_len] = window
                wave = amp * envelope * np.sin(2.0 * np.pi * freqs[label] * t + phase)
                x += (gains[label] * masks[label])[:, None] * wave[None, :]
                trials.append(Trial(x.astype(np.float32), int(label), subject, session, trial_id))
                trial_id += 1
    return TrialSet(trials, cfg.C, cfg.T, cfg.K, montage)


def zscore_normalize(trial):
    """Per-channel z-score, (x - mean) / (std + 1e-8); accepts a Trial or a (..., C, T) array."""
    x = getattr(trial, "x", trial)
    x64 = np.asarray(x, dtype=np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    sd = x64.std(axis=-1, keepdims=True)
    z = (x64 - mu) / (sd + ZSCORE_EPS)
    if isinstance(trial, Trial):
        return Trial(z.astype(trial.x.dtype), trial.label, trial.subject_id, trial.session_id, trial.trial_id)
    return z.astype(np.asarray(x).dtype) if np.issubdtype(np.asarray(x).dtype, np.floating) else z


def zscore_set(ts: TrialSet) -> TrialSet:
    return ts.subset([zscore_normalize(t) for t in ts.trials])


def session_split(ts: TrialSet, n_train: int, n_val: int, n_test: int) -> tuple[TrialSet, TrialSet, TrialSet]:
    """Whole sessions per split; validation and test are each subject's last sessions."""
    parts: tuple[list[Trial], list[Trial], list[Trial]] = ([], [], [])
    for subject in ts.subjects():
        sessions = ts.sessions(subject)
        if len(sessions) != n_train + n_val + n_test:
            raise SplitError(f"subject {subject} has {len(sessions)} sessions, split asks for "
                             f"{n_train}+{n_val}+{n_test}")
        owner = {}
        for i, s in enumerate(sessions):
            owner[s] = 0 if i < n_train else (1 if i < n_train + n_val else 2)
        for t in ts.trials:
            if t.subject_id == subject:
                parts[owner[t.session_id]].append(t)
    return tuple(ts.subset(p) for p in parts)  # type: ignore[return-value]


def encode_trials(ts: TrialSet) -> bytes:
    out = [MAGIC, struct.pack("<5I", VERSION, ts.C, ts.T, ts.K, len(ts.trials))]
    for t in ts.trials:
        subject = t.subject_id.encode("utf-8")
        out.append(struct.pack("<IH", t.trial_id, len(subject)))
        out.append(subject)
        out.append(struct.pack("<II", t.session_id, t.label))
        out.append(np.ascontiguousarray(t.x, dtype="<f4").tobytes())
    return b"".join(out)


def decode_trials(buf: bytes, montage: Montage | None = None) -> TrialSet:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TrialFormatError(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != MAGIC:
        raise TrialFormatError(f"bad magic {magic!r}", 0)
    version, C, T, K, n = struct.unpack("<5I", take(20, "header"))
    if version != VERSION:
        raise TrialFormatError(f"unsupported version {version}", 4)
    trials = []
    for _ in range(n):
        trial_id, slen = struct.unpack("<IH", take(6, "trial header"))
        start = pos
        try:
            subject = take(slen, "subject").decode("utf-8")
        except UnicodeDecodeError:
            raise TrialFormatError("subject is not valid UTF-8", start) from None
        session, label = struct.unpack("<II", take(8, "trial header"))
        start = pos
        x = np.frombuffer(take(4 * C * T, "samples"), dtype="<f4").reshape(C, T).astype(np.float32)
        if label >= K:
            raise TrialFormatError(f"label {label} outside [0, {K})", start - 4)
        trials.append(Trial(x, label, subject, session, trial_id))
    if pos != len(buf):
        raise TrialFormatError("trailing bytes after last trial", pos)
    return TrialSet(trials, C, T, K, montage)


def save_trials(ts: TrialSet, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_trials(ts))


def load_trials(path: str | os.PathLike, montage: Montage | None = None) -> TrialSet:
    with open(path, "rb") as fh:
        return decode_trials(fh.read(), montage)
