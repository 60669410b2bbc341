"""Single experiment runs and the ablation table built from them."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..data import TrialSet, generate_synthetic, session_split
from ..montage import Montage, RegionPartition, load_montage
from .config import ExperimentConfig
from .metrics import Metrics
from .model import BrainStack, check_variant
from .train import TrainResult, evaluate, train

ABLATION_COLUMNS = ("variant", "mean_acc", "min_acc", "max_acc", "mean_macro_f1", "seeds", "runs")


@dataclass
class Splits:
    train: TrialSet
    val: TrialSet
    test: TrialSet


@dataclass
class RunResult:
    variant: str
    seed: int
    model: BrainStack
    fit: TrainResult
    test: Metrics
    splits: Splits


def synthesize(exp: ExperimentConfig) -> tuple[TrialSet, Montage, RegionPartition]:
    montage, partition = load_montage(exp.montage)
    return generate_synthetic(exp.synth, partition, montage), montage, partition


def split_trials(exp: ExperimentConfig, ts: TrialSet) -> Splits:
    return Splits(*session_split(ts, *exp.split))


def run_once(exp: ExperimentConfig, variant: str | None = None, seed: int | None = None,
             trials: TrialSet | None = None, on_epoch=None) -> RunResult:
    """Fresh init, train, evaluate on the test split.

    Without ``trials`` the synthetic set is generated from ``exp`` with the
    run seed.
    """
    variant = check_variant(variant or exp.train.variant)
    seed = exp.train.seed if seed is None else seed
    exp = exp.with_seed(seed).with_variant(variant)
    montage, partition = load_montage(exp.montage)
    if trials is None:
        trials = generate_synthetic(exp.synth, partition, montage)
    splits = split_trials(exp, trials)
    model = BrainStack(exp.model_config(trials.C, trials.T, trials.K), partition, seed, montage)
    fit = train(model, splits.train, splits.val, exp.train, on_epoch=on_epoch)
    return RunResult(variant, seed, model, fit, evaluate(model, splits.test), splits)


def _run_summary(args) -> tuple[str, int, float, float]:
    exp, variant, seed = args
    res = run_once(exp, variant, seed)
    return variant, seed, res.test.accuracy, res.test.macro_f1


@dataclass
class AblationRow:
    variant: str
    seeds: list[int]
    accuracies: list[float]
    macro_f1s: list[float]

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.accuracies))


def run_ablation(exp: ExperimentConfig, variants: list[str], seeds: list[int], workers: int = 1) -> list[AblationRow]:
    """Every (variant, seed) pair trains from scratch; runs share no state, so
    ``workers > 1`` spreads them over processes."""
    if not variants or not seeds:
        raise ValueError("ablation needs at least one variant and one seed")
    for v in variants:
        check_variant(v)
    jobs = [(exp, v, s) for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_summary, jobs))
    else:
        results = [_run_summary(j) for j in jobs]
    rows = []
    for v in variants:
        mine = [r for r in results if r[0] == v]
        rows.append(AblationRow(v, [r[1] for r in mine], [r[2] for r in mine], [r[3] for r in mine]))
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r.variant, repr(r.mean_acc), repr(float(min(r.accuracies))), repr(float(max(r.accuracies))),
                    repr(float(np.mean(r.macro_f1s))), ";".join(map(str, r.seeds)),
                    ";".join(repr(float(a)) for a in r.accuracies)])
    return buf.getvalue()
