"""Routing-weight analysis across subjects."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from ..data import TrialSet
from .metrics import UndefinedCorrelationError, compute_metrics, pearson_r
from .model import EXPERT_ORDER, BrainStack
from .train import model_inputs, predict_arrays

ROUTER_COLUMNS = ("trial_id", "subject", "label", "pred") + tuple(f"alpha_{n}" for n in EXPERT_ORDER)


@dataclass
class TrialRouting:
    """Per-trial predictions and routing weights, one column per ``EXPERT_ORDER`` slot.

    Experts a variant does not have get weight 0.
    """
    trial_ids: np.ndarray
    subjects: list[str]
    labels: np.ndarray
    preds: np.ndarray
    alphas: np.ndarray  # (N, 8)


@dataclass
class RouteReport:
    experts: tuple[str, ...]
    subjects: list[str]
    mean_alpha: np.ndarray        # (S, 8): per-subject mean routing weight
    accuracy: np.ndarray          # (S,)
    pearson: np.ndarray           # (8,): NaN where the correlation is undefined
    trials: TrialRouting

    def overall_mean_alpha(self) -> np.ndarray:
        return self.trials.alphas.mean(axis=0)


def route_trials(model: BrainStack, ts: TrialSet) -> TrialRouting:
    preds, alphas, _ = predict_arrays(model, model_inputs(ts, model.cfg.dtype))
    full = np.zeros((len(ts), len(EXPERT_ORDER)))
    for j, name in enumerate(model.names):
        full[:, EXPERT_ORDER.index(name)] = alphas[:, j]
    return TrialRouting(np.array([t.trial_id for t in ts.trials], dtype=np.int64), [t.subject_id for t in ts.trials],
                        ts.labels(), preds, full)


def route_report(runs: list[tuple[str, BrainStack, TrialSet]]) -> RouteReport:
    """``runs`` holds (subject, trained model, that subject's test set).

    A correlation that is undefined (fewer than two subjects, or a weight or
    accuracy column without variance) is reported as NaN.
    """
    if not runs:
        raise ValueError("route_report needs at least one subject")
    subjects, means, accs, parts = [], [], [], []
    for subject, model, ts in runs:
        if len(ts) == 0:
            raise ValueError(f"subject {subject} has no test trials")
        tr = route_trials(model, ts)
        subjects.append(subject)
        means.append(tr.alphas.mean(axis=0))
        accs.append(compute_metrics(tr.labels, tr.preds, model.cfg.K).accuracy)
        parts.append(tr)
    mean_alpha, accuracy = np.array(means), np.array(accs)
    pearson = np.full(len(EXPERT_ORDER), np.nan)
    for j in range(len(EXPERT_ORDER)):
        try:
            pearson[j] = pearson_r(mean_alpha[:, j], accuracy)
        except UndefinedCorrelationError:
            pass
    trials = TrialRouting(
        np.concatenate([p.trial_ids for p in parts]),
        [s for p in parts for s in p.subjects],
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.preds for p in parts]),
        np.concatenate([p.alphas for p in parts]),
    )
    return RouteReport(EXPERT_ORDER, subjects, mean_alpha, accuracy, pearson, trials)


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else repr(float(x))


def router_csv(tr: TrialRouting) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUTER_COLUMNS)
    for i in range(len(tr.labels)):
        w.writerow([int(tr.trial_ids[i]), tr.subjects[i], int(tr.labels[i]), int(tr.preds[i])]
                   + [_fmt(a) for a in tr.alphas[i]])
    return buf.getvalue()


def summary_csv(rep: RouteReport) -> str:
    """One row per subject (accuracy and mean weights), then the pooled mean
    weights and the per-expert Pearson r against subject accuracy."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("row", "accuracy") + tuple(f"alpha_{n}" for n in rep.experts))
    for s, acc, means in zip(rep.subjects, rep.accuracy, rep.mean_alpha):
        w.writerow([s, _fmt(acc)] + [_fmt(m) for m in means])
    w.writerow(["mean", _fmt(float(rep.accuracy.mean()))] + [_fmt(m) for m in rep.overall_mean_alpha()])
    w.writerow(["pearson_r", ""] + [_fmt(r) for r in rep.pearson])
    return buf.getvalue()


def summary_path(out: str | os.PathLike) -> str:
    root, ext = os.path.splitext(os.fspath(out))
    return f"{root}_summary{ext or '.csv'}"


def write_route_report(rep: RouteReport, out: str | os.PathLike) -> tuple[str, str]:
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(router_csv(rep.trials))
    path = summary_path(out)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(summary_csv(rep))
    return os.fspath(out), path
