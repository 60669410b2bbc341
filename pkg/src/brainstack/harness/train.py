"""Training loop with warm-up scheduling and early stopping, plus evaluation."""
from __future__ import annotations

import contextlib
import csv
import io
import os
from dataclasses import dataclass, field, replace

import numpy as np

from ..data import TrialSet, zscore_normalize
from ..diffcore import Context, NumericError, Parameter, backward, make_rng, no_grad, ops, sgd_step
from ..objective import (
    ContractError,
    LossBreakdown,
    ScheduleConfig,
    ScheduledWeights,
    cross_entropy,
    distill_loss,
    progress,
    schedule_weights,
    total_loss,
)
from .metrics import Metrics, compute_metrics
from .model import BrainStack, check_variant

HISTORY_COLUMNS = ("epoch", "P", "lambda", "alpha", "beta", "gamma",
                   "L_fused", "L_global", "L_local", "L_distill", "L_total", "val_acc")
EVAL_BATCH = 128


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8  # 32 leaves too few steps per epoch at desk scale
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    variant: str = "full"

    def __post_init__(self):
        check_variant(self.variant)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def effective_schedule(self) -> ScheduleConfig:
        """The schedule after variant semantics: no warm-up without a global expert
        or under ``no_warmup``."""
        if self.variant in ("no_warmup", "local_only"):
            return self.schedule.with_(t_warmup=0)
        return self.schedule


def variant_weights(w: ScheduledWeights, variant: str) -> ScheduledWeights:
    """Zero the weights of loss terms a variant does not have."""
    lam, alpha, beta, gamma = w.as_tuple()
    if variant == "no_distill":
        gamma = 0.0
    elif variant == "local_only":
        alpha = gamma = 0.0
    elif variant == "global_only":
        beta = gamma = 0.0
    return ScheduledWeights(lam, alpha, beta, gamma)


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_acc: float
    state: dict[str, np.ndarray]


def model_inputs(ts: TrialSet, dtype) -> np.ndarray:
    """Per-channel z-scored trials as one (N, C, T) array."""
    return zscore_normalize(ts.X()).astype(dtype, copy=False)


def _check_finite(name: str, value: float, epoch: int, batch: int) -> None:
    if not np.isfinite(value):
        raise NumericError(name, f"non-finite {name} at epoch {epoch}, batch {batch}")


def batch_losses(model: BrainStack, x: np.ndarray, y: np.ndarray, epoch: int, sched: ScheduleConfig,
                 variant: str, ctx: Context) -> tuple[LossBreakdown, ScheduledWeights]:
    """Forward one minibatch and assemble the scheduled objective.

    During warm-up only the global expert runs with a graph (in train mode);
    the rest of the model is evaluated without one, in eval mode, so that its
    parameters and normalisation statistics stay untouched.
    """
    K = model.cfg.K
    warm = epoch < sched.t_warmup and "global" in model.experts
    if warm:
        g = model.experts["global"](x, ctx)
        with no_grad():
            others = model.forward(x, Context("eval"), experts=model.regional_names)
            res = model.route({"global": g, **others})
            outs = res.outputs
            fused = cross_entropy(res.logits, y)
    else:
        outs = model.forward(x, ctx)
        res = model.route(outs)
        fused = cross_entropy(res.logits, y)
    glob = cross_entropy(outs["global"].logits, y) if "global" in outs else 0.0
    regional = [outs[n] for n in model.regional_names]
    with no_grad() if warm else contextlib.nullcontext():
        local = (ops.mean(ops.stack([cross_entropy(o.logits, y) for o in regional]))
                 if regional else 0.0)
        dist = (distill_loss(outs["global"].logits, [o.logits for o in regional], sched.temperature)
                if regional and "global" in outs else 0.0)
    w = variant_weights(schedule_weights(epoch, float(fused.data), sched, K), variant)
    return total_loss(fused, glob, local, dist, w), w


def predict_arrays(model: BrainStack, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eval-mode predictions, routing weights and fused logits for normalised inputs."""
    preds, alphas, logits = [], [], []
    ctx = Context("eval")
    with no_grad():
        for start in range(0, len(X), EVAL_BATCH):
            res = model(X[start:start + EVAL_BATCH], ctx)
            preds.append(np.argmax(res.logits.data, axis=-1))
            alphas.append(np.asarray(res.routing.weights.data, dtype=np.float64))
            logits.append(np.asarray(res.logits.data, dtype=np.float64))
    if not preds:
        E = len(model.names)
        return np.zeros(0, dtype=np.int64), np.zeros((0, E)), np.zeros((0, model.cfg.K))
    return np.concatenate(preds), np.concatenate(alphas), np.concatenate(logits)


def evaluate(model: BrainStack, ts: TrialSet) -> Metrics:
    if len(ts) == 0:
        raise ContractError("evaluation set is empty")
    preds, _, _ = predict_arrays(model, model_inputs(ts, model.cfg.dtype))
    return compute_metrics(ts.labels(), preds, model.cfg.K)


def train(model: BrainStack, train_set: TrialSet, val_set: TrialSet, tc: TrainConfig,
          on_epoch=None) -> TrainResult:
    """Train ``model`` in place and leave it holding the best-validation parameters.

    The monitor is validation accuracy, with ties broken by the fused
    validation loss. Warm-up epochs are not candidates for the best checkpoint:
    the router and regional experts have not been trained yet. A run that
    never leaves warm-up returns its last epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ContractError("train and validation splits must be nonempty")
    if model.cfg.variant != tc.variant:
        raise ContractError(f"model variant {model.cfg.variant!r} != training variant {tc.variant!r}")
    shared = {(t.subject_id, t.session_id) for t in train_set.trials} & \
             {(t.subject_id, t.session_id) for t in val_set.trials}
    if shared:
        raise ContractError(f"sessions shared between train and validation: {sorted(shared)[:3]}")
    sched = tc.effective_schedule()
    X = model_inputs(train_set, model.cfg.dtype)
    y = train_set.labels()
    Xv = model_inputs(val_set, model.cfg.dtype)
    yv = val_set.labels()
    history: list[dict] = []
    best_acc, best_loss, best_epoch, best_state, wait = -1.0, np.inf, -1, model.state_dict(), 0

    for epoch in range(tc.max_epochs):
        order = make_rng(tc.seed, "shuffle", epoch).permutation(len(X))
        sums = dict.fromkeys(("alpha", "beta", "gamma", "L_fused", "L_global", "L_local", "L_distill", "L_total"), 0.0)
        lam = 0.0
        for b, start in enumerate(range(0, len(X), tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            ctx = Context("train", seed=[tc.seed, epoch, b])
            bd, w = batch_losses(model, X[idx], y[idx], epoch, sched, tc.variant, ctx)
            for name, v in (("L_fused", bd.fused), ("L_global", bd.global_), ("L_local", bd.local),
                            ("L_distill", bd.distill), ("L_total", bd.total)):
                _check_finite(name, v, epoch, b)
            n = len(idx)
            lam = w.lam
            for key, v in (("alpha", w.alpha), ("beta", w.beta), ("gamma", w.gamma), ("L_fused", bd.fused),
                           ("L_global", bd.global_), ("L_local", bd.local), ("L_distill", bd.distill),
                           ("L_total", bd.total)):
                sums[key] += n * v
            if bd.graph is not None:
                reached = backward(bd.graph)
                sgd_step([p for p in reached if isinstance(p, Parameter)], tc.lr, tc.momentum, tc.weight_decay)
        preds, _, logits = predict_arrays(model, Xv)
        val_acc = float(np.mean(preds == yv))
        val_loss = float(cross_entropy(logits, yv).data)
        row = {"epoch": epoch, "P": progress(epoch, sched.t_warmup, sched.t_transition), "lambda": lam}
        row.update({k: v / len(X) for k, v in sums.items()})
        row["val_acc"] = val_acc
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        # a run that ends inside warm-up still reports its last epoch
        if epoch < sched.t_warmup and epoch < tc.max_epochs - 1:
            continue
        if val_acc > best_acc or (val_acc == best_acc and val_loss < best_loss):
            best_acc, best_loss, best_epoch, best_state, wait = val_acc, val_loss, epoch, model.state_dict(), 0
        else:
            wait += 1
            if wait >= tc.patience:
                break
    model.load_state_dict(best_state)
    return TrainResult(history, best_epoch, best_acc, best_state)


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def write_history(history: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(history_csv(history))
