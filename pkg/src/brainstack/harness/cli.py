"""Command line: synth, train, eval, gradcheck, ablate, route-report.

Exit codes: 0 success, 1 usage or config error, 2 data/format error,
3 numeric failure (including a failed gradient check).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from ..data import (SplitError, SynthConfigError, TrialFormatError, generate_synthetic, load_trials, save_trials,
                    session_split)
from ..diffcore import CheckpointFormatError, NumericError, StepAbortedError
from ..experts import ConfigError
from ..montage import MontageError, load_montage
from .config import ExperimentConfigError, load_config
from .gradsuite import MODULES, TOLERANCE, run_gradcheck
from .model import VariantError, load_model, save_model
from .report import route_report, route_trials, router_csv, write_route_report
from .runner import ablation_csv, run_ablation, run_once
from .train import evaluate, write_history

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _say(msg: str) -> None:
    print(msg, flush=True)


def cmd_synth(args) -> int:
    exp = load_config(args.config)
    if args.seed is not None:
        exp = exp.with_seed(args.seed)
    montage, partition = load_montage(exp.montage)
    ts = generate_synthetic(exp.synth, partition, montage)
    save_trials(ts, args.out)
    _say(f"wrote {len(ts)} trials ({ts.C} channels x {ts.T} samples, {ts.K} classes) to {args.out}")
    return EXIT_OK


def _epoch_printer(verbose: bool):
    if not verbose:
        return None
    return lambda r: _say(f"epoch {r['epoch']:3d}  lambda={r['lambda']:.3f}  L_total={r['L_total']:.4f}  "
                          f"val_acc={r['val_acc']:.4f}")


def cmd_train(args) -> int:
    exp = load_config(args.config)
    if args.variant:
        exp = exp.with_variant(args.variant)
    montage, _ = load_montage(exp.montage)
    ts = load_trials(args.data, montage)
    res = run_once(exp, trials=ts, on_epoch=_epoch_printer(not args.quiet))
    extra = {"train": _jsonable(dataclasses.asdict(exp.train)), "split": list(exp.split),
             "best_epoch": res.fit.best_epoch, "best_val_acc": res.fit.best_val_acc}
    save_model(res.model, args.out, extra)
    write_history(res.fit.history, args.log)
    _say(f"best epoch {res.fit.best_epoch}: val_acc={res.fit.best_val_acc:.4f}; "
         f"test accuracy={res.test.accuracy:.4f} macro_f1={res.test.macro_f1:.4f}")
    return EXIT_OK


def _jsonable(d):
    return json.loads(json.dumps(d, default=lambda o: list(o) if isinstance(o, tuple) else str(o)))


def _select(ts, meta: dict, which: str):
    if which == "all":
        return ts
    split = meta.get("split")
    if not split:
        raise UsageError("checkpoint records no split; use --split all")
    return session_split(ts, *split)[2]


def cmd_eval(args) -> int:
    model, meta = load_model(args.ckpt)
    ts = _select(load_trials(args.data, model.montage), meta, args.split)
    if ts.C != model.cfg.C or ts.T != model.cfg.T or ts.K != model.cfg.K:
        raise TrialFormatError(f"data is ({ts.C}, {ts.T}, K={ts.K}); model expects "
                               f"({model.cfg.C}, {model.cfg.T}, K={model.cfg.K})", 0)
    m = evaluate(model, ts)
    with open(args.report, "w", encoding="utf-8", newline="") as fh:
        fh.write(router_csv(route_trials(model, ts)))
    _say(f"trials={len(ts)} accuracy={m.accuracy:.4f} macro_f1={m.macro_f1:.4f}")
    _say("per-class F1: " + " ".join(f"{f:.4f}" for f in m.per_class_f1))
    _say("confusion (rows true, columns predicted):")
    for row in m.confusion:
        _say("  " + " ".join(f"{int(c):5d}" for c in row))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    def show(r):
        if args.verbose or not r.passed:
            _say(f"{r.module:9s} {r.name:22s} seed={r.seed:3d} rel_err={r.max_rel_err:.3e} "
                 f"{'ok' if r.passed else 'FAIL'}")

    results = run_gradcheck(args.module, range(args.seeds), on_result=show)
    failed = [r for r in results if not r.passed]
    worst = max(r.max_rel_err for r in results)
    _say(f"{len(results) - len(failed)}/{len(results)} checks passed; worst relative error {worst:.3e} "
         f"(tolerance {TOLERANCE:g}); {sum(r.seconds for r in results):.1f}s")
    return EXIT_OK if not failed else EXIT_NUMERIC


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def cmd_ablate(args) -> int:
    exp = load_config(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = run_ablation(exp, variants, _int_list(args.seeds), workers=args.workers)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(ablation_csv(rows))
    for r in rows:
        _say(f"{r.variant:18s} mean_acc={r.mean_acc:.4f} min={min(r.accuracies):.4f} max={max(r.accuracies):.4f}")
    return EXIT_OK


def cmd_route_report(args) -> int:
    """Pairs ``<subject>.ckpt`` in the checkpoint directory with
    ``<subject>.sseg`` in the data directory; the file stem names the subject."""
    ckpts = sorted(f for f in os.listdir(args.ckpt_dir) if f.endswith(".ckpt"))
    if not ckpts:
        raise UsageError(f"no .ckpt files in {args.ckpt_dir}")
    runs = []
    for name in ckpts:
        stem = name[: -len(".ckpt")]
        data = os.path.join(args.data_dir, stem + ".sseg")
        if not os.path.exists(data):
            raise FileNotFoundError(f"no trial file {data} for checkpoint {name}")
        model, meta = load_model(os.path.join(args.ckpt_dir, name))
        ts = _select(load_trials(data, model.montage), meta, args.split)
        runs.append((stem, model, ts))
    rep = route_report(runs)
    router_path, summary = write_route_report(rep, args.out)
    _say(f"wrote {router_path} and {summary}")
    for name, m, r in zip(rep.experts, rep.overall_mean_alpha(), rep.pearson):
        _say(f"{name:10s} mean_alpha={m:.4f} pearson_r={'nan' if np.isnan(r) else f'{r:+.3f}'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="brainstack", description="Region-expert EEG decoding: data, training and analysis.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic trial file")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on a trial file")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path; a .json description is written beside it")
    s.add_argument("--log", required=True, help="per-epoch history CSV")
    s.add_argument("--variant")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True, help="per-trial routing CSV")
    s.add_argument("--split", choices=("all", "test"), default="all")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--module", choices=("all",) + MODULES, default="all")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="train and compare model variants")
    s.add_argument("--config")
    s.add_argument("--variants", required=True)
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("route-report", help="routing weights versus subject accuracy")
    s.add_argument("--ckpt-dir", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=("all", "test"), default="test")
    s.set_defaults(func=cmd_route_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ExperimentConfigError, ConfigError, VariantError, SynthConfigError, MontageError) as exc:
        print(f"brainstack: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrialFormatError, CheckpointFormatError, SplitError, FileNotFoundError, IsADirectoryError,
            KeyError) as exc:
        print(f"brainstack: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, StepAbortedError, FloatingPointError) as exc:
        print(f"brainstack: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
