"""Command-line driver: ``drowzee <command> [flags]``.

Every command that takes model or training settings accepts an optional
``--config FILE`` of ``key = value`` lines (``#`` starts a comment); flags given
on the command line win over the file.  All randomness derives from ``--seed``
through numpy's PCG64 generator.

Exit codes: 0 success, 2 usage/validation, 3 I/O, 4 file format, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import binfmt
from .data import SplitSpec, load_dataset, save_dataset, split_dataset, synth_generate
from .model import ModelConfig, build_model, count_params, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError
from .train import (BandPowerLogistic, NonFiniteGradientError, TrainConfig, cross_validate, evaluate,
                    train, write_summary)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERICAL = 0, 2, 3, 4, 5


class UsageError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


# -- run configuration ----------------------------------------------------------

MODEL_KEYS = tuple(f.name for f in fields(ModelConfig) if f.name != "init_seed")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))        # includes the shared seed
PATH_KEYS = ("data", "out_checkpoint", "checkpoint", "log", "summary")
ALL_KEYS = MODEL_KEYS + TRAIN_KEYS + PATH_KEYS
_DEFAULTS = {**{f.name: f.default for f in fields(ModelConfig)},
             **{f.name: f.default for f in fields(TrainConfig)}}


def _convert(key: str, raw: str):
    if key in PATH_KEYS:
        return raw
    default = _DEFAULTS[key]
    text = raw.strip()
    try:
        if key == "patience":
            return None if text.lower() in ("none", "off", "") else int(text)
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise UsageError(f"invalid value for {key}: {raw!r}") from None


def parse_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in ALL_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    paths: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.train.seed

    @classmethod
    def resolve(cls, file_values: dict, flag_values: dict) -> "RunConfig":
        merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
        unknown = set(merged) - set(ALL_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values = {k: _convert(k, str(v)) for k, v in merged.items()}
        try:
            tcfg = TrainConfig(**{k: values[k] for k in TRAIN_KEYS if k in values})
            mcfg = ModelConfig(**{k: values[k] for k in MODEL_KEYS if k in values},
                               init_seed=tcfg.seed)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from None
        return cls(mcfg, tcfg, {k: values[k] for k in PATH_KEYS if k in values})

    def path(self, key: str, required: bool = True):
        p = self.paths.get(key)
        if p is None and required:
            raise UsageError(f"--{key.replace('_', '-')} is required")
        return p


def _add_run_options(p: argparse.ArgumentParser, paths=()) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    for key in MODEL_KEYS + TRAIN_KEYS:
        names = [f"--{key.replace('_', '-')}"]
        names += {"learning_rate": ["--lr"], "max_epochs": ["--epochs"]}.get(key, [])
        p.add_argument(*names, dest=key, default=None, metavar="V")
    for key in paths:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="PATH")


def _run_config(args) -> RunConfig:
    file_values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {k: getattr(args, k, None) for k in ALL_KEYS}
    return RunConfig.resolve(file_values, flags)


def _out(msg: str = "") -> None:
    print(msg, flush=True)


# -- commands -----------------------------------------------------------------

def cmd_generate_data(args) -> int:
    if args.n < 2 or args.n % 2:
        raise UsageError(f"--n must be a positive even number, got {args.n}")
    if args.snr <= 0:
        raise UsageError("--snr must be positive")
    d = synth_generate(args.n, seed=args.seed, snr=args.snr)
    save_dataset(d, args.out)
    c = d.class_counts()
    _out(f"wrote {len(d)} epochs ({c[0]} awake, {c[1]} drowsy) to {args.out}")
    return EXIT_OK


def _holdout(rc: RunConfig):
    d = load_dataset(rc.path("data"))
    if d.labels is None:
        raise UsageError("dataset has no labels")
    return split_dataset(d, SplitSpec(seed=rc.seed))


def cmd_train(args) -> int:
    rc = _run_config(args)
    ckpt = Path(rc.path("out_checkpoint"))
    log_path = Path(rc.paths.get("log") or ckpt.with_suffix(".log"))
    summary_path = Path(rc.paths.get("summary") or ckpt.with_suffix(".summary.json"))
    tr, va, te = _holdout(rc)
    model = build_model(rc.model)
    _out(f"model parameters: {count_params(model)}; train/val/test = {len(tr)}/{len(va)}/{len(te)}")
    t0 = time.perf_counter()
    result = train(model, tr, va, rc.train, on_epoch=lambda r: _out(r.line()))
    elapsed = time.perf_counter() - t0
    test = evaluate(result.model, te)
    baseline = BandPowerLogistic().fit(tr).evaluate(te)
    save_checkpoint(result.model, ckpt)
    log_path.write_text(result.log_text())
    write_summary(summary_path, best_epoch=result.best_epoch, best_val_acc=result.best_val_acc,
                  epochs_run=len(result.history), test_acc=test.accuracy,
                  test_confusion=test.confusion.tolist(), baseline_test_acc=baseline.accuracy,
                  param_count=count_params(model), seed=rc.seed, model=rc.model.to_dict())
    _out(f"best epoch {result.best_epoch}: val {result.best_val_acc:.2f} %; "
         f"test {test.accuracy:.2f} %; band-power baseline {baseline.accuracy:.2f} %")
    _out(f"trained in {elapsed:.1f} s; checkpoint {ckpt}; log {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    d = load_dataset(args.data)
    if d.labels is None:
        raise UsageError("dataset has no labels")
    if args.split != "all":
        d = dict(zip(("train", "val", "test"), split_dataset(d, SplitSpec(seed=args.seed))))[args.split]
    rep = evaluate(model, d)
    cm = rep.confusion
    _out(f"{args.split} split: {rep.summary_line()}")
    _out(f"confusion (rows true, cols predicted): awake {cm[0].tolist()} drowsy {cm[1].tolist()}")
    if args.summary:
        write_summary(args.summary, split=args.split, seed=args.seed, **rep.to_dict())
    return EXIT_OK


def cmd_cv(args) -> int:
    rc = _run_config(args)
    d = load_dataset(rc.path("data"))
    if d.labels is None:
        raise UsageError("dataset has no labels")
    counts = d.class_counts()
    if args.k < 2 or counts.min() < args.k:
        raise UsageError(f"k={args.k} folds need every class to have at least k samples "
                         f"(class counts {counts.tolist()})")

    def builder(fold: int):
        return build_model(ModelConfig(**{**rc.model.to_dict(), "init_seed": rc.seed + fold}))

    rep = cross_validate(builder, d, args.k, rc.train)
    for i, acc in enumerate(rep.fold_accuracies):
        _out(f"fold {i + 1}: {acc:.2f} %")
    _out(f"{args.k}-fold accuracy: {rep.mean:.2f} ± {rep.ci_half_width:.2f} % (Student-t 95% CI)")
    if rc.paths.get("summary"):
        write_summary(rc.paths["summary"], k=args.k, seed=rc.seed, **rep.to_dict())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import all_cases, run_suite
    rc = _run_config(args)
    result = run_suite(all_cases(rc.model, seed=rc.seed), step=args.step, tolerance=args.tolerance,
                       inject_fault=args.inject_fault)
    for line in result.lines():
        _out(line)
    n_bad = len(result.failed_cases)
    _out(f"{len(result.reports) - n_bad}/{len(result.reports)} cases passed at tolerance {args.tolerance:g}")
    if n_bad:
        _out("failed: " + ", ".join(result.failed_cases))
        return EXIT_NUMERICAL
    return EXIT_OK


def loglog_fit(L, t) -> tuple[float, float]:
    """Slope and R^2 of log t against log L."""
    x, y = np.log(np.asarray(L, float)), np.log(np.asarray(t, float))
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss_tot = ((y - y.mean()) ** 2).sum()
    return float(slope), float(1.0 - (resid ** 2).sum() / ss_tot) if ss_tot > 0 else 1.0


def cmd_bench_scan(args) -> int:
    from .ssm import ssm_apply_conv, ssm_conv_kernel, ssm_recurrence, zoh_discretize
    from .tensor import no_grad
    rng = np.random.default_rng(args.seed)
    Ls = sorted(set(args.L))
    if len(Ls) < 2 or min(Ls) < 1:
        raise UsageError("--L needs at least two positive lengths")
    ch, N = args.channels, args.N
    A = -rng.uniform(0.05, 1.0, size=(ch, N))
    B, C = rng.normal(size=(ch, N)), rng.normal(size=(ch, N))
    delta = rng.uniform(0.01, 1.0, size=(ch, 1))
    rows = []
    with no_grad():
        d = zoh_discretize(A, B, delta)
        for L in Ls:
            x = rng.normal(size=(1, L, ch))
            y_rec = ssm_recurrence(d, C, x).data
            y_conv = ssm_apply_conv(x, ssm_conv_kernel(d, C, L)).data
            err = float(np.max(np.abs(y_rec - y_conv)))
            if not err < 1e-10:
                raise NumericalFailure(f"equivalence precheck failed at L={L}: max |diff| = {err:.3e}")
            t_rec, t_conv = [], []
            for _ in range(args.iters):
                t0 = time.perf_counter()
                ssm_recurrence(d, C, x)
                t_rec.append(time.perf_counter() - t0)
                t0 = time.perf_counter()
                ssm_apply_conv(x, ssm_conv_kernel(d, C, L))
                t_conv.append(time.perf_counter() - t0)
            rows.append((L, err, min(t_rec), min(t_conv)))
    _out(f"{'L':>7} {'max|rec-conv|':>14} {'recurrence_s':>13} {'per_step_us':>12} {'convolution_s':>14}")
    for L, err, tr, tc in rows:
        _out(f"{L:>7} {err:>14.3e} {tr:>13.6f} {1e6 * tr / L:>12.3f} {tc:>14.6f}")
    slope, r2 = loglog_fit([r[0] for r in rows], [r[2] for r in rows])
    verdict = "linear" if r2 > 0.99 and 0.8 <= slope <= 1.2 else "not linear"
    _out(f"equivalence precheck passed for all {len(rows)} lengths")
    _out(f"recurrence log-log fit: slope {slope:.3f}, R^2 {r2:.4f} ({verdict})")
    return EXIT_OK


def cmd_param_count(args) -> int:
    rc = _run_config(args)
    _out(str(count_params(build_model(rc.model))))
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="drowzee", description="EEG drowsiness classifier with 2D selective state spaces.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", help="write a synthetic two-class EEG dataset")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr", type=float, default=5.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train on a 70/15/15 split, write checkpoint, log and summary")
    _add_run_options(p, ("data", "out_checkpoint", "log", "summary"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="test",
                   help="subset of the seeded 70/15/15 split (default test)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--summary")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="stratified k-fold cross-validation")
    _add_run_options(p, ("data", "summary"))
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient rule")
    _add_run_options(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-scan", help="time the recurrent against the convolutional SSM form")
    p.add_argument("--L", type=int, nargs="+", default=[128 << i for i in range(8)])
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_scan)

    p = sub.add_parser("param-count", help="print the parameter count of a model config")
    _add_run_options(p)
    p.set_defaults(func=cmd_param_count)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except binfmt.FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NonFiniteGradientError, NonFiniteError, NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError, KeyError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
