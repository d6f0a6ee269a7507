"""Command-line entry point: ``iiet <command> ...`` or ``python3 -m iiet <command> ...``.

Every command ends its standard output with one ``key=value`` summary line.
Exit codes: 0 success, 1 failed internal check, 2 usage or configuration
error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import SYNTHETIC_PREFIX, ConfigError, RunConfig, load_run_config
from .data import load_corpus, split_corpus, synthetic_corpus
from .distill import DistillConfig, distill, warm_start
from .influence import analyze, derive_schedule, export_heatmap, parse_heatmap, sample_windows
from .integrators import (DivergenceError, HistoryStack, ScalarIVP, SolverSpec, dlcl_step, euler_step, iie_step,
                          rk_step, solve_scalar_ivp)
from .model import IterationSchedule, ModelConfig, benchmark_decode, count_block_evals, flops_estimate, init_model
from .tensor import ConfigurationError, ShapeError
from .trainer import TrainConfig, TrainingDivergence, evaluate, train, two_stage_train

log = logging.getLogger("iiet")


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


def summary(**items) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        if isinstance(v, (list, tuple)):
            return ",".join(str(x) for x in v)
        return str(v)

    line = " ".join(f"{k}={fmt(v)}" for k, v in items.items())
    print(line)
    return line


def _corpus_bytes(spec: str) -> bytes:
    if spec.startswith(SYNTHETIC_PREFIX):
        return synthetic_corpus(int(spec[len(SYNTHETIC_PREFIX):]))
    if not os.path.isfile(spec):
        raise UsageError(f"corpus file not found: {spec}")
    return load_corpus(spec)


def _dtype(cfg: RunConfig, deterministic: bool):
    return np.float64 if deterministic or cfg.precision == "float64" else np.float32


def _read_schedule(path) -> IterationSchedule:
    try:
        with open(path) as fh:
            return IterationSchedule.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise UsageError(f"cannot read schedule {path}: {e}") from None


def _write_schedule(path, schedule: IterationSchedule):
    with open(path, "w") as fh:
        json.dump(schedule.to_dict(), fh)
        fh.write("\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #


def cmd_corpus(args):
    data = synthetic_corpus(args.bytes, args.seed)
    Path(args.out).write_bytes(data)
    return summary(bytes=len(data), path=args.out)


def _override_solver(cfg: RunConfig, args) -> RunConfig:
    if args.solver is None:
        if args.r is not None or args.order is not None:
            raise UsageError("--r and --order need --solver")
        return cfg
    kw = {}
    if args.solver == "iie":
        kw["iterations"] = 0 if args.r is None else args.r
    elif args.solver in ("rk", "pc"):
        kw["order"] = 2 if args.order is None else args.order
    try:
        spec = SolverSpec(args.solver, **kw)
    except ConfigurationError as e:
        raise ConfigError("model.solver", str(e)) from None
    return replace(cfg, model=cfg.model.with_solver(spec))


def cmd_train(args):
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    cfg = _override_solver(cfg, args)
    corpus = cfg.resolve_corpus(os.path.dirname(os.path.abspath(args.config)))
    if not corpus.startswith(SYNTHETIC_PREFIX) and not os.path.isfile(corpus):
        raise ConfigError("data.corpus", f"file not found: {corpus}")
    out = _out_dir(args.out)
    cfg.save(out / "config.json")
    train_data, val_data = split_corpus(_corpus_bytes(corpus), cfg.data.val_fraction)
    dtype = _dtype(cfg, args.deterministic)
    if args.stage1_steps:
        stage1 = replace(cfg.train, total_steps=args.stage1_steps, schedule="constant_with_warmup")
        stage2 = replace(cfg.train, schedule="cosine")
        result, _ = two_stage_train(cfg.model, stage1, stage2, train_data, val_data, cfg.seed, dtype)
    else:
        result = train(init_model(cfg.model, cfg.seed, dtype), cfg.model, cfg.train, train_data, val_data)
    csv_text = result.log.to_csv(out / "metrics.csv")
    step = result.log.last_step + 1
    ckpt.save_model(out / "model.iiel", result.params, cfg.to_dict(), result.schedule, step, csv_text)
    ckpt.save_model(out / "best.iiel", result.best_params, cfg.to_dict(), result.schedule, step, csv_text)
    final = evaluate(result.params, cfg.model, val_data, cfg.train.seq_len, result.schedule, cfg.train.eval_windows)
    return summary(final_val_loss=final.loss, best_val_loss=result.best_val_loss, steps=step,
                   solver=cfg.model.solver.kind, schedule=list(result.schedule.r))


def cmd_eval(args):
    params, config, schedule, meta = ckpt.load_model(args.ckpt)
    if args.schedule:
        schedule = _read_schedule(args.schedule)
    seq_len = meta["run_config"].get("train", {}).get("seq_len", config.max_seq_len)
    res = evaluate(params, config, _corpus_bytes(args.corpus), seq_len, schedule, args.max_windows)
    return summary(loss=res.loss, ppl=res.ppl, tokens=res.tokens)


def cmd_influence(args):
    params, config, schedule, meta = ckpt.load_model(args.ckpt)
    seq_len = args.seq_len or meta["run_config"].get("train", {}).get("seq_len", config.max_seq_len)
    samples = sample_windows(_corpus_bytes(args.corpus), seq_len, args.samples, args.seed)
    report = analyze(params, config, samples, schedule)
    export_heatmap(report, args.out)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    if not (np.nan_to_num(report.iter_influence, nan=0.0) >= 0).all() or not (np.nan_to_num(report.iter_influence) <= 2).all():
        raise CheckFailed("influence value outside [0, 2]")
    return summary(sub_blocks=len(report.iter_influence), samples=report.sample_count,
                   min_initial=float(np.min(report.iter_influence[:, 0])),
                   mean_block_influence=float(np.mean(report.block_bi)), excluded_rows=report.excluded_rows)


def _parse_mode(mode: str):
    if mode in ("lower-bound", "lower_bound"):
        return "lower_bound", None
    if mode in ("threshold", "e-iiet", "e_iiet_threshold"):
        return "e_iiet_threshold", None
    if mode.startswith("budget="):
        try:
            return "budget", int(mode.split("=", 1)[1])
        except ValueError:
            pass
    raise UsageError(f"unknown schedule mode {mode!r}; expected lower-bound, threshold or budget=K")


def cmd_schedule(args):
    mode, budget = _parse_mode(args.mode)
    try:
        mat = parse_heatmap(args.report)
    except (OSError, KeyError, ValueError) as e:
        raise UsageError(f"cannot read influence report {args.report}: {e}") from None
    schedule = derive_schedule(mat, mode, budget, args.per_layer_threshold)
    _write_schedule(args.out, schedule)
    available = int(np.sum(~np.isnan(mat[:, 1:])))
    return summary(mode=mode, schedule=list(schedule.r), total_iterations=schedule.total_iterations, available=available)


def cmd_distill(args):
    teacher, t_config, t_schedule, t_meta = ckpt.load_model(args.teacher)
    schedule = _read_schedule(args.schedule)
    cfg = load_run_config(args.config)
    if cfg.model != t_config:
        raise ConfigError("model", "teacher checkpoint was trained with a different model config")
    try:
        schedule.validate(t_config)
    except ConfigurationError as e:
        raise UsageError(str(e)) from None
    dc = cfg.distill or DistillConfig().for_pretraining(cfg.train)
    dc = replace(dc, schedule=schedule)
    corpus = cfg.resolve_corpus(os.path.dirname(os.path.abspath(args.config)))
    if not corpus.startswith(SYNTHETIC_PREFIX) and not os.path.isfile(corpus):
        raise ConfigError("data.corpus", f"file not found: {corpus}")
    train_data, val_data = split_corpus(_corpus_bytes(corpus), cfg.data.val_fraction)
    out = _out_dir(args.out)
    resolved = replace(cfg, distill=dc)
    resolved.save(out / "config.json")
    seq_len = dc.train.seq_len
    teacher_loss = evaluate(teacher, t_config, val_data, seq_len, t_schedule, dc.train.eval_windows).loss
    warm = evaluate(warm_start(teacher, t_config), t_config, val_data, seq_len, schedule, dc.train.eval_windows).loss
    result = distill(teacher, t_config, dc, train_data, val_data, teacher_schedule=t_schedule)
    csv_text = result.log.to_csv(out / "metrics.csv")
    ckpt.save_model(out / "student.iiel", result.params, resolved.to_dict(), schedule, result.log.last_step + 1, csv_text)
    final = evaluate(result.params, t_config, val_data, seq_len, schedule, dc.train.eval_windows).loss
    return summary(teacher_val_loss=teacher_loss, warm_start_val_loss=warm, final_val_loss=final,
                   schedule=list(schedule.r), evals_per_token=count_block_evals(t_config, schedule))


def cmd_flops(args):
    if bool(args.ckpt) == bool(args.config):
        raise UsageError("give exactly one of --ckpt and --config")
    if args.ckpt:
        _, config, schedule, _ = ckpt.load_model(args.ckpt)
    else:
        config = load_run_config(args.config).model
        schedule = IterationSchedule.full(config)
    if args.schedule:
        schedule = _read_schedule(args.schedule)
    try:
        schedule.validate(config)
    except ConfigurationError as e:
        raise UsageError(str(e)) from None
    baseline = IterationSchedule.lower_bound(config)
    evals, base = count_block_evals(config, schedule), count_block_evals(config, baseline)
    flops, base_flops = flops_estimate(config, schedule), flops_estimate(config, baseline)
    return summary(evals_per_token=evals, baseline_evals=base, evals_ratio=f"{evals / base:.2f}",
                   correction_iterations=schedule.total_iterations, flops_per_token=f"{flops:.0f}",
                   flops_ratio=f"{flops / base_flops:.2f}")


def cmd_bench(args):
    params, config, schedule, _ = ckpt.load_model(args.ckpt)
    if args.schedule:
        schedule = _read_schedule(args.schedule)
    res = benchmark_decode(params, config, schedule, args.prompt_len, args.gen_len, args.runs)
    return summary(tokens_per_sec=float(res["tokens_per_sec"]), evals_per_token=res["evals_per_token"],
                   prompt_len=args.prompt_len, gen_len=args.gen_len)


def ode_checks() -> list:
    """Scalar-harness suite: ``(name, passed, detail)`` triples."""
    checks = []
    lam, h, y0 = -2.0, 0.25, 1.0
    expected = [0.5, 0.75, 0.625, 0.6875]
    got = [solve_scalar_ivp(ScalarIVP(lam, y0, h, 1), "iie", r)[-1] for r in range(4)]
    checks.append(("iie_oracle", all(abs(g - e) <= 1e-12 for g, e in zip(got, expected)), [float(g) for g in got]))
    fixed = 1.0 / (1.0 - h * lam)
    deep = solve_scalar_ivp(ScalarIVP(lam, y0, h, 1), "iie", 60)[-1]
    errs = [abs(g - fixed) for g in got]
    monotone = all(b < a for a, b in zip(errs, errs[1:]))
    checks.append(("iie_fixed_point", abs(deep - fixed) <= 1e-12 and monotone, deep))
    try:
        solve_scalar_ivp(ScalarIVP(-4.0, y0, h, 1), "iie", 3)
        diverged = False
    except DivergenceError:
        diverged = True
    checks.append(("divergence_guard", diverged, "h*lam=-1"))
    implicit = solve_scalar_ivp(ScalarIVP(lam, y0, h, 1), "implicit_euler")[-1]
    checks.append(("implicit_euler", abs(implicit - fixed) <= 1e-12, implicit))

    def F(y):
        return h * lam * y

    euler = euler_step(F, y0)
    rk1 = rk_step(F, y0, [1.0], np.zeros((1, 1)))
    checks.append(("rk1_is_euler", rk1 == euler, rk1))
    hist_a, hist_b = HistoryStack(), HistoryStack()
    for hs in (hist_a, hist_b):
        hs.append(0.3)
        hs.append(-0.1)
    alpha = np.array([0.7, 0.2, 0.1])
    iie0 = iie_step(F, y0, hist_a, alpha, 0)
    dlcl = dlcl_step(F, y0, hist_b, alpha)
    checks.append(("iie0_is_dlcl", iie0 == dlcl, iie0))
    hist_c = HistoryStack()
    hist_c.append(0.3)
    plain = dlcl_step(F, y0, hist_c, np.array([1.0, 0.0]))
    checks.append(("dlcl_zero_history_is_euler", plain == euler, plain))
    return checks


def cmd_ode_check(args):
    checks = ode_checks()
    width = max(len(n) for n, _, _ in checks)
    for name, ok, detail in checks:
        print(f"{name:<{width}}  {'pass' if ok else 'FAIL'}  {detail}")
    status = {name: ("pass" if ok else "fail") for name, ok, _ in checks}
    summary(**status, all="pass" if all(ok for _, ok, _ in checks) else "fail")
    if not all(ok for _, ok, _ in checks):
        raise CheckFailed("ODE oracle suite failed")


# --------------------------------------------------------------------------- #
# Argument parsing
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iiet", description=__doc__.splitlines()[0])
    p.add_argument("--deterministic", action="store_true", help="64-bit single-threaded mode for oracle runs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("corpus", help="write the synthetic byte corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--bytes", type=int, default=1_000_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_corpus)

    s = sub.add_parser("train", help="train a model from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--solver", choices=["euler", "dlcl", "rk", "pc", "iie"])
    s.add_argument("--r", type=int, help="iterations for --solver iie")
    s.add_argument("--order", type=int, help="order for --solver rk/pc")
    s.add_argument("--stage1-steps", type=int, default=0, help="vanilla pre-training steps before switching solver")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="validation loss of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--schedule")
    s.add_argument("--max-windows", type=int)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("influence", help="block and iteration influence heatmap")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--samples", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report", help="also write the full JSON report")
    s.add_argument("--seq-len", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_influence)

    s = sub.add_parser("schedule", help="derive an iteration schedule from an influence heatmap")
    s.add_argument("--report", required=True)
    s.add_argument("--mode", required=True, help="lower-bound | threshold | budget=K")
    s.add_argument("--out", required=True)
    s.add_argument("--per-layer-threshold", action="store_true")
    s.set_defaults(fn=cmd_schedule)

    s = sub.add_parser("distill", help="distil a teacher into a student schedule")
    s.add_argument("--teacher", required=True)
    s.add_argument("--schedule", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_distill)

    s = sub.add_parser("flops", help="block evaluations and FLOPs per token")
    s.add_argument("--ckpt")
    s.add_argument("--config")
    s.add_argument("--schedule")
    s.set_defaults(fn=cmd_flops)

    s = sub.add_parser("bench", help="greedy decoding throughput")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt-len", type=int, default=16)
    s.add_argument("--gen-len", type=int, default=32)
    s.add_argument("--runs", type=int, default=5)
    s.add_argument("--schedule")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("ode-check", help="scalar ODE oracle suite")
    s.set_defaults(fn=cmd_ode_check)
    return p


def _thread_limit(deterministic: bool):
    raw = os.environ.get("IIE_THREADS")
    limit = 1 if deterministic else (int(raw) if raw else None)
    if limit is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit(args.deterministic):
            args.fn(args)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (UsageError, ConfigurationError, ShapeError, ckpt.CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDivergence as e:
        print(f"diverged: {e}", file=sys.stderr)
        return 3
    except (CheckFailed, AssertionError) as e:
        print(f"check failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
