"""Seeded desk-scale experiments: solver, distillation and two-stage comparisons.

The runners return plain dictionaries of numbers so that tests, the CLI and
the notebooks share one implementation.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, replace

import numpy as np

from .data import split_corpus, synthetic_corpus
from .distill import DistillConfig, distil_pcformer_baseline, distill, warm_start
from .influence import analyze, derive_schedule, sample_windows
from .integrators import SolverSpec
from .model import IterationSchedule, ModelConfig, init_model
from .trainer import TrainConfig, TrainResult, evaluate, train, two_stage_train

log = logging.getLogger(__name__)

MICRO = ModelConfig(vocab_size=256, d_model=64, n_layers=4, n_heads=4, d_ff=176, max_seq_len=128)
MICRO_TRAIN = TrainConfig(max_lr=3e-4, total_steps=2000, batch_size=8 * 128, seq_len=128, eval_every=500)

SOLVERS = {
    "euler": SolverSpec("euler"),
    "iie_r1": SolverSpec("iie", iterations=1),
    "iie_r3": SolverSpec("iie", iterations=3),
    "pc_o2": SolverSpec("pc", order=2),
}


@dataclass
class Corpus:
    train: bytes
    val: bytes


def micro_corpus(n_bytes: int = 1_000_000, seed: int = 0, val_fraction: float = 0.05) -> Corpus:
    return Corpus(*split_corpus(synthetic_corpus(n_bytes, seed), val_fraction))


def pretrain(solver: str | SolverSpec, seed: int, corpus: Corpus, train_config: TrainConfig = MICRO_TRAIN,
             model_config: ModelConfig = MICRO, dtype=np.float32) -> TrainResult:
    """Train one micro model from scratch; ``seed`` sets both init and data order."""
    spec = SOLVERS[solver] if isinstance(solver, str) else solver
    cfg = model_config.with_solver(spec)
    tc = replace(train_config, seed=seed)
    return train(init_model(cfg, seed, dtype), cfg, tc, corpus.train, corpus.val)


def final_val_loss(result: TrainResult, corpus: Corpus, schedule=None, max_windows=None) -> float:
    """Validation loss of the final parameters on the whole validation split."""
    seq_len = 128
    return evaluate(result.params, result.config, corpus.val, seq_len, schedule or result.schedule, max_windows).loss


def solver_comparison(solvers=("euler", "iie_r1", "iie_r3"), seeds=(0, 1, 2), corpus: Corpus | None = None,
                      train_config: TrainConfig = MICRO_TRAIN, keep_models: bool = False) -> dict:
    """Final validation loss for every (solver, seed) pair plus per-solver medians."""
    corpus = corpus or micro_corpus()
    out = {"losses": {}, "median": {}, "seconds": {}, "models": {}}
    for name in solvers:
        losses, secs = [], []
        for seed in seeds:
            t0 = time.perf_counter()
            res = pretrain(name, seed, corpus, train_config)
            losses.append(final_val_loss(res, corpus))
            secs.append(time.perf_counter() - t0)
            log.info("%s seed %d: val loss %.4f (%.0fs)", name, seed, losses[-1], secs[-1])
            if keep_models:
                out["models"][name, seed] = res
        out["losses"][name] = losses
        out["median"][name] = statistics.median(losses)
        out["seconds"][name] = secs
    return out


def distillation_comparison(seeds=(0, 1, 2), corpus: Corpus | None = None, train_config: TrainConfig = MICRO_TRAIN,
                            teachers: dict | None = None, pc_solver: str = "pc_o2",
                            distill_config: DistillConfig | None = None) -> dict:
    """Distillation gaps for IIE(r=3) -> lower-bound student and PC -> Euler student.

    ``teachers`` may supply already-trained ``(solver_name, seed) -> TrainResult``
    entries. A gap is student validation loss minus teacher validation loss.
    """
    corpus = corpus or micro_corpus()
    teachers = dict(teachers or {})
    dc = (distill_config or DistillConfig()).for_pretraining(train_config)
    rows = []
    for seed in seeds:
        dcs = replace(dc, train=replace(dc.train, seed=seed + 1000))
        row = {"seed": seed}
        iie = teachers.get(("iie_r3", seed)) or pretrain("iie_r3", seed, corpus, train_config)
        lb = IterationSchedule.lower_bound(iie.config)
        row["iie_teacher"] = final_val_loss(iie, corpus)
        row["iie_warm_start"] = evaluate(warm_start(iie.params, iie.config), iie.config, corpus.val, 128, lb).loss
        res = distill(iie.params, iie.config, replace(dcs, schedule=lb), corpus.train, corpus.val)
        row["iie_student"] = final_val_loss(res, corpus, lb)
        row["iie_decomposition_error"] = decomposition_error(res.log, dcs)

        pc = teachers.get((pc_solver, seed)) or pretrain(pc_solver, seed, corpus, train_config)
        row["pc_teacher"] = final_val_loss(pc, corpus)
        stu_cfg = pc.config.with_solver(SolverSpec("euler"))
        row["pc_warm_start"] = evaluate(warm_start(pc.params, pc.config, stu_cfg), stu_cfg, corpus.val, 128).loss
        res = distil_pcformer_baseline(pc.params, pc.config, dcs, corpus.train, corpus.val)
        row["pc_student"] = final_val_loss(res, corpus)
        row["pc_decomposition_error"] = decomposition_error(res.log, dcs)

        row["iie_gap"] = row["iie_student"] - row["iie_teacher"]
        row["pc_gap"] = row["pc_student"] - row["pc_teacher"]
        log.info("seed %d: %s", seed, row)
        rows.append(row)
    return {
        "rows": rows,
        "median_iie_gap": statistics.median(r["iie_gap"] for r in rows),
        "median_pc_gap": statistics.median(r["pc_gap"] for r in rows),
    }


def two_stage_comparison(solver: str = "iie_r3", seeds=(0, 1, 2), corpus: Corpus | None = None,
                         train_config: TrainConfig = MICRO_TRAIN, stage1_fraction: float = 0.75) -> dict:
    """Two-stage (Euler then ``solver``) against Euler continued for the same stage-2 budget.

    Both arms repeat the same deterministic stage-1 run, so the only difference is the
    solver used in stage 2.
    """
    corpus = corpus or micro_corpus()
    n1 = int(round(stage1_fraction * train_config.total_steps))
    rows = []
    for seed in seeds:
        s1 = replace(train_config, total_steps=n1, schedule="constant_with_warmup", seed=seed)
        s2 = replace(train_config, total_steps=train_config.total_steps - n1, schedule="cosine", seed=seed + 1)
        row = {"seed": seed}
        for arm, spec in (("two_stage", SOLVERS[solver]), ("vanilla_continued", SOLVERS["euler"])):
            cfg = MICRO.with_solver(spec)
            res, _ = two_stage_train(cfg, s1, s2, corpus.train, corpus.val, seed=seed)
            row[arm] = final_val_loss(res, corpus)
        log.info("seed %d: %s", seed, row)
        rows.append(row)
    return {
        "rows": rows,
        "median_two_stage": statistics.median(r["two_stage"] for r in rows),
        "median_vanilla_continued": statistics.median(r["vanilla_continued"] for r in rows),
    }


def decomposition_error(log_, config: DistillConfig) -> float:
    """Largest ``|total - ce - alpha*mse - beta*kl|`` over logged steps."""
    parts = {split: {r["step"]: r["loss"] for r in log_.select(split)} for split in ("train", "ce", "mse", "kl")}
    worst = 0.0
    for step, total in parts["train"].items():
        recon = parts["ce"][step] + config.alpha * parts["mse"][step] + config.beta * parts["kl"][step]
        worst = max(worst, abs(total - recon))
    return worst


def influence_study(result: TrainResult, corpus: Corpus, n_samples: int = 32, seed: int = 0) -> dict:
    """Influence report of a trained model and the schedules derived from it."""
    samples = sample_windows(corpus.val, 128, n_samples, seed)
    report = analyze(result.params, result.config, samples)
    return {
        "report": report,
        "lower_bound": derive_schedule(report, "lower_bound"),
        "threshold": derive_schedule(report, "e_iiet_threshold"),
        "per_layer_threshold": derive_schedule(report, "e_iiet_threshold", per_layer_threshold=True),
    }
