"""Influence-aware distillation of a full-schedule teacher into a cheaper student.

The student inherits every teacher parameter and trains on
``CE + alpha * MSE(layer outputs) + beta * KL(tau)``; the teacher runs
without gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .integrators import SolverSpec
from .model import IterationSchedule, ModelConfig, forward, transfer_params
from .tensor import ConfigurationError, ShapeError
from .trainer import TrainConfig, TrainResult, evaluate, train

log = logging.getLogger(__name__)


def _default_train() -> TrainConfig:
    return TrainConfig(max_lr=2e-4, schedule="cosine", total_steps=600)


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 2.0
    schedule: IterationSchedule | None = None
    train: TrainConfig = field(default_factory=_default_train)
    token_fraction: float = 1 / 3

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError(f"alpha and beta must be non-negative, got {self.alpha}, {self.beta}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if not 0 < self.token_fraction <= 1:
            raise ConfigurationError(f"token_fraction must be in (0, 1], got {self.token_fraction}")

    def for_pretraining(self, pretrain: TrainConfig) -> "DistillConfig":
        """Distillation phase reusing ``token_fraction`` of ``pretrain``'s steps with a 2e-4 cosine schedule."""
        steps = max(2, int(round(pretrain.total_steps * self.token_fraction)))
        tc = replace(pretrain, total_steps=steps, max_lr=self.train.max_lr, schedule="cosine",
                     warmup_steps=None, eval_every=min(pretrain.eval_every, steps))
        return replace(self, train=tc)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "tau": self.tau,
            "schedule": None if self.schedule is None else list(self.schedule.r),
            "train": self.train.to_dict(),
            "token_fraction": self.token_fraction,
        }


def warm_start(teacher_params: dict, config: ModelConfig, student_config: ModelConfig | None = None) -> dict:
    """Copy every teacher tensor into a fresh student parameter set.

    With a different ``student_config`` (same shapes, other solver), teacher
    solver coefficients the student cannot use are dropped with a logged notice.
    """
    params, dropped = transfer_params(teacher_params, student_config or config)
    for name in dropped:
        log.info("warm start drops teacher parameter %s", name)
    return params


def distill_losses(teacher_trace, student_trace, targets, config: DistillConfig) -> dict:
    """Loss terms for one batch: ``ce``, ``mse``, ``kl`` and ``total`` tensors.

    ``mse`` averages, over layers, the per-token squared distance between
    teacher and student layer outputs.
    """
    t_out, s_out = teacher_trace.layer_outputs, student_trace.layer_outputs
    if len(t_out) != len(s_out):
        raise ShapeError(f"teacher has {len(t_out)} layer outputs, student {len(s_out)}")
    logits = student_trace.logits
    V = logits.shape[-1]
    ce = T.softmax_cross_entropy(T.reshape(logits, (-1, V)), np.asarray(targets).reshape(-1))
    mse = None
    for ht, hs in zip(t_out, s_out):
        d = hs.shape[-1]
        term = T.mse(T.reshape(hs, (-1, d)), T.Tensor(ht.data.reshape(-1, d)))
        mse = term if mse is None else mse + term
    mse = mse * (1.0 / len(s_out))
    kl = T.kl_with_temperature(T.Tensor(teacher_trace.logits.data.reshape(-1, V)), T.reshape(logits, (-1, V)), config.tau)
    total = ce + mse * float(config.alpha) + kl * float(config.beta)
    return {"ce": ce, "mse": mse, "kl": kl, "total": total}


def distill(teacher_params: dict, teacher_config: ModelConfig, config: DistillConfig, train_data, val_data,
            student_config: ModelConfig | None = None, teacher_schedule: IterationSchedule | None = None,
            student_params: dict | None = None) -> TrainResult:
    """Warm-start a student and train it against the frozen teacher.

    The returned log holds ``train`` rows with the total loss plus ``ce``,
    ``mse`` and ``kl`` rows with the unweighted components.
    """
    student_config = student_config or teacher_config
    schedule = config.schedule or IterationSchedule.full(student_config)
    teacher_schedule = teacher_schedule or IterationSchedule.full(teacher_config)
    if student_params is None:
        student_params = warm_start(teacher_params, teacher_config, student_config)

    def loss_fn(params, x, y):
        with T.no_grad(), T.finite_checks(False):
            _, t_trace = forward(teacher_params, teacher_config, x, teacher_schedule, trace=True)
        _, s_trace = forward(params, student_config, x, schedule, trace=True)
        terms = distill_losses(t_trace, s_trace, y, config)
        return terms["total"], {k: float(terms[k].data) for k in ("ce", "mse", "kl")}

    return train(student_params, student_config, config.train, train_data, val_data, schedule, loss_fn)


def distil_pcformer_baseline(teacher_params: dict, teacher_config: ModelConfig, config: DistillConfig, train_data,
                             val_data, student_solver: str = "euler") -> TrainResult:
    """Distil a predictor-corrector teacher into a single-evaluation Euler or DLCL student."""
    if teacher_config.solver.kind != "pc":
        raise ConfigurationError(f"expected a pc teacher, got {teacher_config.solver.kind!r}")
    if student_solver not in ("euler", "dlcl"):
        raise ConfigurationError(f"student solver must be euler or dlcl, got {student_solver!r}")
    student_config = teacher_config.with_solver(SolverSpec(student_solver))
    cfg = replace(config, schedule=IterationSchedule.lower_bound(student_config))
    return distill(teacher_params, teacher_config, cfg, train_data, val_data, student_config)


def warm_start_loss(teacher_params, teacher_config, student_config, schedule, val_data, seq_len, max_windows=None) -> float:
    """Validation loss of the warm-started student before any distillation step."""
    params = warm_start(teacher_params, teacher_config, student_config)
    return evaluate(params, student_config, val_data, seq_len, schedule, max_windows).loss
