"""Deterministic language-model training: AdamW, warmup schedules, clipping, evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import eval_windows, make_batches
from .integrators import SolverSpec
from .model import IterationSchedule, ModelConfig, init_model, is_solver_param, lm_loss, transfer_params
from .tensor import ConfigurationError

log = logging.getLogger(__name__)

CSV_FIELDS = ("step", "split", "loss", "ppl", "lr", "grad_norm")


class TrainingDivergence(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 3e-4
    total_steps: int = 2000
    warmup_ratio: float = 0.01
    warmup_steps: int | None = None
    schedule: str = "cosine"
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    batch_size: int = 1024  # tokens per step
    seq_len: int = 128
    seed: int = 0
    eval_every: int = 200
    eval_windows: int = 16
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant_with_warmup"):
            raise ConfigurationError(f"unknown lr schedule {self.schedule!r}")
        for name in ("max_lr", "total_steps", "grad_clip", "batch_size", "seq_len", "eval_every", "eval_windows"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.warmup_ratio < 0:
            raise ConfigurationError("weight_decay and warmup_ratio must be non-negative")
        if self.batch_size % self.seq_len:
            raise ConfigurationError(f"batch_size {self.batch_size} tokens is not a multiple of seq_len {self.seq_len}")
        if self.warmup >= self.total_steps:
            raise ConfigurationError(f"warmup {self.warmup} must be shorter than total_steps {self.total_steps}")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(round(self.warmup_ratio * self.total_steps))

    @property
    def windows_per_batch(self) -> int:
        return self.batch_size // self.seq_len

    def to_dict(self):
        return asdict(self)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``max_lr``, then cosine decay to 0 or a flat rate."""
    w, total, peak = config.warmup, config.total_steps, config.max_lr
    if step < w:
        return peak * step / w
    if config.schedule == "constant_with_warmup":
        return peak
    progress = (step - w) / (total - w)
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class AdamW:
    """Adam with decoupled weight decay over a name -> Tensor mapping."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0, no_decay=()):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.reset()

    def reset(self):
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if self.weight_decay and k not in self.no_decay:
                p.data -= (lr * self.weight_decay) * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def decay_exclusions(params: dict) -> set:
    """Norm gains, 1-D tensors and solver coefficients are not weight-decayed."""
    return {k for k, p in params.items() if p.data.ndim < 2 or is_solver_param(k)}


def global_grad_norm(params: dict) -> float:
    return math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params.values() if p.grad is not None))


def clip_grad_norm(params: dict, max_norm: float) -> float:
    """Scale gradients so their global norm is at most ``max_norm``; return the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


@dataclass
class MetricsLog:
    """Append-only rows of ``step, split, loss, ppl, lr, grad_norm``."""

    rows: list = field(default_factory=list)

    def append(self, step, split, loss, lr=None, grad_norm=None, ppl=True):
        loss = float(loss)
        row = {
            "step": int(step),
            "split": split,
            "loss": loss,
            "ppl": math.exp(loss) if ppl else None,
            "lr": None if lr is None else float(lr),
            "grad_norm": None if grad_norm is None else float(grad_norm),
        }
        self.rows.append(row)
        return row

    def extend(self, other: "MetricsLog", step_offset: int = 0):
        for r in other.rows:
            self.rows.append({**r, "step": r["step"] + step_offset})

    def select(self, split) -> list:
        return [r for r in self.rows if r["split"] == split]

    @property
    def last_step(self) -> int:
        return max((r["step"] for r in self.rows), default=-1)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([_fmt(r[k]) for k in CSV_FIELDS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "MetricsLog":
        out = cls()
        for r in csv.DictReader(io.StringIO(text)):
            out.rows.append({
                "step": int(r["step"]),
                "split": r["split"],
                **{k: (float(r[k]) if r[k] != "" else None) for k in ("loss", "ppl", "lr", "grad_norm")},
            })
        return out


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


@dataclass
class EvalResult:
    loss: float
    ppl: float
    tokens: int


def evaluate(params, config: ModelConfig, data, seq_len: int, schedule=None, max_windows=None, batch_windows: int = 8) -> EvalResult:
    """Teacher-forced mean token cross-entropy over consecutive windows of ``data``."""
    inputs, targets = eval_windows(data, seq_len, max_windows)
    total, count = 0.0, 0
    with T.no_grad(), T.finite_checks(False):
        for i in range(0, len(inputs), batch_windows):
            x, y = inputs[i:i + batch_windows], targets[i:i + batch_windows]
            loss, _ = lm_loss(params, config, x, y, schedule)
            total += float(loss.data) * y.size
            count += y.size
    mean_loss = total / count
    return EvalResult(mean_loss, math.exp(mean_loss), count)


def snapshot(params: dict) -> dict:
    return {k: p.data.copy() for k, p in params.items()}


def restore(arrays: dict) -> dict:
    return {k: T.parameter(v, dtype=v.dtype, name=k) for k, v in arrays.items()}


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    best_val_loss: float
    log: MetricsLog
    config: ModelConfig
    schedule: IterationSchedule


def train(params, model_config: ModelConfig, train_config: TrainConfig, train_data, val_data,
          schedule: IterationSchedule | None = None, loss_fn=None, step_offset: int = 0) -> TrainResult:
    """Run ``train_config.total_steps`` AdamW updates and return the final and best parameters.

    ``loss_fn(params, inputs, targets)`` may replace plain next-token
    cross-entropy; it returns the loss tensor and a dict of extra scalar
    components, each logged under its own split name.
    """
    tc = train_config
    schedule = schedule or IterationSchedule.full(model_config)
    schedule.validate(model_config)
    if loss_fn is None:
        def loss_fn(p, x, y):
            return lm_loss(p, model_config, x, y, schedule)[0], {}

    opt = AdamW(params, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay, decay_exclusions(params))
    batches = make_batches(train_data, tc.seq_len, tc.windows_per_batch, tc.seed)
    metrics = MetricsLog()
    best_loss, best = math.inf, snapshot(params)

    def run_eval(step):
        nonlocal best_loss, best
        res = evaluate(params, model_config, val_data, tc.seq_len, schedule, tc.eval_windows)
        metrics.append(step, "val", res.loss)
        if res.loss < best_loss:
            best_loss, best = res.loss, snapshot(params)

    for step in range(tc.total_steps):
        x, y = next(batches)
        for p in params.values():
            p.grad = None
        with T.finite_checks(False):
            loss, extras = loss_fn(params, x, y)
            value = float(loss.data)
            if not math.isfinite(value):
                T.current_graph().clear()
                raise TrainingDivergence(step_offset + step, value)
            T.backward(loss)
        norm = clip_grad_norm(params, tc.grad_clip)
        lr = lr_at(step + 1, tc)
        opt.step(lr)
        metrics.append(step_offset + step, "train", value, lr, min(norm, tc.grad_clip))
        for name, comp in extras.items():
            metrics.append(step_offset + step, name, comp, ppl=False)
        if (step + 1) % tc.eval_every == 0 or step + 1 == tc.total_steps:
            run_eval(step_offset + step)
    return TrainResult(params, restore(best), best_loss, metrics, model_config, schedule)


def two_stage_train(model_config: ModelConfig, stage1: TrainConfig, stage2: TrainConfig, train_data, val_data,
                    seed: int = 0, dtype=np.float32, stage1_solver: str = "euler") -> tuple[TrainResult, TrainResult]:
    """Vanilla (Euler or DLCL) pre-training followed by a switch to ``model_config.solver``.

    Stage 2 inherits every stage-1 parameter; solver coefficients absent from
    stage 1 start at their defaults and optimizer moments are reset. Returns
    the stage-2 result (with the merged log) and the stage-1 result.
    """
    if stage1_solver not in ("euler", "dlcl"):
        raise ConfigurationError(f"stage 1 must use the euler or dlcl solver, got {stage1_solver!r}")
    if stage1.schedule != "constant_with_warmup" or stage2.schedule != "cosine":
        raise ConfigurationError("two-stage training expects constant_with_warmup then cosine schedules")
    cfg1 = model_config.with_solver(SolverSpec(stage1_solver))
    p1 = init_model(cfg1, seed, dtype)
    r1 = train(p1, cfg1, stage1, train_data, val_data)
    p2, dropped = transfer_params(r1.params, model_config)
    for name in dropped:
        log.info("stage 2 drops stage-1 parameter %s", name)
    r2 = train(p2, model_config, stage2, train_data, val_data, step_offset=stage1.total_steps)
    merged = MetricsLog()
    merged.extend(r1.log)
    merged.extend(r2.log)
    return replace(r2, log=merged), r1
