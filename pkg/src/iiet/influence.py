"""Block and iteration influence, and iteration schedules derived from them.

Influence between two hidden-state tensors is one minus the mean cosine
similarity of their rows (token positions), pooled over every sampled
sequence and position.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import as_ids
from .model import IterationSchedule, ModelConfig, forward

log = logging.getLogger(__name__)

MODES = ("lower_bound", "e_iiet_threshold", "budget")


@dataclass
class InfluenceReport:
    """Per-layer block influence and per-(sub-block, iteration) influence.

    ``iter_influence`` has ``1 + r_max`` columns; column 0 is the initial
    evaluation, column ``i`` the ``i``-th refinement. Sub-blocks scheduled
    with fewer refinements are padded with NaN.
    """

    block_bi: np.ndarray
    iter_influence: np.ndarray
    sample_count: int
    corpus_digest: str = ""
    config_digest: str = ""
    excluded_rows: int = 0

    @property
    def widths(self) -> list:
        return [int(np.sum(~np.isnan(row))) for row in self.iter_influence]

    def to_json(self) -> str:
        def enc(a):
            return [[None if np.isnan(v) else float(v) for v in row] for row in np.atleast_2d(a)]

        return json.dumps({
            "block_bi": [float(v) for v in self.block_bi],
            "iter_influence": enc(self.iter_influence),
            "sample_count": self.sample_count,
            "corpus_digest": self.corpus_digest,
            "config_digest": self.config_digest,
            "excluded_rows": self.excluded_rows,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "InfluenceReport":
        d = json.loads(text)
        mat = np.array([[np.nan if v is None else v for v in row] for row in d["iter_influence"]], dtype=np.float32)
        return cls(np.array(d["block_bi"], dtype=np.float32), mat, d["sample_count"],
                   d["corpus_digest"], d["config_digest"], d.get("excluded_rows", 0))


class _CosineMean:
    """Pooled running mean of row-wise cosine similarity."""

    def __init__(self):
        self.total = 0.0
        self.count = 0
        self.excluded = 0

    def add(self, a: np.ndarray, b: np.ndarray):
        a = a.reshape(-1, a.shape[-1]).astype(np.float64)
        b = b.reshape(-1, b.shape[-1]).astype(np.float64)
        na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
        ok = (na > 0) & (nb > 0)
        self.excluded += int(np.sum(~ok))
        cos = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
        self.total += float(np.clip(cos, -1.0, 1.0).sum())
        self.count += int(ok.sum())

    def influence(self) -> float:
        return float("nan") if self.count == 0 else 1.0 - self.total / self.count


def influence(a, b) -> float:
    """``1 - E[cos(a_t, b_t)]`` over the rows of two same-shaped arrays."""
    acc = _CosineMean()
    acc.add(np.asarray(a), np.asarray(b))
    return acc.influence()


def sample_windows(corpus, seq_len: int, n_samples: int, seed: int = 0) -> np.ndarray:
    """``n_samples`` token windows drawn reproducibly from ``corpus``."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be at least 1, got {n_samples}")
    ids = as_ids(corpus)
    if len(ids) < seq_len:
        raise ValueError(f"corpus of {len(ids)} bytes is shorter than seq_len {seq_len}")
    starts = np.random.default_rng(seed).integers(0, len(ids) - seq_len + 1, size=n_samples)
    return ids[starts[:, None] + np.arange(seq_len)[None, :]]


def _digest(obj) -> str:
    data = obj if isinstance(obj, bytes) else json.dumps(obj, sort_keys=True).encode()
    return hashlib.sha256(data).hexdigest()[:16]


def analyze(params, config: ModelConfig, samples: np.ndarray, schedule: IterationSchedule | None = None,
            batch: int = 8) -> InfluenceReport:
    """One traced pass over ``samples`` computing block and iteration influence."""
    samples = np.asarray(samples)
    if samples.ndim == 1:
        samples = samples[None, :]
    schedule = schedule or IterationSchedule.full(config)
    schedule.validate(config)
    layer_acc = [_CosineMean() for _ in range(config.n_layers)]
    iter_acc = [[_CosineMean() for _ in range(config.solver.evals_per_block(r) if config.solver.kind == "iie" else 1)]
                for r in schedule.r]
    with T.no_grad(), T.finite_checks(False):
        for i in range(0, len(samples), batch):
            _, tr = forward(params, config, samples[i:i + batch], schedule, trace=True)
            for l, acc in enumerate(layer_acc):
                acc.add(tr.layer_inputs[l].data, tr.layer_outputs[l].data)
            for s, accs in enumerate(iter_acc):
                prev = tr.block_inputs[s].data
                for j, acc in enumerate(accs):
                    cur = tr.iterates[s][j].data
                    acc.add(prev, cur)
                    prev = cur
    width = 1 + max(schedule.r) if config.solver.kind == "iie" else 1
    mat = np.full((len(iter_acc), width), np.nan, dtype=np.float32)
    for s, accs in enumerate(iter_acc):
        for j, acc in enumerate(accs):
            mat[s, j] = acc.influence()
    excluded = sum(a.excluded for a in layer_acc) + sum(a.excluded for accs in iter_acc for a in accs)
    if excluded:
        log.warning("excluded %d zero-norm hidden rows from influence estimates", excluded)
    bi = np.array([a.influence() for a in layer_acc], dtype=np.float32)
    return InfluenceReport(bi, mat, len(samples), _digest(samples.astype(np.int64).tobytes()),
                           _digest(config.to_dict()), excluded)


def block_influence(params, config, corpus, n_samples: int, seq_len: int | None = None, seed: int = 0, schedule=None) -> np.ndarray:
    samples = sample_windows(corpus, seq_len or config.max_seq_len, n_samples, seed)
    return analyze(params, config, samples, schedule).block_bi


def iteration_influence(params, config, corpus, n_samples: int, seq_len: int | None = None, seed: int = 0, schedule=None) -> np.ndarray:
    samples = sample_windows(corpus, seq_len or config.max_seq_len, n_samples, seed)
    return analyze(params, config, samples, schedule).iter_influence


# --------------------------------------------------------------------------- #
# Schedule derivation
# --------------------------------------------------------------------------- #


def _matrix(report) -> np.ndarray:
    return np.asarray(report.iter_influence if isinstance(report, InfluenceReport) else report, dtype=np.float64)


def derive_schedule(report, mode: str = "e_iiet_threshold", budget: int | None = None,
                    per_layer_threshold: bool = False) -> IterationSchedule:
    """Iteration counts per sub-block from an influence matrix.

    ``lower_bound`` keeps no refinements. ``e_iiet_threshold`` sets the
    threshold to the smallest initial-evaluation influence over all sub-blocks
    (or each sub-block's own, with ``per_layer_threshold``) and keeps the
    longest prefix of refinements at or above it. ``budget`` keeps ``budget``
    refinements, repeatedly taking the most influential next refinement of any
    sub-block; ties go to the lower sub-block index.
    """
    mat = _matrix(report)
    if mat.ndim != 2 or mat.shape[1] < 1 or np.isnan(mat[:, 0]).any():
        raise ValueError("influence matrix needs an initial-evaluation column for every sub-block")
    n = mat.shape[0]
    avail = [int(np.sum(~np.isnan(row[1:]))) for row in mat]
    if mode == "lower_bound":
        return IterationSchedule((0,) * n)
    if mode == "e_iiet_threshold":
        thresholds = mat[:, 0] if per_layer_threshold else np.full(n, mat[:, 0].min())
        r = []
        for s in range(n):
            k = 0
            while k < avail[s] and mat[s, 1 + k] >= thresholds[s]:
                k += 1
            r.append(k)
        return IterationSchedule(tuple(r))
    if mode == "budget":
        if budget is None or budget < 0:
            raise ValueError(f"budget mode needs a non-negative budget, got {budget}")
        if budget > sum(avail):
            log.warning("budget %d exceeds the %d available iterations; clamping", budget, sum(avail))
            budget = sum(avail)
        r = [0] * n
        for _ in range(budget):
            best = None
            for s in range(n):
                if r[s] < avail[s] and (best is None or mat[s, 1 + r[s]] > mat[best, 1 + r[best]]):
                    best = s
            r[best] += 1
        return IterationSchedule(tuple(r))
    raise ValueError(f"unknown schedule mode {mode!r}; expected one of {MODES}")


# --------------------------------------------------------------------------- #
# Heatmap CSV
# --------------------------------------------------------------------------- #


def export_heatmap(report, path) -> None:
    """Write ``sub_block,iteration,influence`` rows (9 significant digits)."""
    mat = np.asarray(report.iter_influence if isinstance(report, InfluenceReport) else report)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sub_block", "iteration", "influence"])
        for s, row in enumerate(mat):
            for i, v in enumerate(row):
                if not np.isnan(v):
                    w.writerow([s, i, f"{float(v):.9g}"])


def parse_heatmap(path) -> np.ndarray:
    entries = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            entries[int(row["sub_block"]), int(row["iteration"])] = float(row["influence"])
    if not entries:
        raise ValueError(f"{path}: no influence rows")
    n = 1 + max(s for s, _ in entries)
    w = 1 + max(i for _, i in entries)
    mat = np.full((n, w), np.nan, dtype=np.float32)
    for (s, i), v in entries.items():
        mat[s, i] = v
    return mat
