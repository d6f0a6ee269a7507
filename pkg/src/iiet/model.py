"""Micro decoder-only language model with pluggable residual integrators.

The model follows the LLaMA layout (pre-norm causal attention and SiLU-gated
FFN sub-blocks, rotary positions, RMS normalisation). Each sub-block's
residual connection is replaced by the update rule of ``config.solver``; all
sub-blocks share one :class:`~iiet.integrators.HistoryStack` per forward pass.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .integrators import HistoryStack, SolverSpec, solver_step
from .tensor import ConfigurationError, Tensor

SITES = ("per_sub_block", "per_layer")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 176
    max_seq_len: int = 128
    tie_embeddings: bool = True
    solver: SolverSpec = field(default_factory=SolverSpec)
    solver_site: str = "per_sub_block"
    rms_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        if isinstance(self.solver, dict):
            object.__setattr__(self, "solver", SolverSpec(**self.solver))
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ConfigurationError(f"head dimension {self.head_dim} must be even for rotary embeddings")
        if self.solver_site not in SITES:
            raise ConfigurationError(f"solver_site must be one of {SITES}, got {self.solver_site!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_sub_blocks(self) -> int:
        return 2 * self.n_layers if self.solver_site == "per_sub_block" else self.n_layers

    def with_solver(self, solver: SolverSpec) -> "ModelConfig":
        return replace(self, solver=solver)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "solver"}
        out["solver"] = self.solver.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "solver" in d:
            d["solver"] = SolverSpec(**d["solver"])
        return cls(**d)


@dataclass(frozen=True)
class IterationSchedule:
    """Number of fixed-point refinements ``r_n`` for every sub-block."""

    r: tuple

    def __post_init__(self):
        object.__setattr__(self, "r", tuple(int(x) for x in self.r))
        if any(x < 0 for x in self.r):
            raise ConfigurationError(f"iteration counts must be non-negative: {self.r}")

    def __len__(self):
        return len(self.r)

    @property
    def total_iterations(self) -> int:
        return sum(self.r)

    @classmethod
    def full(cls, config: ModelConfig) -> "IterationSchedule":
        return cls((config.solver.max_iterations,) * config.n_sub_blocks)

    @classmethod
    def lower_bound(cls, config: ModelConfig) -> "IterationSchedule":
        return cls((0,) * config.n_sub_blocks)

    def validate(self, config: ModelConfig) -> None:
        if len(self.r) != config.n_sub_blocks:
            raise ConfigurationError(f"schedule has {len(self.r)} entries, model has {config.n_sub_blocks} sub-blocks")
        r_max = config.solver.max_iterations
        if any(x > r_max for x in self.r):
            raise ConfigurationError(f"schedule {self.r} exceeds the configured maximum of {r_max} iterations")

    def to_dict(self) -> dict:
        return {"schedule": list(self.r)}

    @classmethod
    def from_dict(cls, d) -> "IterationSchedule":
        return cls(tuple(d["schedule"] if isinstance(d, dict) else d))


@dataclass
class ForwardTrace:
    block_inputs: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    layer_inputs: list = field(default_factory=list)
    layer_outputs: list = field(default_factory=list)
    logits: Tensor | None = None


# --------------------------------------------------------------------------- #
# Parameters
# --------------------------------------------------------------------------- #


def _layer_shapes(config: ModelConfig):
    d, f = config.d_model, config.d_ff
    return [
        ("attn_norm", (d,)),
        ("wq", (d, d)),
        ("wk", (d, d)),
        ("wv", (d, d)),
        ("wo", (d, d)),
        ("ffn_norm", (d,)),
        ("w_gate", (d, f)),
        ("w_up", (d, f)),
        ("w_down", (f, d)),
    ]


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float64) -> dict:
    """Normal(0, init_std) weights, unit norm gains, solver coefficients at their defaults."""
    rng = np.random.default_rng(seed)
    std = config.init_std

    def normal(shape):
        return (rng.standard_normal(shape) * std).astype(dtype)

    params = {"embed": normal((config.vocab_size, config.d_model))}
    for i in range(config.n_layers):
        for name, shape in _layer_shapes(config):
            params[f"layers.{i}.{name}"] = np.ones(shape, dtype=dtype) if name.endswith("norm") else normal(shape)
    params["final_norm"] = np.ones(config.d_model, dtype=dtype)
    if not config.tie_embeddings:
        params["lm_head"] = normal((config.d_model, config.vocab_size))
    params.update(init_solver_coefficients(config, dtype))
    return {k: T.parameter(v, dtype=dtype, name=k) for k, v in params.items()}


def init_solver_coefficients(config: ModelConfig, dtype=np.float64) -> dict:
    out = {}
    for s in range(config.n_sub_blocks):
        for name, arr in config.solver.init_coefficients(s, dtype).items():
            out[f"solver.{s}.{name}"] = arr
    return out


def param_shapes(config: ModelConfig) -> dict:
    shapes = {"embed": (config.vocab_size, config.d_model)}
    for i in range(config.n_layers):
        for name, shape in _layer_shapes(config):
            shapes[f"layers.{i}.{name}"] = shape
    shapes["final_norm"] = (config.d_model,)
    if not config.tie_embeddings:
        shapes["lm_head"] = (config.d_model, config.vocab_size)
    for k, v in init_solver_coefficients(config).items():
        shapes[k] = v.shape
    return shapes


def transfer_params(src: dict, config: ModelConfig, dtype=None) -> tuple[dict, list]:
    """Build parameters for ``config`` by copying every compatible tensor of ``src``.

    Solver coefficients missing from ``src`` (or shaped differently, as when
    switching rule families) start at their defaults. Returns the new
    parameters and the names of ``src`` tensors that were not used.
    """
    dtype = dtype or next(iter(src.values())).dtype
    fresh = init_solver_coefficients(config, dtype)
    out, used = {}, set()
    for name, shape in param_shapes(config).items():
        have = src.get(name)
        if have is not None and tuple(have.shape) == tuple(shape):
            out[name] = T.parameter(np.array(have.data, dtype=dtype), dtype=dtype, name=name)
            used.add(name)
        elif is_solver_param(name):
            out[name] = T.parameter(fresh[name], dtype=dtype, name=name)
        elif have is None:
            raise T.ShapeError(f"source parameters lack {name!r}")
        else:
            raise T.ShapeError(f"parameter {name!r}: source shape {tuple(have.shape)} vs target {tuple(shape)}")
    return out, [k for k in src if k not in used]


def param_count(config: ModelConfig, include_solver: bool = True) -> int:
    n = config.vocab_size * config.d_model + config.d_model
    n += config.n_layers * sum(int(np.prod(s)) for _, s in _layer_shapes(config))
    if not config.tie_embeddings:
        n += config.d_model * config.vocab_size
    if include_solver:
        n += sum(v.size for v in init_solver_coefficients(config).values())
    return n


def is_solver_param(name: str) -> bool:
    return name.startswith("solver.")


# --------------------------------------------------------------------------- #
# Forward pass
# --------------------------------------------------------------------------- #


class KVCache:
    """Attention keys/values of already-processed positions.

    ``mode="per_iteration"`` keeps a separate cache for every evaluation slot
    (stage or iteration) of each sub-block, so incremental decoding reproduces
    the full-sequence forward pass exactly. ``mode="final"`` keeps only the
    last evaluation's keys/values of past positions for every slot.
    """

    def __init__(self, mode: str = "per_iteration"):
        if mode not in ("per_iteration", "final"):
            raise ConfigurationError(f"unknown cache mode {mode!r}")
        self.mode = mode
        self.length = 0
        self._store: dict = {}
        self._staged: dict = {}

    def extend(self, sub_block: int, slot: int, k: np.ndarray, v: np.ndarray):
        key = (sub_block, slot if self.mode == "per_iteration" else "final")
        past = self._store.get(key)
        if past is not None:
            k = np.concatenate([past[0], k], axis=2)
            v = np.concatenate([past[1], v], axis=2)
        self._staged[key] = (k, v)
        return k, v

    def commit(self, n_new: int):
        self._store.update(self._staged)
        self._staged = {}
        self.length += n_new


def _split_heads(x: Tensor, B, Tn, H, dh):
    return T.permute(T.reshape(x, (B, Tn, H, dh)), (0, 2, 1, 3))


def _attention_block(params, prefix, config, positions, offset, cache, sub_block):
    wq, wk, wv, wo = (params[prefix + n] for n in ("wq", "wk", "wv", "wo"))
    norm = params[prefix + "attn_norm"]
    H, dh = config.n_heads, config.head_dim
    calls = [0]

    def F(y):
        slot = calls[0]
        calls[0] += 1
        B, Tn, d = y.shape
        h = T.rms_norm(y, norm, config.rms_eps)
        qkv = T.permute(T.reshape(h @ T.concat([wq, wk, wv], axis=1), (B, Tn, 3, H, dh)), (2, 0, 3, 1, 4))
        q = T.rope_apply(qkv[0], positions)
        k = T.rope_apply(qkv[1], positions)
        v = qkv[2]
        if cache is not None:
            kd, vd = cache.extend(sub_block, slot, k.data, v.data)
            k, v = Tensor(kd), Tensor(vd)
        o = T.causal_attention(q, k, v, offset)
        return T.reshape(T.permute(o, (0, 2, 1, 3)), (B, Tn, d)) @ wo

    return F


def _ffn_block(params, prefix, config):
    norm = params[prefix + "ffn_norm"]
    w_gate, w_up, w_down = (params[prefix + n] for n in ("w_gate", "w_up", "w_down"))

    def F(y):
        h = T.rms_norm(y, norm, config.rms_eps)
        return (T.silu(h @ w_gate) * (h @ w_up)) @ w_down

    return F


def _solver_coeffs(params, config, s):
    prefix = f"solver.{s}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def forward(params: dict, config: ModelConfig, tokens, schedule: IterationSchedule | None = None,
            trace: bool = False, cache: KVCache | None = None):
    """Logits ``[B, T, V]`` for ``tokens`` ``[B, T]``; with ``trace`` also a :class:`ForwardTrace`.

    With a ``cache`` the tokens are treated as continuing the cached prefix;
    the cache is extended when the pass completes.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, Tn = tokens.shape
    offset = cache.length if cache is not None else 0
    if offset + Tn > config.max_seq_len:
        raise ConfigurationError(f"sequence of {offset + Tn} exceeds max_seq_len {config.max_seq_len}")
    schedule = schedule or IterationSchedule.full(config)
    schedule.validate(config)
    positions = np.arange(offset, offset + Tn)
    tr = ForwardTrace() if trace else None

    x = T.embedding(params["embed"], tokens)
    history = HistoryStack()
    s = 0

    def step(F, y):
        nonlocal s
        its = [] if tr is not None else None
        if tr is not None:
            tr.block_inputs.append(y)
        out = solver_step(config.solver, F, y, history, _solver_coeffs(params, config, s), schedule.r[s], its)
        if tr is not None:
            tr.iterates.append(its)
        s += 1
        return out

    for i in range(config.n_layers):
        prefix = f"layers.{i}."
        if tr is not None:
            tr.layer_inputs.append(x)
        if config.solver_site == "per_sub_block":
            x = step(_attention_block(params, prefix, config, positions, offset, cache, s), x)
            x = step(_ffn_block(params, prefix, config), x)
        else:
            attn = _attention_block(params, prefix, config, positions, offset, cache, s)
            ffn = _ffn_block(params, prefix, config)

            def layer_F(y, attn=attn, ffn=ffn):
                a = attn(y)
                return a + ffn(y + a)

            x = step(layer_F, x)
        if tr is not None:
            tr.layer_outputs.append(x)

    h = T.rms_norm(x, params["final_norm"], config.rms_eps)
    head = params["lm_head"] if not config.tie_embeddings else T.transpose(params["embed"])
    logits = h @ head
    if cache is not None:
        cache.commit(Tn)
    if tr is not None:
        tr.logits = logits
        return logits, tr
    return logits


def lm_loss(params, config, inputs, targets, schedule=None, trace=False):
    """Mean next-token cross-entropy; returns ``(loss, logits)`` or ``(loss, trace)``."""
    out = forward(params, config, inputs, schedule, trace=trace)
    logits = out[0] if trace else out
    loss = T.softmax_cross_entropy(T.reshape(logits, (-1, config.vocab_size)), np.asarray(targets).reshape(-1))
    return loss, (out[1] if trace else logits)


# --------------------------------------------------------------------------- #
# Cost accounting
# --------------------------------------------------------------------------- #


def count_block_evals(config: ModelConfig, schedule: IterationSchedule | None = None) -> int:
    """Block-function evaluations per token for one forward pass."""
    schedule = schedule or IterationSchedule.full(config)
    schedule.validate(config)
    return sum(config.solver.evals_per_block(r) for r in schedule.r)


def flops_estimate(config: ModelConfig, schedule: IterationSchedule | None = None, context: int | None = None) -> float:
    """Approximate forward FLOPs per token.

    Attention and FFN are costed separately per evaluation (multiply-adds
    count 2); attention scores use the mean causal context. Residual and
    history merges are costed as vector operations.
    """
    schedule = schedule or IterationSchedule.full(config)
    schedule.validate(config)
    d, f = config.d_model, config.d_ff
    ctx = context or config.max_seq_len
    attn = 2 * 4 * d * d + 2 * 2 * d * (ctx + 1) / 2
    ffn = 2 * 3 * d * f + 4 * f
    per_eval = attn + ffn + (2 * d if config.solver_site == "per_layer" else 0)
    solver = config.solver
    total = 0.0
    for s, r in enumerate(schedule.r):
        if config.solver_site == "per_sub_block":
            cost = attn if s % 2 == 0 else ffn
        else:
            cost = per_eval
        evals = solver.evals_per_block(r)
        total += cost * evals
        if solver.kind in ("iie", "dlcl"):
            total += (1 + r) * 2 * d * (s + 1)
        elif solver.kind == "rk":
            total += 2 * d * (solver.order * (solver.order + 1) // 2)
        elif solver.kind == "pc":
            total += 2 * d * (solver.order * (solver.order + 1) // 2 + solver.order + 1 + 3)
        else:
            total += d
    total += 2 * d * config.vocab_size
    return float(total)


# --------------------------------------------------------------------------- #
# Decoding
# --------------------------------------------------------------------------- #


def generate(params, config, prompt, gen_len: int, schedule=None, kv_mode: str = "per_iteration", temperature=0.0, seed=0):
    """Autoregressive generation with a key/value cache; greedy when ``temperature`` is 0."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(1, -1)
    rng = np.random.default_rng(seed)
    cache = KVCache(kv_mode)
    out = []
    with T.no_grad(), T.finite_checks(False):
        logits = forward(params, config, prompt, schedule, cache=cache)
        for _ in range(gen_len):
            last = logits.data[0, -1]
            if temperature > 0:
                p = np.exp((last - last.max()) / temperature)
                nxt = int(rng.choice(len(p), p=p / p.sum()))
            else:
                nxt = int(np.argmax(last))
            out.append(nxt)
            if len(out) == gen_len:
                break
            logits = forward(params, config, np.array([[nxt]]), schedule, cache=cache)
    return np.array(out, dtype=np.int64)


def benchmark_decode(params, config, schedule=None, prompt_len: int = 16, gen_len: int = 32, runs: int = 5, seed: int = 0) -> dict:
    """Median greedy-decoding throughput over ``runs`` repetitions."""
    if prompt_len + gen_len > config.max_seq_len:
        raise ConfigurationError(f"prompt_len + gen_len exceeds max_seq_len {config.max_seq_len}")
    prompt = np.random.default_rng(seed).integers(0, config.vocab_size, size=prompt_len)
    rates, tokens = [], None
    for _ in range(max(runs, 5)):
        t0 = time.perf_counter()
        tokens = generate(params, config, prompt, gen_len, schedule)
        rates.append(gen_len / (time.perf_counter() - t0))
    return {
        "tokens_per_sec": statistics.median(rates),
        "evals_per_token": count_block_evals(config, schedule),
        "tokens": tokens,
    }
