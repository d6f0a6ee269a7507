"""Residual-update rules written against an abstract block function ``F``.

Every step function works on either autodiff :class:`~iiet.tensor.Tensor`
values (network form, step size folded into ``F``) or plain floats/arrays
(the scalar test harness). Coefficients are passed explicitly so the same
code serves learnable parameters and fixed numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, Tensor

KINDS = ("euler", "dlcl", "rk", "pc", "iie")
MAX_ORDER = 4
PC_WINDOW = 3


class ShapeDriftError(RuntimeError):
    """The block function returned a value whose shape differs from its input."""


class DivergenceError(ValueError):
    """Fixed-point iteration is not a contraction for the requested step."""


@dataclass(frozen=True)
class SolverSpec:
    """Which residual-update rule a model uses.

    ``order`` is set only for ``rk``/``pc``; ``iterations`` only for ``iie``.
    The learnable coefficients live with the model parameters; see
    :meth:`init_coefficients` for their shapes and starting values.
    """

    kind: str = "euler"
    order: int | None = None
    iterations: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown solver kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("rk", "pc"):
            if self.order is None or not 1 <= self.order <= MAX_ORDER:
                raise ConfigurationError(f"{self.kind} needs an order in 1..{MAX_ORDER}, got {self.order}")
        elif self.order is not None:
            raise ConfigurationError(f"order is not a field of solver {self.kind!r}")
        if self.kind == "iie":
            if self.iterations is None or self.iterations < 0:
                raise ConfigurationError(f"iie needs a non-negative iteration count, got {self.iterations}")
        elif self.iterations is not None:
            raise ConfigurationError(f"iterations is not a field of solver {self.kind!r}")

    @property
    def max_iterations(self) -> int:
        return self.iterations if self.kind == "iie" else 0

    @property
    def uses_history(self) -> bool:
        return self.kind in ("dlcl", "iie", "pc")

    def evals_per_block(self, r: int = 0) -> int:
        if self.kind == "rk":
            return self.order
        if self.kind == "pc":
            return self.order + 1
        if self.kind == "iie":
            return 1 + r
        return 1

    def init_coefficients(self, position: int, dtype=np.float64) -> dict:
        """Starting coefficients for the sub-block at ``position`` (0-based).

        Every rule starts at or near a plain residual update: merge weight 1 on
        the current block and 0 on history, RK weights ``1/o`` with
        ``beta[i, j] = 1/i`` below the diagonal, EMA 0.5, corrector (1, 0).
        """
        if self.kind in ("dlcl", "iie"):
            alpha = np.zeros(position + 1, dtype=dtype)
            alpha[0] = 1.0
            return {"alpha": alpha}
        if self.kind in ("rk", "pc"):
            o = self.order
            beta = np.zeros((o, o), dtype=dtype)
            for i in range(1, o):
                beta[i, :i] = 1.0 / i
            if self.kind == "rk":
                return {"gamma": np.full(o, 1.0 / o, dtype=dtype), "beta": beta}
            return {
                "beta": beta,
                "ema_gamma": np.array(0.5, dtype=dtype),
                "corrector_alpha": np.array(1.0, dtype=dtype),
                "corrector_beta": np.array(0.0, dtype=dtype),
            }
        return {}

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.order is not None:
            out["order"] = self.order
        if self.iterations is not None:
            out["iterations"] = self.iterations
        return out


class HistoryStack:
    """Outputs of every evaluated sub-block, in evaluation order.

    The top entry belongs to the sub-block currently being evaluated and is
    replaced in place as its iterations refine it.
    """

    def __init__(self):
        self.entries: list = []

    def __len__(self):
        return len(self.entries)

    @property
    def top(self):
        return self.entries[-1]

    def append(self, f):
        self.entries.append(f)

    def update(self, f):
        if not self.entries:
            raise IndexError("update on an empty history stack")
        self.entries[-1] = f

    def window(self, k: int) -> list:
        return self.entries[-k:] if k else []

    def merge(self, base, alpha):
        """``base + alpha[0]*top + sum_j alpha[1+j] * entries[j]`` over earlier entries."""
        if len(alpha) != len(self.entries):
            raise ShapeDriftError(f"{len(alpha)} merge coefficients for a history of {len(self.entries)}")
        return combine(base, alpha, [self.entries[-1], *self.entries[:-1]])


def combine(base, coeffs, entries):
    """``base + sum_j coeffs[j] * entries[j]`` accumulated left to right."""
    if isinstance(base, Tensor):
        if not isinstance(coeffs, Tensor):
            coeffs = Tensor(np.asarray(coeffs, dtype=base.dtype))
        return T.linear_combination(base, coeffs, entries)
    out = base
    for c, e in zip(coeffs, entries):
        out = out + c * e
    return out


def _eval(F, y):
    f = F(y)
    if isinstance(y, (Tensor, np.ndarray)) and np.shape(f) != np.shape(y):
        shape = f.shape if hasattr(f, "shape") else np.shape(f)
        raise ShapeDriftError(f"block function mapped shape {y.shape} to {shape}")
    return f


def _as_coeffs(c):
    return c if isinstance(c, Tensor) else np.asarray(c, dtype=np.float64)


def euler_step(F: Callable, y):
    return y + _eval(F, y)


def _rk_stages(F, y, beta, o):
    stages = [_eval(F, y)]
    for i in range(1, o):
        stages.append(_eval(F, combine(y, beta[i, :i], stages)))
    return stages


def rk_step(F: Callable, y, gamma, beta):
    """Order-``o`` Runge-Kutta update with every stage sharing the same ``F``."""
    gamma, beta = _as_coeffs(gamma), _as_coeffs(beta)
    o = gamma.shape[0]
    if beta.shape != (o, o):
        raise ConfigurationError(f"rk beta must be {o}x{o}, got {beta.shape}")
    return combine(y, gamma, _rk_stages(F, y, beta, o))


def pc_step(F: Callable, y, history: HistoryStack, beta, ema_gamma, corrector_alpha, corrector_beta):
    """EMA-weighted RK predictor followed by a multistep corrector.

    The predictor combines stages with weights ``g * (1-g)**(o-i)``. The
    current block's first stage is pushed onto ``history``; the corrector adds
    ``corrector_beta`` times the sum of the last three history entries (fewer
    for the earliest blocks) to ``corrector_alpha * F(y_pred)``.
    """
    beta = _as_coeffs(beta)
    o = beta.shape[0]
    stages = _rk_stages(F, y, beta, o)
    keep = 1 - ema_gamma
    y_pred = y
    for i, f in enumerate(stages, start=1):
        w = ema_gamma
        for _ in range(o - i):
            w = w * keep
        y_pred = y_pred + w * f
    history.append(stages[0])
    out = y + corrector_alpha * _eval(F, y_pred)
    window = history.window(PC_WINDOW)
    acc = window[0]
    for e in window[1:]:
        acc = acc + e
    return out + corrector_beta * acc


def iie_step(F: Callable, y, history: HistoryStack, alpha, r: int, iterates: list | None = None):
    """Iterative implicit Euler block.

    ``F(y)`` is pushed onto ``history``; each of the ``r`` refinements
    evaluates ``F`` at the current merged estimate and replaces the top
    entry. The result is the merge over the final history. Every merged
    estimate (``r + 1`` of them) is appended to ``iterates`` when given.
    """
    if r < 0:
        raise ConfigurationError(f"iteration count must be non-negative, got {r}")
    alpha = _as_coeffs(alpha)
    history.append(_eval(F, y))
    out = history.merge(y, alpha)
    if iterates is not None:
        iterates.append(out)
    for _ in range(r):
        history.update(_eval(F, out))
        out = history.merge(y, alpha)
        if iterates is not None:
            iterates.append(out)
    return out


def dlcl_step(F: Callable, y, history: HistoryStack, alpha, iterates: list | None = None):
    return iie_step(F, y, history, alpha, 0, iterates)


def solver_step(spec: SolverSpec, F: Callable, y, history: HistoryStack, coeffs: dict, r: int = 0, iterates=None):
    """Dispatch one residual update according to ``spec``."""
    kind = spec.kind
    if kind == "iie":
        return iie_step(F, y, history, coeffs["alpha"], r, iterates)
    if kind == "dlcl":
        return dlcl_step(F, y, history, coeffs["alpha"], iterates)
    if kind == "rk":
        out = rk_step(F, y, coeffs["gamma"], coeffs["beta"])
    elif kind == "pc":
        out = pc_step(F, y, history, coeffs["beta"], coeffs["ema_gamma"], coeffs["corrector_alpha"], coeffs["corrector_beta"])
    else:
        out = euler_step(F, y)
    if iterates is not None:
        iterates.append(out)
    return out


# --------------------------------------------------------------------------- #
# Scalar linear test problem y' = lam * y
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ScalarIVP:
    lam: float
    y0: float
    h: float
    steps: int = 1

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigurationError(f"step size must be positive, got {self.h}")
        if self.steps < 1:
            raise ConfigurationError(f"step count must be positive, got {self.steps}")


def solve_scalar_ivp(ivp: ScalarIVP, method: str = "iie", r: int = 3) -> np.ndarray:
    """Integrate ``y' = lam*y`` and return the trajectory ``y_0 .. y_steps``.

    ``method`` is ``euler``, ``implicit_euler`` (exact solve of the implicit
    step) or ``iie`` (explicit initial estimate plus ``r`` fixed-point
    refinements, run through :func:`iie_step`).
    """
    z = ivp.h * ivp.lam
    if method == "iie" and abs(z) >= 1:
        raise DivergenceError(f"fixed-point iteration needs |h*lam| < 1, got |{ivp.h}*{ivp.lam}| = {abs(z)}")

    def F(y):
        return z * y

    ys = [float(ivp.y0)]
    for _ in range(ivp.steps):
        y = ys[-1]
        if method == "euler":
            y = euler_step(F, y)
        elif method == "implicit_euler":
            y = y / (1.0 - z)
        elif method == "iie":
            y = iie_step(F, y, HistoryStack(), [1.0], r)
        else:
            raise ConfigurationError(f"unknown scalar method {method!r}")
        ys.append(y)
    return np.array(ys)
