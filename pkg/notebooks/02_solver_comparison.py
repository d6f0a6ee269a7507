"""
Euler against iterative implicit Euler on the micro model
=========================================================

Train the micro byte-level model with three residual solvers and compare
final validation loss per seed. IIE r=3 evaluates each sub-block four times,
so its forward cost is about four times the Euler baseline.
"""

# %%
from _common import SEEDS, TRAIN

from iiet.experiments import MICRO, SOLVERS, micro_corpus, solver_comparison
from iiet.model import flops_estimate

corpus = micro_corpus()
print(f"train {len(corpus.train)} bytes, val {len(corpus.val)} bytes, {TRAIN.total_steps} steps, seeds {SEEDS}")

# %% Forward cost per token relative to Euler.
base = flops_estimate(MICRO.with_solver(SOLVERS["euler"]))
for name, spec in SOLVERS.items():
    print(f"{name:7s} {flops_estimate(MICRO.with_solver(spec)) / base:.2f}x")

# %% Train every solver on every seed.
out = solver_comparison(("euler", "iie_r1", "iie_r3"), SEEDS, corpus, TRAIN)
for name, losses in out["losses"].items():
    secs = sum(out["seconds"][name])
    print(f"{name:7s} median {out['median'][name]:.4f}  per seed {[round(x, 4) for x in losses]}  {secs:.0f}s")

gap = out["median"]["euler"] - out["median"]["iie_r3"]
print(f"euler - iie_r3 median gap: {gap:+.4f} (positive means IIE r=3 is better)")
