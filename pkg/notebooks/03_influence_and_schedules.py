"""
Which refinements matter
========================

Block influence measures how much a sub-block changes its input. Iteration
influence does the same for each refinement inside an IIE sub-block. Small
influence marks a refinement that can be skipped; the schedules below keep
only the refinements above a threshold or within a budget.
"""

# %%
import numpy as np
from _common import TRAIN

from iiet.experiments import final_val_loss, influence_study, micro_corpus, pretrain
from iiet.influence import derive_schedule
from iiet.model import IterationSchedule, flops_estimate

corpus = micro_corpus()
result = pretrain("iie_r3", 0, corpus, TRAIN)
study = influence_study(result, corpus, n_samples=32)
report = study["report"]

# %% Rows are sub-blocks (attention, ffn alternating); column 0 is the initial step.
np.set_printoptions(precision=4, suppress=True)
print("block influence", report.block_bi)
print(report.iter_influence)

# %% Derived schedules, their cost and their loss.
full = IterationSchedule.full(result.config)
schedules = {"full": full, "lower_bound": study["lower_bound"], "threshold": study["threshold"],
             "per_layer_threshold": study["per_layer_threshold"],
             "budget_4": derive_schedule(report, "budget", budget=4)}
base = flops_estimate(result.config, full)
for name, sched in schedules.items():
    loss = final_val_loss(result, corpus, sched)
    print(f"{name:20s} r={list(sched.r)}  flops {flops_estimate(result.config, sched) / base:.2f}  val {loss:.4f}")
