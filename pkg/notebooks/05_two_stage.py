"""
Two-stage training
==================

Pre-train a plain Euler model for 75% of the budget with a constant learning
rate, then switch the residual solver to IIE r=3 and finish with a cosine
decay. The control arm keeps Euler for the same stage-2 budget.
"""

# %%
from _common import SEEDS, TRAIN

from iiet.experiments import micro_corpus, two_stage_comparison

corpus = micro_corpus()
out = two_stage_comparison("iie_r3", SEEDS, corpus, TRAIN)

# %%
for row in out["rows"]:
    print(f"seed {row['seed']}: two-stage {row['two_stage']:.4f}  vanilla continued {row['vanilla_continued']:.4f}")
print(f"median two-stage {out['median_two_stage']:.4f}  vanilla continued {out['median_vanilla_continued']:.4f}")
