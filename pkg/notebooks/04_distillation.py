"""
Influence-aware distillation
============================

A fully iterated IIE teacher is compressed into a student that runs the
lower-bound schedule (no refinements). The student starts from the teacher's
weights and is trained on CE plus layer-output MSE plus temperature KL. The
same recipe applied to a predictor-corrector teacher with an Euler student is
the baseline. A gap is student loss minus teacher loss.
"""

# %%
from _common import SEEDS, TRAIN

from iiet.experiments import distillation_comparison, micro_corpus

corpus = micro_corpus()
out = distillation_comparison(SEEDS, corpus, TRAIN)

# %%
for row in out["rows"]:
    print(f"seed {row['seed']}: iie teacher {row['iie_teacher']:.4f} warm {row['iie_warm_start']:.4f} "
          f"student {row['iie_student']:.4f} | pc teacher {row['pc_teacher']:.4f} warm {row['pc_warm_start']:.4f} "
          f"student {row['pc_student']:.4f}")
print(f"median gap  iie {out['median_iie_gap']:+.4f}  pc {out['median_pc_gap']:+.4f}")
