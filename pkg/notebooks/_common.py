"""Shared knobs for the narrative scripts.

IIET_STEPS shortens every training run (default: the full micro budget) and
IIET_SEEDS sets how many seeds each comparison uses.
"""

import logging
import os
from dataclasses import replace

from iiet.experiments import MICRO_TRAIN

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

STEPS = int(os.environ.get("IIET_STEPS", MICRO_TRAIN.total_steps))
SEEDS = tuple(range(int(os.environ.get("IIET_SEEDS", 3))))
TRAIN = replace(MICRO_TRAIN, total_steps=STEPS, eval_every=max(1, min(MICRO_TRAIN.eval_every, STEPS // 4)))
