"""
Offline pre-training, then online fine-tuning
=============================================

The full pipeline on point_reach with the desk configuration: 50 noisy
demonstrations, flow-matching pre-training, a short critic warmup with the
actor frozen, then interleaved interaction and improvement steps.

The full budget (100k environment steps) takes about a quarter of an hour
on one core. Pass a smaller step count on the command line for a quick look, e.g.
``python demos/03_point_reach_finetune.py 20000``.
"""

import sys
import time
from pathlib import Path

import numpy as np

from poco import envs, trainer
from poco.config import load_config

cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "point_reach.conf")
if len(sys.argv) > 1:
    cfg = cfg.replace(online_steps=int(sys.argv[1]))

demos = envs.collect_demos(cfg.env_spec(), cfg.n_demos, cfg.seed, cfg.demo_noise)
print(f"{len(demos)} demos, mean length {np.mean([len(ep) for ep in demos]):.1f} steps")

# %%
# Stage I: behaviour cloning by flow matching.
t0 = time.perf_counter()
actor = trainer.pretrain(cfg, demos).actor
pre = trainer.evaluate(cfg, actor, 200, cfg.seed).success_rate
print(f"pre-trained success {pre:.2f} ({time.perf_counter() - t0:.0f}s)")

# %%
# Stage II: critic warmup, then POCO updates. The callback prints each
# evaluation as it happens.


def show(p):
    print(f"  env steps {p.env_steps:>6}  running-20 {p.success_rate_20:4.2f}  eval {p.eval_success:4.2f}")


res = trainer.finetune(cfg, actor, demos, progress=show)
print(f"last 100 training episodes: {np.mean(res.outcomes[-100:]):.2f} success "
      f"({time.perf_counter() - t0:.0f}s total)")
