"""
Flow matching keeps both modes
==============================

The bimodal task has two mirror-image goals. From the middle of the start
region the scripted expert picks either one, so the demonstrations contain
two equally good behaviours. A regression policy would average them and
drive straight between the goals. A flow-matching policy samples from both.
"""

from pathlib import Path

import numpy as np

from poco import envs, trainer
from poco import flow_policy as fp
from poco.config import load_config

cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "bimodal_reach.conf")
spec = cfg.env_spec()
demos = envs.collect_demos(spec, cfg.n_demos, cfg.seed, cfg.demo_noise)
upper = sum(ep[-1].state[1] > 0 for ep in demos)
print(f"{len(demos)} demonstrations, {upper} end at the upper goal")

# %%
# Offline pre-training is plain flow matching on chunk-aligned windows. An
# under-trained net blurs the two modes into one wide bump, so this runs the
# full budget from the config (a couple of minutes).
actor = trainer.pretrain(cfg, demos).actor

# %%
# Sample 256 chunks at the centre of the start region and look at which way
# each one heads vertically. A chunk counts for a goal when its mean vertical
# action exceeds 0.2 toward it.
start = np.array(spec.start_center)
chunks = fp.sample_candidates(actor, start, 256, np.random.default_rng(1))
dy = chunks.reshape(256, cfg.T, 2)[:, :, 1].sum(axis=1)
print(f"heading up {np.mean(dy > 0.2 * cfg.T):.2f}, heading down {np.mean(dy < -0.2 * cfg.T):.2f}")
hist, edges = np.histogram(dy, bins=9, range=(-5, 5))
for h, lo, hi in zip(hist, edges[:-1], edges[1:]):
    print(f"  dy in [{lo:+.1f}, {hi:+.1f}) {'#' * (h // 2)}")

# %%
# Whole episodes from the same start also split between the goals.
res = trainer.evaluate(cfg, actor, 100, seed=0)
print(f"success over 100 episodes: {res.success_rate:.2f}")
