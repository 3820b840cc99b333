"""
What the clip and the guidance scale do
=======================================

Three short sweeps on channel_insert from one pre-trained checkpoint:

* zeta = 0 removes the improvement signal entirely, leaving behaviour cloning
  on the growing buffer.
* beta trades the buffer anchor against the value-weighted candidates. Too
  little and the policy barely moves; too much and early, inaccurate critic
  values drag the policy down before it recovers.

Each run below uses a reduced budget so the whole script finishes in about
half an hour. Curves are written to ``ablation_out/``. A step count on the
command line shortens every run, e.g. ``python demos/04_channel_ablation.py 5000``.
"""

import sys
from pathlib import Path

import numpy as np

from poco import envs, trainer
from poco.config import load_config

cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "channel_insert.conf")
cfg = cfg.replace(online_steps=int(sys.argv[1]) if len(sys.argv) > 1 else 60_000, eval_every=5000)
out = Path("ablation_out")

demos = envs.collect_demos(cfg.env_spec(), cfg.n_demos, cfg.seed, cfg.demo_noise)
actor = trainer.pretrain(cfg, demos).actor
print(f"pre-trained success {trainer.evaluate(cfg, actor, 200, cfg.seed).success_rate:.2f}")


def summary(results):
    for v, res in results.items():
        r20 = [p.success_rate_20 for p in res.evals[1:]]
        print(f"  {v:>5g}: last-100 {np.mean(res.outcomes[-100:]):.2f}, "
              f"running-20 curve {' '.join(f'{x:.2f}' for x in r20)}")


# %%
print("clip threshold")
summary(trainer.ablate(cfg, "zeta", [0.0, cfg.zeta], actor, demos, out))

# %%
print("guidance scale")
summary(trainer.ablate(cfg, "beta", [0.1, 1.0, 10.0], actor, demos, out))
