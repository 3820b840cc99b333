"""
Value-weighted candidates and the clipped objective
====================================================

The improvement step never writes down a density for the improved policy.
It draws a handful of candidate chunks from the current policy, scores them
with the critic and turns the scores into softmax weights. This script walks
through those weights on a small discrete problem and shows what the clip
does to the per-candidate losses.
"""

import numpy as np

from poco import update as up
from poco.update import DiscretePosteriorProblem

# Six candidate chunks with critic values spread over a few units of return.
q = np.array([-12.0, -9.5, -9.0, -8.8, -15.0, -10.0])

# %%
# Temperature controls how greedy the weights are. A large eta keeps the
# weights close to uniform, a small one puts nearly all mass on the best chunk.
for eta in (10.0, 1.0, 0.1, 0.001):
    w = up.importance_weights(q, eta)
    print(f"eta={eta:<6} weights={np.round(w, 3)} entropy={up.weight_entropy(w):.3f}")

# %%
# With a uniform prior over the candidates the weights are exactly the
# closed-form maximiser of expected value minus eta times the KL to the prior.
prob = DiscretePosteriorProblem(np.full(len(q), 1 / len(q)), q, 0.5)
post = up.closed_form_posterior(prob)
print("max |posterior - weights| =", np.abs(post - up.importance_weights(q, 0.5)).max())

# Any other distribution scores lower on that objective.
rng = np.random.default_rng(0)
best = up.e_step_objective(post, prob.prior, q, prob.eta)
other = rng.dirichlet(np.ones(len(q)))
print(f"objective at posterior {best:.4f} vs random distribution "
      f"{up.e_step_objective(other, prob.prior, q, prob.eta):.4f}")

# %%
# The clip caps every candidate's flow-matching loss at zeta. A candidate the
# policy already finds unlikely (large loss) stops pulling on the parameters,
# which bounds how far one update can bend the velocity field.
zeta = 0.3
for loss in (0.05, 0.2, 0.3, 0.8, 4.0):
    print(f"loss {loss:4.2f} -> clipped {up.clipped_bc(loss, zeta):.2f}, "
          f"gradient factor {up.clipped_bc_grad(loss, zeta):.0f}")
