"""Policy improvement step: value-weighted candidate chunks and the clipped objective.

The E-step never builds an explicit density. It samples candidate chunks from
the current actor and weights them by ``softmax(Q / eta)``. The M-step distills
those particles back into the flow field through per-candidate flow-matching
losses clipped at ``zeta``, anchored by a plain flow-matching term on buffer
chunks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .flow_policy import FlowDraw, FlowPolicy, bc_loss_terms, offline_loss
from .numerics import MlpSpec, Var


@dataclass(frozen=True)
class PocoHyper:
    eta: float = 0.1
    beta: float = 1.0
    zeta: float = 0.3
    n_candidates: int = 32

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.beta < 0 or self.zeta < 0:
            raise ValueError("beta and zeta must be nonnegative")
        if self.n_candidates < 1:
            raise ValueError("need at least one candidate")


@dataclass(frozen=True)
class WeightedCandidates:
    chunks: np.ndarray
    q_values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        n = len(self.chunks)
        if not len(self.q_values) == len(self.weights) == n:
            raise ValueError("chunks, q_values and weights must have equal length")
        if np.any(self.weights < 0) or abs(float(np.sum(self.weights)) - 1.0) > 1e-9:
            raise ValueError("weights must be a probability vector")


def importance_weights(q_values, eta: float) -> np.ndarray:
    """``softmax(q / eta)`` along the last axis, in float64."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    q = np.asarray(q_values, dtype=np.float64)
    if not np.isfinite(q).all():
        raise ValueError("q-values must be finite")
    z = q / eta
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def weight_entropy(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    logw = np.log(np.where(w > 0, w, 1.0))
    return np.clip(-(w * logw).sum(axis=-1), 0.0, None)


def weigh_candidates(chunks, q_values, eta: float) -> WeightedCandidates:
    return WeightedCandidates(np.asarray(chunks), np.asarray(q_values),
                              importance_weights(q_values, eta))


def clipped_bc(loss, zeta: float):
    """``min(loss, zeta)`` for floats, or the tape op for a :class:`Var`."""
    if isinstance(loss, Var):
        return nx.clip_max(loss, zeta)
    return loss if loss < zeta else zeta


def clipped_bc_grad(loss: float, zeta: float) -> float:
    return 1.0 if loss < zeta else 0.0


def poco_loss_fn(pvars, spec: MlpSpec, states, buf_chunks, buf_a0, buf_m,
                 cand_chunks, cand_a0, cand_m, weights, beta: float, zeta: float):
    """Batch objective. Candidate arrays are ``[B, N, ...]``; weights ``[B, N]``.

    Returns ``(loss, aux)`` with aux holding the buffer term, the (unscaled)
    surrogate term and the per-candidate losses.
    """
    bc = offline_loss(pvars, spec, states, buf_chunks, buf_a0, buf_m)
    if beta == 0:
        return bc, {"bc": float(bc.value), "surrogate": 0.0, "cand_losses": None}
    B, N, D = cand_chunks.shape
    rep_states = np.repeat(np.atleast_2d(states), N, axis=0)
    terms = bc_loss_terms(spec, pvars, rep_states, cand_chunks.reshape(B * N, D),
                          np.asarray(cand_a0).reshape(B * N, D), np.asarray(cand_m).reshape(B * N))
    clipped = nx.clip_max(terms, zeta)
    w = np.asarray(weights, dtype=np.float64).reshape(B * N)
    # per-state weighted sum, then batch mean
    surrogate = nx.total(nx.mul(clipped, w)) * (1.0 / B)
    loss = bc + beta * surrogate
    return loss, {"bc": float(bc.value), "surrogate": float(surrogate.value),
                  "cand_losses": terms.value.reshape(B, N)}


def poco_loss(policy: FlowPolicy, state, buffer_chunk, cands: WeightedCandidates,
              hyper: PocoHyper, buffer_draw: FlowDraw, cand_draws: list[FlowDraw]) -> float:
    """Single-state objective value (forward pass only)."""
    pvars = {k: Var(v) for k, v in policy.params.items()}
    loss, _ = poco_loss_fn(pvars, policy.spec, *_single_state_args(state, buffer_chunk, cands, hyper,
                                                                   buffer_draw, cand_draws))
    return float(loss.value)


def _single_state_args(state, buffer_chunk, cands: WeightedCandidates, hyper: PocoHyper,
                       buffer_draw: FlowDraw, cand_draws: list[FlowDraw]) -> tuple:
    if len(cand_draws) != len(cands.chunks):
        raise ValueError("need one flow draw per candidate")
    n = len(cands.chunks)
    return (np.asarray(state)[None], np.asarray(buffer_chunk)[None], np.asarray(buffer_draw.a0)[None],
            [buffer_draw.m], np.asarray(cands.chunks).reshape(1, n, -1),
            np.stack([d.a0 for d in cand_draws])[None], np.array([d.m for d in cand_draws])[None],
            np.asarray(cands.weights)[None], hyper.beta, hyper.zeta)


def poco_value_and_grad(policy: FlowPolicy, state, buffer_chunk, cands: WeightedCandidates,
                        hyper: PocoHyper, buffer_draw: FlowDraw, cand_draws: list[FlowDraw]):
    return nx.value_and_grad(poco_loss_fn, policy.params, policy.spec,
                             *_single_state_args(state, buffer_chunk, cands, hyper, buffer_draw, cand_draws))


# --------------------------------------------------------------------------
# Discrete reference posterior (test oracle for the weighting step)


@dataclass(frozen=True)
class DiscretePosteriorProblem:
    prior: np.ndarray
    q_values: np.ndarray
    eta: float

    def __post_init__(self):
        p = np.asarray(self.prior, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("prior must be a probability vector")
        if len(self.q_values) != len(p):
            raise ValueError("prior and q_values must have equal length")


def closed_form_posterior(problem: DiscretePosteriorProblem) -> np.ndarray:
    """``prior * exp(q / eta)``, normalized, evaluated in log space."""
    prior = np.asarray(problem.prior, dtype=np.float64)
    if not np.any(prior > 0):
        raise ValueError("prior has no support")
    support = prior > 0
    logits = np.full(prior.shape, -np.inf)
    logits[support] = np.log(prior[support]) + np.asarray(problem.q_values)[support] / problem.eta
    logits -= logits[support].max()
    w = np.where(support, np.exp(logits), 0.0)
    return w / w.sum()


def e_step_objective(q_dist, prior, q_values, eta: float) -> float:
    """Expected value under ``q_dist`` minus ``eta * KL(q_dist || prior)``."""
    q = np.asarray(q_dist, dtype=np.float64)
    p = np.asarray(prior, dtype=np.float64)
    if np.any((q > 0) & (p <= 0)):
        raise ValueError("q_dist puts mass outside the prior's support")
    pos = q > 0
    kl = float(np.sum(q[pos] * np.log(q[pos] / p[pos])))
    return float(np.dot(q, np.asarray(q_values, dtype=np.float64))) - eta * kl
