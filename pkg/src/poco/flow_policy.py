"""Flow-matching policy over flattened action chunks.

The velocity network sees ``[state, noisy_chunk, flow_time]`` and predicts a
velocity of the same width as the chunk. Sampling integrates the flow ODE with
forward Euler from Gaussian noise at time 0 to time 1.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import MlpSpec, ParamSet, Var


class FrozenPolicyError(RuntimeError):
    """Raised when parameters of a frozen actor are about to change."""


@dataclass(frozen=True)
class FlowDraw:
    m: float
    a0: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.m <= 1.0:
            raise ValueError(f"flow time must lie in [0, 1], got {self.m}")


@dataclass(frozen=True)
class FlowPolicy:
    spec: MlpSpec
    params: ParamSet
    T: int
    A: int
    K: int
    state_dim: int
    frozen: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.spec.input_dim != self.state_dim + self.chunk_dim + 1:
            raise nx.ShapeError("velocity net input must be state_dim + T*A + 1")
        if self.spec.output_dim != self.chunk_dim:
            raise nx.ShapeError("velocity net output must be T*A")

    @property
    def chunk_dim(self) -> int:
        return self.T * self.A

    def velocity(self, a: np.ndarray, m, states: np.ndarray) -> np.ndarray:
        """Velocity field for a batch of rows (``a`` is ``[B, T*A]``)."""
        a = np.atleast_2d(a)
        states = np.broadcast_to(states, (a.shape[0], self.state_dim))
        m = np.broadcast_to(np.asarray(m, dtype=a.dtype).reshape(-1, 1), (a.shape[0], 1))
        x = np.concatenate([states, a, m], axis=1)
        return nx.mlp_forward(self.spec, self.params, x)

    def with_params(self, params: ParamSet) -> "FlowPolicy":
        if self.frozen:
            raise FrozenPolicyError("actor is frozen; parameter update refused")
        nx.check_same_structure(self.params, params)
        return replace(self, params=params)

    def freeze(self) -> "FlowPolicy":
        return replace(self, frozen=True)

    def unfreeze(self) -> "FlowPolicy":
        return replace(self, frozen=False)


def make_policy(state_dim: int, T: int, A: int, K: int, hidden_dims,
                rng: np.random.Generator, dtype=nx.DEFAULT_DTYPE) -> FlowPolicy:
    spec = MlpSpec(state_dim + T * A + 1, tuple(hidden_dims), T * A)
    return FlowPolicy(spec, nx.init_params(spec, rng, dtype), T, A, K, state_dim)


def interpolate(a0: np.ndarray, a1: np.ndarray, m):
    """Point at time ``m`` on the straight path from noise ``a0`` to data ``a1``."""
    m_arr = np.asarray(m)
    if np.any(m_arr < 0) or np.any(m_arr > 1):
        raise ValueError("flow time must lie in [0, 1]")
    if m_arr.ndim == 1:
        m_arr = m_arr[:, None]
    return (1 - m_arr) * a0 + m_arr * a1


def integrate(policy: FlowPolicy, states: np.ndarray, a0: np.ndarray) -> np.ndarray:
    """Euler-integrate the flow from ``a0`` (rows) and clamp to the action box."""
    a = np.array(a0, dtype=policy.params.dtype)
    dt = 1.0 / policy.K
    for k in range(policy.K):
        v = policy.velocity(a, k * dt, states)
        if not np.isfinite(v).all():
            raise nx.NumericalOverflowError(f"non-finite velocity at flow step {k}")
        a = a + dt * v
    return np.clip(a, -1.0, 1.0)


def sample_chunk(policy: FlowPolicy, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    a0 = rng.standard_normal(policy.chunk_dim)
    return integrate(policy, np.asarray(state)[None], a0[None])[0]


def sample_candidates(policy: FlowPolicy, state: np.ndarray, n: int,
                      rng: np.random.Generator) -> np.ndarray:
    """``n`` independent chunks for one state, shape ``[n, T*A]``."""
    if n < 1:
        raise ValueError("need at least one candidate")
    a0 = rng.standard_normal((n, policy.chunk_dim))
    return integrate(policy, np.asarray(state)[None], a0)


def sample_chunks(policy: FlowPolicy, states: np.ndarray, rng: np.random.Generator,
                  n: int | None = None) -> np.ndarray:
    """Batched sampling: ``[B, T*A]`` or, with ``n``, ``[B, n, T*A]``."""
    states = np.atleast_2d(states)
    B = states.shape[0]
    if n is None:
        a0 = rng.standard_normal((B, policy.chunk_dim))
        return integrate(policy, states, a0)
    a0 = rng.standard_normal((B, n, policy.chunk_dim))
    flat = integrate(policy, np.repeat(states, n, axis=0), a0.reshape(B * n, -1))
    return flat.reshape(B, n, -1)


def draw_flow(rng: np.random.Generator, batch: int, chunk_dim: int):
    """Noise and flow times for ``batch`` independent loss terms."""
    a0 = rng.standard_normal((batch, chunk_dim))
    m = rng.uniform(0.0, 1.0, size=batch)
    return a0, m


# --------------------------------------------------------------------------
# Flow-matching regression loss


def bc_loss_terms(spec: MlpSpec, pvars: Mapping[str, Var], states, targets, a0, m) -> Var:
    """Per-row flow-matching loss, shape ``[B]`` (mean over chunk dims)."""
    states = np.atleast_2d(states)
    targets = np.atleast_2d(targets)
    a0 = np.atleast_2d(a0)
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    if targets.shape != a0.shape or targets.shape[0] != m.shape[0] or states.shape[0] != m.shape[0]:
        raise nx.ShapeError("states, targets, noise and flow times must share the batch size")
    dtype = pvars["l0.w"].value.dtype
    a_m = interpolate(a0, targets, m)
    x = np.concatenate([states, a_m, m[:, None]], axis=1).astype(dtype)
    v = nx.mlp_apply(spec, pvars, x)
    resid = v - (targets - a0).astype(dtype)
    return nx.mean(nx.square(resid), axis=1)


def offline_loss(pvars, spec: MlpSpec, states, targets, a0, m) -> Var:
    """Batch-mean flow-matching loss; the pre-training objective."""
    return nx.mean(bc_loss_terms(spec, pvars, states, targets, a0, m))


def bc_loss(policy: FlowPolicy, state, target, draw: FlowDraw) -> float:
    pvars = {k: Var(v) for k, v in policy.params.items()}
    out = bc_loss_terms(policy.spec, pvars, np.asarray(state)[None], np.asarray(target)[None],
                        np.asarray(draw.a0)[None], [draw.m])
    return float(out.value[0])


def bc_loss_grad(policy: FlowPolicy, state, target, draw: FlowDraw):
    return nx.value_and_grad(offline_loss, policy.params, policy.spec, np.asarray(state)[None],
                             np.asarray(target)[None], np.asarray(draw.a0)[None], [draw.m])[:2]


def checkpoint_meta(policy: FlowPolicy) -> dict:
    return {"T": policy.T, "A": policy.A, "K": policy.K, "state_dim": policy.state_dim,
            "actor_hidden": ",".join(map(str, policy.spec.hidden_dims))}


def save_policy(path, policy: FlowPolicy, extra_meta: dict | None = None) -> None:
    meta = checkpoint_meta(policy) | dict(extra_meta or {})
    nx.save_checkpoint(path, nx.prefixed(policy.params, "actor"), meta)


def load_policy(path) -> FlowPolicy:
    ck = nx.load_checkpoint(path)
    meta = ck.meta
    T, A, K, sd = (int(meta[k]) for k in ("T", "A", "K", "state_dim"))
    hidden = tuple(int(h) for h in meta["actor_hidden"].split(","))
    spec = MlpSpec(sd + T * A + 1, hidden, T * A)
    return FlowPolicy(spec, nx.unprefixed(ck.tensors, "actor"), T, A, K, sd)
