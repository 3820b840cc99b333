"""Chunk-level Q-function trained on multi-step TD targets."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .flow_policy import FlowPolicy, FrozenPolicyError, sample_chunks
from .numerics import AdamState, MlpSpec, ParamSet


@dataclass(frozen=True)
class ChunkCritic:
    spec: MlpSpec
    params: ParamSet
    target_params: ParamSet
    T: int
    A: int
    state_dim: int
    tau: float = 0.005

    def __post_init__(self):
        nx.check_same_structure(self.params, self.target_params)
        if self.spec.input_dim != self.state_dim + self.T * self.A or self.spec.output_dim != 1:
            raise nx.ShapeError("critic must map state_dim + T*A inputs to one output")

    def q(self, states, chunks, target: bool = False) -> np.ndarray:
        params = self.target_params if target else self.params
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(chunks)], axis=-1)
        return nx.mlp_forward(self.spec, params, x)[..., 0]


def make_critic(state_dim: int, T: int, A: int, hidden_dims, rng: np.random.Generator,
                tau: float = 0.005, dtype=nx.DEFAULT_DTYPE) -> ChunkCritic:
    spec = MlpSpec(state_dim + T * A, tuple(hidden_dims), 1, use_layer_norm=True)
    params = nx.init_params(spec, rng, dtype)
    return ChunkCritic(spec, params, params, T, A, state_dim, tau)


def discounted_window_sum(rewards: np.ndarray, lengths: np.ndarray, gamma: float) -> np.ndarray:
    """Sum of ``gamma**k * r_k`` over each (right-padded) reward window."""
    rewards = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    k = np.arange(rewards.shape[1])
    mask = k[None, :] < np.asarray(lengths)[:, None]
    return (np.where(mask, rewards, 0.0) * gamma ** k).sum(axis=1)


def td_targets(rewards, lengths, terminals, next_states, bootstrap_chunks,
               critic: ChunkCritic, gamma: float) -> np.ndarray:
    """Batched chunk TD targets; bootstraps from the target network unless terminal."""
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    lengths = np.asarray(lengths)
    if np.any(lengths < 1):
        raise ValueError("reward window must be nonempty")
    ret = discounted_window_sum(rewards, lengths, gamma)
    q_next = critic.q(next_states, bootstrap_chunks, target=True).astype(np.float64)
    alive = ~np.asarray(terminals, dtype=bool)
    return ret + np.where(alive, gamma ** critic.T * q_next, 0.0)


def td_target(rewards, terminal: bool, next_state, bootstrap_chunk, critic: ChunkCritic,
              gamma: float) -> float:
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if rewards.size == 0:
        raise ValueError("reward window must be nonempty")
    if rewards.size > critic.T:
        raise ValueError("reward window longer than the chunk horizon")
    return float(td_targets(rewards[None], [rewards.size], [terminal], np.asarray(next_state)[None],
                            np.asarray(bootstrap_chunk)[None], critic, gamma)[0])


def critic_loss_fn(pvars, spec: MlpSpec, states, chunks, targets) -> nx.Var:
    x = np.concatenate([states, chunks], axis=1)
    q = nx.mlp_apply(spec, pvars, x)
    resid = q - np.asarray(targets, dtype=q.value.dtype)[:, None]
    return nx.mean(nx.square(resid)), q.value[:, 0]


def critic_loss(critic: ChunkCritic, batch, gamma: float, bootstrap_chunks) -> float:
    """Mean squared TD residual of ``batch`` (a :class:`~poco.replay.ChunkBatch`)."""
    targets = td_targets(batch.rewards, batch.lengths, batch.terminals, batch.next_states,
                         bootstrap_chunks, critic, gamma)
    out, _ = critic_loss_fn({k: nx.Var(v) for k, v in critic.params.items()}, critic.spec,
                            batch.states, batch.chunks, targets)
    return float(out.value)


@dataclass
class CriticStepInfo:
    loss: float
    q_mean: float


def critic_update(critic: ChunkCritic, opt: AdamState, batch, bootstrap_chunks, gamma: float,
                  lr: float):
    """One TD gradient step followed by a Polyak target update."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    targets = td_targets(batch.rewards, batch.lengths, batch.terminals, batch.next_states,
                         bootstrap_chunks, critic, gamma)
    loss, grads, q = nx.value_and_grad(critic_loss_fn, critic.params, critic.spec,
                                       batch.states, batch.chunks, targets)
    params, opt = nx.adam_step(critic.params, grads, opt, lr)
    target = nx.polyak_update(critic.target_params, params, critic.tau)
    return replace(critic, params=params, target_params=target), opt, \
        CriticStepInfo(loss, float(np.mean(q, dtype=np.float64)))


def sarsa_warmup_step(critic: ChunkCritic, opt: AdamState, frozen_actor: FlowPolicy, batch,
                      gamma: float, lr: float, rng: np.random.Generator):
    """Critic-only update bootstrapping on chunks from a frozen actor."""
    if not frozen_actor.frozen:
        raise FrozenPolicyError("warmup requires an actor frozen for the whole phase")
    boot = sample_chunks(frozen_actor, batch.next_states, rng)
    return critic_update(critic, opt, batch, boot, gamma, lr)


def save_critic(path, critic: ChunkCritic) -> None:
    tensors = nx.prefixed(critic.params, "critic") | nx.prefixed(critic.target_params, "target")
    meta = {"T": critic.T, "A": critic.A, "state_dim": critic.state_dim, "tau": repr(critic.tau),
            "critic_hidden": ",".join(map(str, critic.spec.hidden_dims))}
    nx.save_checkpoint(path, tensors, meta)


def load_critic(path) -> ChunkCritic:
    ck = nx.load_checkpoint(path)
    m = ck.meta
    T, A, sd = int(m["T"]), int(m["A"]), int(m["state_dim"])
    hidden = tuple(int(h) for h in m["critic_hidden"].split(","))
    spec = MlpSpec(sd + T * A, hidden, 1, use_layer_norm=True)
    return ChunkCritic(spec, nx.unprefixed(ck.tensors, "critic"), nx.unprefixed(ck.tensors, "target"),
                       T, A, sd, float(m["tau"]))
