"""Offline pre-training, critic warmup and online fine-tuning loops."""
from __future__ import annotations

import csv
import io
import logging
import math
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import envs
from . import numerics as nx
from .config import TrainConfig, format_config
from .critic import ChunkCritic, critic_update, make_critic, save_critic, sarsa_warmup_step
from .flow_policy import (FlowPolicy, draw_flow, load_policy, make_policy, offline_loss,
                          sample_chunks, save_policy)
from .numerics import AdamState
from .replay import ChunkBatch, ReplayBuffer, StepRecord
from .update import importance_weights, poco_loss_fn, weight_entropy

log = logging.getLogger(__name__)

METRICS_HEADER = ("global_step", "phase", "episodes", "success_rate_20", "critic_loss", "bc_loss",
                  "surrogate_loss", "weight_entropy", "q_mean")
EVAL_HEADER = ("global_step", "env_steps", "episodes", "success_rate_20", "eval_success",
               "eval_return")
EVAL_TAG = 0xE7A1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainMetricsRow:
    global_step: int
    phase: str
    episodes: int = 0
    success_rate_20: float = math.nan
    critic_loss: float = math.nan
    bc_loss: float = math.nan
    surrogate_loss: float = math.nan
    weight_entropy: float = math.nan
    q_mean: float = math.nan


@dataclass
class EvalPoint:
    global_step: int
    env_steps: int
    episodes: int
    success_rate_20: float
    eval_success: float
    eval_return: float


@dataclass
class EvalResult:
    success_rate: float
    returns: np.ndarray
    successes: np.ndarray


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def rows_to_csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        d = asdict(r)
        w.writerow([_fmt(d[h]) for h in header])
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


class _Streams:
    """Independent generators, one per consumer, derived from the run seed."""

    NAMES = ("actor_init", "critic_init", "offline", "env", "interact", "learn", "demos")

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        for name, ss in zip(self.NAMES, children):
            setattr(self, name, np.random.default_rng(ss))


def eval_rng(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    env_ss, act_ss = np.random.SeedSequence([seed, EVAL_TAG]).spawn(2)
    return np.random.default_rng(env_ss), np.random.default_rng(act_ss)


# --------------------------------------------------------------------------
# Building blocks


def init_actor(cfg: TrainConfig, rng: np.random.Generator | None = None) -> FlowPolicy:
    spec = cfg.env_spec()
    rng = rng if rng is not None else _Streams(cfg.seed).actor_init
    return make_policy(spec.state_dim, cfg.T, spec.action_dim, cfg.K, cfg.actor_hidden, rng)


def init_critic(cfg: TrainConfig, rng: np.random.Generator | None = None) -> ChunkCritic:
    spec = cfg.env_spec()
    rng = rng if rng is not None else _Streams(cfg.seed).critic_init
    return make_critic(spec.state_dim, cfg.T, spec.action_dim, cfg.critic_hidden, rng, cfg.tau)


def demo_buffer(cfg: TrainConfig, demos: Sequence[Sequence[StepRecord]]) -> ReplayBuffer:
    buf = ReplayBuffer(cfg.T, cfg.buffer_capacity)
    for ep in demos:
        buf.push_episode(ep)
    return buf


def bc_step(actor: FlowPolicy, opt: AdamState, batch: ChunkBatch, lr: float,
            rng: np.random.Generator):
    """One flow-matching gradient step on buffer chunks."""
    a0, m = draw_flow(rng, len(batch), actor.chunk_dim)
    loss, grads, _ = nx.value_and_grad(offline_loss, actor.params, actor.spec, batch.states,
                                       batch.chunks, a0, m)
    params, opt = nx.adam_step(actor.params, grads, opt, lr)
    return actor.with_params(params), opt, loss


def poco_step(actor: FlowPolicy, opt: AdamState, critic: ChunkCritic, batch: ChunkBatch,
              cfg: TrainConfig, rng: np.random.Generator):
    """Implicit E-step on ``batch`` followed by one gradient step on the clipped objective.

    The buffer-term flow draws are taken from ``rng`` first, exactly as in
    :func:`bc_step`, so that ``beta = 0`` reproduces plain fine-tuning bit for bit.
    """
    B = len(batch)
    a0, m = draw_flow(rng, B, actor.chunk_dim)
    info = {"bc": math.nan, "surrogate": math.nan, "entropy": math.nan}
    if cfg.beta == 0:
        loss, grads, aux = nx.value_and_grad(poco_loss_fn, actor.params, actor.spec, batch.states,
                                             batch.chunks, a0, m, None, None, None, None, 0.0,
                                             cfg.zeta)
        info["bc"] = aux["bc"]
    else:
        cands = sample_chunks(actor, batch.states, rng, n=cfg.N)
        q = critic.q(np.repeat(batch.states, cfg.N, axis=0), cands.reshape(B * cfg.N, -1))
        w = importance_weights(q.reshape(B, cfg.N), cfg.eta)
        ca0, cm = draw_flow(rng, B * cfg.N, actor.chunk_dim)
        loss, grads, aux = nx.value_and_grad(
            poco_loss_fn, actor.params, actor.spec, batch.states, batch.chunks, a0, m,
            cands, ca0.reshape(B, cfg.N, -1), cm.reshape(B, cfg.N), w, cfg.beta, cfg.zeta)
        info.update(bc=aux["bc"], surrogate=aux["surrogate"],
                    entropy=float(weight_entropy(w).mean()))
    params, opt = nx.adam_step(actor.params, grads, opt, cfg.actor_lr)
    return actor.with_params(params), opt, loss, info


# --------------------------------------------------------------------------
# Stage I


@dataclass
class PretrainResult:
    actor: FlowPolicy
    rows: list[TrainMetricsRow]


def pretrain(cfg: TrainConfig, demos, out_dir=None) -> PretrainResult:
    """Supervised flow matching on the demonstration windows."""
    if not demos or not any(len(ep) for ep in demos):
        raise ValueError("pre-training needs at least one demonstration")
    streams = _Streams(cfg.seed)
    actor = init_actor(cfg, streams.actor_init)
    buf = demo_buffer(cfg, demos)
    opt = AdamState.init(actor.params)
    rows, acc = [], []
    for step in range(1, cfg.offline_steps + 1):
        batch = buf.sample_batch(cfg.batch_size, streams.offline)
        actor, opt, loss = bc_step(actor, opt, batch, cfg.actor_lr, streams.offline)
        acc.append(loss)
        if step % cfg.log_every == 0 or step == cfg.offline_steps:
            rows.append(TrainMetricsRow(step, "offline", bc_loss=float(np.mean(acc))))
            acc = []
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_policy(out / "actor.ckpt", actor)
        (out / "metrics.csv").write_text(rows_to_csv(rows, METRICS_HEADER))
        (out / "config.txt").write_text(format_config(cfg))
    return PretrainResult(actor, rows)


# --------------------------------------------------------------------------
# Evaluation


ChunkFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def policy_chunk_fn(actor: FlowPolicy) -> ChunkFn:
    return lambda obs, rng: sample_chunks(actor, obs, rng)


def expert_chunk_fn(spec: envs.EnvSpec, T: int) -> ChunkFn:
    """Noise-free expert planned open-loop over a chunk through the known dynamics."""

    def fn(obs, rng):
        pos = np.array(obs, dtype=np.float64)
        acts = []
        for _ in range(T):
            a = envs.expert_action(spec, pos, rng, 0.0)
            acts.append(a)
            pos = envs.move(spec, pos, a)
        return np.stack(acts, axis=1).reshape(len(obs), -1)

    return fn


def run_episodes(spec: envs.EnvSpec, chunk_fn: ChunkFn, T: int, starts: np.ndarray,
                 rng: np.random.Generator) -> EvalResult:
    """Run one episode from each start in lockstep, querying chunks only for live episodes."""
    pos = np.array(starts, dtype=np.float64)
    n = len(pos)
    t = np.zeros(n, dtype=np.int64)
    live = np.ones(n, dtype=bool)
    success = np.zeros(n, dtype=bool)
    ret = np.zeros(n)
    A = spec.action_dim
    while live.any():
        idx = np.flatnonzero(live)
        chunks = np.asarray(chunk_fn(pos[idx], rng), dtype=np.float64).reshape(len(idx), T, A)
        for k in range(T):
            sub = idx[live[idx]]
            if len(sub) == 0:
                break
            a = chunks[np.searchsorted(idx, sub), k]
            pos[sub] = envs.move(spec, pos[sub], a)
            hit = envs.at_goal(spec, pos[sub])
            ret[sub] += envs.reward_for(spec, hit)
            t[sub] += 1
            success[sub] |= hit
            live[sub] = ~(hit | (t[sub] >= spec.horizon))
    return EvalResult(float(success.mean()), ret, success)


def evaluate(cfg: TrainConfig, actor, n_trials: int, seed: int) -> EvalResult:
    """Success rate over ``n_trials`` episodes with starts drawn from a dedicated stream.

    ``actor`` is a :class:`FlowPolicy` or a chunk function ``(obs, rng) -> chunks``.
    """
    if n_trials < 1:
        raise ValueError("need at least one trial")
    spec = cfg.env_spec()
    env_r, act_r = eval_rng(seed)
    starts = np.stack([envs.reset(spec, env_r).position for _ in range(n_trials)])
    fn = policy_chunk_fn(actor) if isinstance(actor, FlowPolicy) else actor
    return run_episodes(spec, fn, cfg.T, starts, act_r)


# --------------------------------------------------------------------------
# Stage II


@dataclass
class FinetuneResult:
    actor: FlowPolicy
    critic: ChunkCritic
    rows: list[TrainMetricsRow]
    evals: list[EvalPoint]
    pretrained_success: float
    env_steps: int = 0
    learn_steps: int = 0
    episodes: int = 0
    actor_updates: list[int] = field(default_factory=list)
    # success flag of every online episode, in completion order
    outcomes: list[bool] = field(default_factory=list)


class _Learner:
    """Owns actor/critic state and performs learning steps in order."""

    def __init__(self, cfg: TrainConfig, actor: FlowPolicy, critic: ChunkCritic, rng):
        self.cfg = cfg
        self.frozen_actor = actor.freeze()
        self.actor = actor
        self.actor_opt = AdamState.init(actor.params)
        self.critic = critic
        self.critic_opt = AdamState.init(critic.params)
        self.rng = rng
        self.step = 0
        self.actor_updates: list[int] = []
        self._acc: dict[str, list] = {}

    def learn(self, buf: ReplayBuffer) -> None:
        cfg = self.cfg
        self.step += 1
        batch = buf.sample_batch(cfg.batch_size, self.rng)
        if self.step <= cfg.warmup_steps:
            self.critic, self.critic_opt, cinfo = sarsa_warmup_step(
                self.critic, self.critic_opt, self.frozen_actor, batch, cfg.gamma, cfg.critic_lr,
                self.rng)
            self._record(critic=cinfo.loss, q=cinfo.q_mean)
            return
        boot = sample_chunks(self.actor, batch.next_states, self.rng)
        self.critic, self.critic_opt, cinfo = critic_update(
            self.critic, self.critic_opt, batch, boot, cfg.gamma, cfg.critic_lr)
        self.actor, self.actor_opt, _, info = poco_step(
            self.actor, self.actor_opt, self.critic, batch, cfg, self.rng)
        self.actor_updates.append(self.step)
        self._record(critic=cinfo.loss, q=cinfo.q_mean, bc=info["bc"], sur=info["surrogate"],
                     ent=info["entropy"])

    @property
    def phase(self) -> str:
        return "warmup" if self.step <= self.cfg.warmup_steps else "online"

    def _record(self, **kw):
        for k, v in kw.items():
            self._acc.setdefault(k, []).append(v)

    def flush(self, episodes: int, sr20: float) -> TrainMetricsRow:
        mean = {k: float(np.mean(v)) for k, v in self._acc.items()}
        self._acc = {}
        return TrainMetricsRow(self.step, self.phase, episodes, sr20, mean.get("critic", math.nan),
                               mean.get("bc", math.nan), mean.get("sur", math.nan),
                               mean.get("ent", math.nan), mean.get("q", math.nan))


def _records(states, actions, rewards, done_last: bool, eid: int) -> list[StepRecord]:
    n = len(states)
    return [StepRecord(states[i].astype(np.float32), np.asarray(actions[i], dtype=np.float32),
                       float(rewards[i]), done_last and i == n - 1, eid, i) for i in range(n)]


def finetune(cfg: TrainConfig, actor: FlowPolicy, demos, out_dir=None,
             progress: Callable[[EvalPoint], None] | None = None) -> FinetuneResult:
    """Critic warmup with the frozen actor, then interleaved interaction and POCO updates."""
    if cfg.mode == "concurrent":
        return _finetune_concurrent(cfg, actor, demos, out_dir)
    spec = cfg.env_spec()
    streams = _Streams(cfg.seed)
    critic = init_critic(cfg, streams.critic_init)
    buf = demo_buffer(cfg, demos)
    learner = _Learner(cfg, actor, critic, streams.learn)
    pre = evaluate(cfg, actor, cfg.eval_trials, cfg.seed).success_rate if cfg.eval_trials else math.nan

    rows: list[TrainMetricsRow] = []
    evals: list[EvalPoint] = []
    outcomes: list[bool] = []
    env_steps = episodes = 0
    credit = 0.0
    next_eval = 0
    eid = len(demos)

    def sr20():
        return float(np.mean(outcomes[-20:])) if outcomes else math.nan

    def do_eval():
        if cfg.eval_trials:
            res = evaluate(cfg, learner.actor, cfg.eval_trials, cfg.seed)
            es, er = res.success_rate, float(res.returns.mean())
        else:
            es = er = math.nan
        pt = EvalPoint(learner.step, env_steps, episodes, sr20(), es, er)
        evals.append(pt)
        if progress:
            progress(pt)
        log.info("env_steps=%d learn=%d sr20=%.2f eval=%.2f", env_steps, learner.step, pt.success_rate_20, es)

    try:
        while env_steps < cfg.online_steps:
            st = envs.reset(spec, streams.env)
            S, Acts, R = [], [], []
            while not st.done and env_steps < cfg.online_steps:
                if env_steps >= next_eval:
                    do_eval()
                    next_eval += cfg.eval_every
                # open-loop chunk from the latest published actor snapshot
                chunk = sample_chunks(learner.actor, st.position[None], streams.interact)[0]
                for a in chunk.reshape(cfg.T, spec.action_dim):
                    S.append(st.position)
                    Acts.append(a)
                    st, r, _ = envs.step(spec, st, a)
                    R.append(r)
                    env_steps += 1
                    credit += cfg.utd_ratio
                    if st.done or env_steps >= cfg.online_steps:
                        break
                if st.done:
                    buf.push_episode(_records(np.array(S), Acts, R, True, eid))
                    eid += 1
                    episodes += 1
                    outcomes.append(st.success)
                while credit >= 1.0:
                    credit -= 1.0
                    learner.learn(buf)
                    if learner.step % cfg.log_every == 0:
                        rows.append(learner.flush(episodes, sr20()))
        do_eval()
    except (nx.NumericalOverflowError, FloatingPointError) as exc:
        _dump_divergence(out_dir, cfg, learner, env_steps, exc)
        raise TrainingDiverged(f"non-finite value at learning step {learner.step}: {exc}") from exc
    if learner._acc:
        rows.append(learner.flush(episodes, sr20()))
    result = FinetuneResult(learner.actor, learner.critic, rows, evals, pre, env_steps,
                            learner.step, episodes, learner.actor_updates, outcomes)
    if out_dir is not None:
        write_finetune_outputs(out_dir, cfg, result)
    return result


def _dump_divergence(out_dir, cfg, learner, env_steps, exc) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "diverged.txt").write_text(
        f"learn_step = {learner.step}\nphase = {learner.phase}\nenv_steps = {env_steps}\n"
        f"error = {exc}\n" + format_config(cfg))
    save_policy(out / "actor_at_divergence.ckpt", learner.actor.unfreeze())
    save_critic(out / "critic_at_divergence.ckpt", learner.critic)


def write_finetune_outputs(out_dir, cfg: TrainConfig, result: FinetuneResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(rows_to_csv(result.rows, METRICS_HEADER))
    (out / "eval.csv").write_text(rows_to_csv(result.evals, EVAL_HEADER))
    (out / "config.txt").write_text(format_config(cfg))
    save_policy(out / "actor.ckpt", result.actor, {"pretrained_success": repr(result.pretrained_success)})
    save_critic(out / "critic.ckpt", result.critic)


def _finetune_concurrent(cfg: TrainConfig, actor: FlowPolicy, demos, out_dir) -> FinetuneResult:
    """Interaction and learning on separate threads.

    The interaction thread reads whatever actor snapshot was last published and
    pushes finished episodes; the learner keeps its step count at or below
    ``utd_ratio * env_steps``. Results are not bit-reproducible in this mode.
    """
    spec = cfg.env_spec()
    streams = _Streams(cfg.seed)
    buf = demo_buffer(cfg, demos)
    learner = _Learner(cfg, actor, init_critic(cfg, streams.critic_init), streams.learn)
    pre = evaluate(cfg, actor, cfg.eval_trials, cfg.seed).success_rate if cfg.eval_trials else math.nan
    lock = threading.Lock()
    progress = {"env_steps": 0, "episodes": 0, "done": False}
    outcomes: list[bool] = []
    rows: list[TrainMetricsRow] = []
    errors: list[BaseException] = []

    def interact():
        eid = len(demos)
        try:
            while progress["env_steps"] < cfg.online_steps:
                st = envs.reset(spec, streams.env)
                S, Acts, R = [], [], []
                while not st.done and progress["env_steps"] < cfg.online_steps:
                    snapshot = learner.actor
                    chunk = sample_chunks(snapshot, st.position[None], streams.interact)[0]
                    for a in chunk.reshape(cfg.T, spec.action_dim):
                        S.append(st.position)
                        Acts.append(a)
                        st, r, _ = envs.step(spec, st, a)
                        R.append(r)
                        progress["env_steps"] += 1
                        if st.done:
                            break
                if st.done:
                    recs = _records(np.array(S), Acts, R, True, eid)
                    with lock:
                        buf.push_episode(recs)
                        outcomes.append(st.success)
                        progress["episodes"] += 1
                    eid += 1
        except BaseException as exc:  # surfaced in the caller
            errors.append(exc)
        finally:
            progress["done"] = True

    th = threading.Thread(target=interact, name="poco-interaction")
    th.start()
    budget = int(cfg.utd_ratio * cfg.online_steps)
    try:
        while learner.step < budget and not errors:
            if learner.step >= cfg.utd_ratio * progress["env_steps"] and not progress["done"]:
                threading.Event().wait(0.001)
                continue
            with lock:
                learner.learn(buf)
                if learner.step % cfg.log_every == 0:
                    sr = float(np.mean(outcomes[-20:])) if outcomes else math.nan
                    rows.append(learner.flush(progress["episodes"], sr))
    finally:
        th.join()
    if errors:
        raise errors[0]
    result = FinetuneResult(learner.actor, learner.critic, rows, [], pre, progress["env_steps"],
                            learner.step, progress["episodes"], learner.actor_updates, outcomes)
    if out_dir is not None:
        write_finetune_outputs(out_dir, cfg, result)
    return result


# --------------------------------------------------------------------------
# Ablations


ABLATABLE = {"zeta": "zeta", "beta": "beta"}


def ablate(cfg: TrainConfig, parameter: str, values: Sequence[float], actor: FlowPolicy, demos,
           out_dir=None) -> dict[float, FinetuneResult]:
    """One fine-tuning run per value, all from the same pre-trained actor and seed."""
    if parameter not in ABLATABLE:
        raise ValueError(f"can only ablate {sorted(ABLATABLE)}")
    if not values:
        raise ValueError("need at least one value")
    results = {}
    combined, combined_eval = [], []
    for v in values:
        run_cfg = cfg.replace(**{ABLATABLE[parameter]: float(v)})
        sub = None if out_dir is None else Path(out_dir) / f"{parameter}_{v:g}"
        res = finetune(run_cfg, actor, demos, sub)
        results[float(v)] = res
        body = rows_to_csv(res.rows, METRICS_HEADER).splitlines()[1:]
        combined += [f"{v!r},{line}" for line in body]
        ebody = rows_to_csv(res.evals, EVAL_HEADER).splitlines()[1:]
        combined_eval += [f"{v!r},{line}" for line in ebody]
    if out_dir is not None:
        out = Path(out_dir)
        (out / f"ablation_{parameter}.csv").write_text(
            ",".join(("value",) + METRICS_HEADER) + "\n" + "".join(l + "\n" for l in combined))
        (out / f"ablation_{parameter}_eval.csv").write_text(
            ",".join(("value",) + EVAL_HEADER) + "\n" + "".join(l + "\n" for l in combined_eval))
    return results


def load_actor(path) -> FlowPolicy:
    return load_policy(path)
