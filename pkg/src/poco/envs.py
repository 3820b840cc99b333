"""Toy sparse-reward reaching tasks on the plane, with scripted experts.

All tasks share first-order dynamics ``p' = clip(p + 0.05 * a)`` on the square
workspace ``[-1, 1]^2``; the observation is the position itself.

* ``point_reach``: one goal disc to the right of the start region.
* ``bimodal_reach``: two mirror-image goals; either one ends the episode.
* ``channel_insert``: the goal sits at the end of a narrow corridor cut into a
  wall; motion into a wall loses its normal component.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

ENV_NAMES = ("point_reach", "channel_insert", "bimodal_reach")
# uniform action noise of the scripted demonstrator; large enough that cloned
# policies leave room for fine-tuning, small enough that the expert still succeeds
DEFAULT_DEMO_NOISE = 1.5


@dataclass(frozen=True)
class EnvSpec:
    name: str
    horizon: int = 50
    reward_convention: str = "neg_one_zero"
    step_gain: float = 0.05
    workspace: float = 1.0
    start_center: tuple[float, float] = (-0.5, 0.0)
    start_half_width: float = 0.25
    goals: tuple[tuple[float, float], ...] = ((0.5, 0.0),)
    goal_radius: float = 0.05
    # channel_insert geometry: wall face at x = wall_x, corridor |y| <= width/2 up to channel_end
    wall_x: float = 0.0
    channel_width: float = 0.12
    channel_end: float = 0.45
    # bimodal expert: goals whose distances differ by less than this count as tied
    tie_band: float = 0.03
    state_dim: int = field(default=2, init=False)
    action_dim: int = field(default=2, init=False)

    def __post_init__(self):
        if self.name not in ENV_NAMES:
            raise ValueError(f"unknown environment {self.name!r}")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.reward_convention not in ("neg_one_zero", "success_bonus"):
            raise ValueError(f"unknown reward convention {self.reward_convention!r}")
        w = self.workspace
        for g in self.goals:
            if max(abs(g[0]), abs(g[1])) + self.goal_radius > w:
                raise ValueError("goal region must lie inside the workspace")
        lo = np.subtract(self.start_center, self.start_half_width)
        hi = np.add(self.start_center, self.start_half_width)
        if lo.min() < -w or hi.max() > w:
            raise ValueError("start region must lie inside the workspace")
        if self.name == "channel_insert" and hi[0] >= self.wall_x:
            raise ValueError("start region must lie left of the wall")


def make_env(name: str, **overrides) -> EnvSpec:
    if name not in ENV_NAMES:
        raise ValueError(f"unknown environment {name!r}")
    base = {
        "point_reach": dict(horizon=27),
        "bimodal_reach": dict(horizon=40, goals=((0.5, 0.4), (0.5, -0.4))),
        # the corridor funnels motion and its end wall stops overshoot, so the
        # tolerance is tighter here to leave BC the same headroom as point_reach
        "channel_insert": dict(horizon=50, goals=((0.35, 0.0),), goal_radius=0.025),
    }[name]
    return EnvSpec(name, **(base | overrides))


@dataclass(frozen=True)
class EnvState:
    position: np.ndarray
    step: int = 0
    done: bool = False
    success: bool = False

    @property
    def obs(self) -> np.ndarray:
        return self.position


def reset(spec: EnvSpec, seed) -> EnvState:
    """Uniform start inside the start square; ``seed`` is an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pos = np.asarray(spec.start_center) + rng.uniform(-spec.start_half_width, spec.start_half_width, 2)
    return EnvState(pos.astype(np.float64))


def in_free_space(spec: EnvSpec, pos: np.ndarray) -> np.ndarray:
    """Boolean mask over rows of ``pos``; only channel_insert has walls."""
    pos = np.atleast_2d(pos)
    if spec.name != "channel_insert":
        return np.ones(len(pos), dtype=bool)
    x, y = pos[:, 0], pos[:, 1]
    in_channel = (x <= spec.channel_end) & (np.abs(y) <= spec.channel_width / 2)
    return (x < spec.wall_x) | in_channel


def move(spec: EnvSpec, pos: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Vectorized dynamics for rows of positions and actions."""
    pos = np.atleast_2d(pos)
    d = spec.step_gain * np.clip(np.atleast_2d(actions), -1.0, 1.0)
    w = spec.workspace
    full = np.clip(pos + d, -w, w)
    if spec.name != "channel_insert":
        return full
    only_x = np.clip(pos + d * [1.0, 0.0], -w, w)
    only_y = np.clip(pos + d * [0.0, 1.0], -w, w)
    ok_full, ok_x, ok_y = (in_free_space(spec, p) for p in (full, only_x, only_y))
    out = pos.copy()
    # blocked along y: keep the x motion; blocked along x: keep the y motion
    out = np.where((ok_x & ~ok_y)[:, None], only_x, out)
    out = np.where((ok_y & ~ok_x)[:, None], only_y, out)
    out = np.where((ok_x & ok_y & ~ok_full)[:, None], only_x, out)
    return np.where(ok_full[:, None], full, out)


def at_goal(spec: EnvSpec, pos: np.ndarray) -> np.ndarray:
    pos = np.atleast_2d(pos)
    goals = np.asarray(spec.goals)
    dist = np.linalg.norm(pos[:, None, :] - goals[None], axis=-1)
    return (dist <= spec.goal_radius).any(axis=1)


def reward_for(spec: EnvSpec, success: np.ndarray) -> np.ndarray:
    if spec.reward_convention == "neg_one_zero":
        return np.where(success, 0.0, -1.0)
    return np.where(success, 1.0, -0.01)


def step(spec: EnvSpec, state: EnvState, action) -> tuple[EnvState, float, bool]:
    if state.done:
        raise RuntimeError("cannot step an episode that has ended")
    pos = move(spec, state.position, np.asarray(action, dtype=np.float64))[0]
    success = bool(at_goal(spec, pos)[0])
    t = state.step + 1
    done = success or t >= spec.horizon
    reward = float(reward_for(spec, np.array(success)))
    return EnvState(pos, t, done, success), reward, done


def expert_target(spec: EnvSpec, pos: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Point the scripted expert is heading for from each row of ``pos``."""
    pos = np.atleast_2d(pos)
    goals = np.asarray(spec.goals)
    if spec.name == "bimodal_reach":
        dist = np.linalg.norm(pos[:, None, :] - goals[None], axis=-1)
        pick = dist.argmin(axis=1)
        tied = np.abs(dist[:, 0] - dist[:, 1]) < spec.tie_band
        if rng is not None and tied.any():
            pick = np.where(tied, rng.integers(0, 2, size=len(pos)), pick)
        return goals[pick]
    target = np.broadcast_to(goals[0], pos.shape).copy()
    if spec.name == "channel_insert":
        outside = (pos[:, 0] < spec.wall_x) & (np.abs(pos[:, 1]) > spec.channel_width / 4)
        mouth = np.array([spec.wall_x - 0.1, 0.0])
        target[outside] = mouth
    return target


def expert_action(spec: EnvSpec, state_or_pos, rng: np.random.Generator,
                  noise_scale: float = 0.0, gain: float = 10.0) -> np.ndarray:
    """Proportional controller toward the expert target, plus uniform noise."""
    pos = state_or_pos.position if isinstance(state_or_pos, EnvState) else np.asarray(state_or_pos)
    single = pos.ndim == 1
    pos = np.atleast_2d(pos)
    a = gain * (expert_target(spec, pos, rng) - pos)
    if noise_scale > 0:
        a = a + rng.uniform(-noise_scale, noise_scale, size=a.shape)
    # float32-representable so stored demos replay exactly
    a = np.clip(a, -1.0, 1.0).astype(np.float32).astype(np.float64)
    return a[0] if single else a


def rollout(spec: EnvSpec, policy_fn, seed, T: int = 1):
    """Run one episode; ``policy_fn(obs)`` returns a flat chunk of ``T`` actions.

    Returns ``(states, actions, rewards, success)`` with one row per env step.
    """
    st = reset(spec, seed)
    S, Acts, R = [], [], []
    while not st.done:
        chunk = np.asarray(policy_fn(st.obs)).reshape(T, spec.action_dim)
        for a in chunk:
            S.append(st.position)
            Acts.append(a)
            st, r, _ = step(spec, st, a)
            R.append(r)
            if st.done:
                break
    return np.array(S), np.array(Acts), np.array(R), st.success


def collect_demos(spec: EnvSpec, n_episodes: int, seed: int, noise_scale: float = DEFAULT_DEMO_NOISE):
    """Successful expert episodes as lists of :class:`~poco.replay.StepRecord`."""
    from .replay import StepRecord

    if n_episodes < 1:
        raise ValueError("need at least one episode")
    rng = np.random.default_rng(seed)
    episodes = []
    attempts = 0
    while len(episodes) < n_episodes:
        if attempts >= 10 * n_episodes:
            raise RuntimeError(f"only {len(episodes)} of {n_episodes} expert rollouts succeeded")
        attempts += 1
        S, Acts, R, ok = rollout(spec, lambda s: expert_action(spec, s, rng, noise_scale), rng)
        if not ok:
            continue
        eid = len(episodes)
        episodes.append([
            StepRecord(S[i].astype(np.float32), Acts[i].astype(np.float32), float(R[i]),
                       i == len(S) - 1, eid, i)
            for i in range(len(S))
        ])
    return episodes


def with_overrides(spec: EnvSpec, **kw) -> EnvSpec:
    return replace(spec, **kw)
