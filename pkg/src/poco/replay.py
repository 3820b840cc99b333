"""Episode store with chunk-aligned windows, plus the text demo format."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DemoParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class StepRecord:
    state: np.ndarray
    action: np.ndarray
    reward: float
    done: bool
    episode_id: int
    step_index: int


@dataclass(frozen=True)
class ChunkTransition:
    state: np.ndarray
    chunk: np.ndarray
    rewards: np.ndarray
    terminal: bool
    next_state: np.ndarray


@dataclass
class ChunkBatch:
    """Struct-of-arrays view of chunk transitions; rewards are right-padded with 0."""

    states: np.ndarray
    chunks: np.ndarray
    rewards: np.ndarray
    lengths: np.ndarray
    terminals: np.ndarray
    next_states: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, i) -> ChunkTransition:
        n = int(self.lengths[i])
        return ChunkTransition(self.states[i], self.chunks[i], self.rewards[i, :n],
                               bool(self.terminals[i]), self.next_states[i])

    def take(self, idx) -> "ChunkBatch":
        return ChunkBatch(*(getattr(self, f)[idx] for f in _BATCH_FIELDS))

    @classmethod
    def concat(cls, batches: Sequence["ChunkBatch"]) -> "ChunkBatch":
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in _BATCH_FIELDS))

    @classmethod
    def from_transitions(cls, transitions: Sequence[ChunkTransition], T: int) -> "ChunkBatch":
        n = len(transitions)
        rewards = np.zeros((n, T))
        lengths = np.zeros(n, dtype=np.int64)
        for i, tr in enumerate(transitions):
            rewards[i, :len(tr.rewards)] = tr.rewards
            lengths[i] = len(tr.rewards)
        return cls(np.stack([t.state for t in transitions]), np.stack([t.chunk for t in transitions]),
                   rewards, lengths, np.array([t.terminal for t in transitions]),
                   np.stack([t.next_state for t in transitions]))


_BATCH_FIELDS = ("states", "chunks", "rewards", "lengths", "terminals", "next_states")


def episode_windows(records: Sequence[StepRecord], T: int) -> ChunkBatch | None:
    """Windows starting at steps 0, T, 2T, ... that stay inside the episode.

    A window is kept if it holds T steps and a following state exists, or if it
    ends on the episode's ``done`` record (shorter window, no bootstrap).
    """
    n = len(records)
    if n == 0:
        return None
    S = np.stack([r.state for r in records]).astype(np.float32)
    Acts = np.stack([r.action for r in records]).astype(np.float32)
    R = np.array([r.reward for r in records], dtype=np.float64)
    done = records[-1].done
    rows = []
    for start in range(0, n, T):
        end = min(start + T, n)
        terminal = done and end == n
        if not terminal and end >= n:
            # no state after the window to bootstrap from
            continue
        L = end - start
        chunk = Acts[start:end]
        if L < T:
            # pad the action chunk with its last action; never executed past termination
            chunk = np.concatenate([chunk, np.repeat(chunk[-1:], T - L, axis=0)])
        rew = np.zeros(T)
        rew[:L] = R[start:end]
        nxt = S[end] if end < n else S[n - 1]
        rows.append((S[start], chunk.reshape(-1), rew, L, terminal, nxt))
    if not rows:
        return None
    cols = list(zip(*rows))
    return ChunkBatch(np.stack(cols[0]), np.stack(cols[1]), np.stack(cols[2]),
                      np.array(cols[3], dtype=np.int64), np.array(cols[4], dtype=bool),
                      np.stack(cols[5]))


def check_episode(records: Sequence[StepRecord]) -> None:
    for i, r in enumerate(records):
        if r.step_index != records[0].step_index + i:
            raise ValueError(f"non-contiguous step index at position {i}: {r.step_index}")
        if r.episode_id != records[0].episode_id:
            raise ValueError("records span more than one episode")
        if r.done and i != len(records) - 1:
            raise ValueError("done flag before the last record")


class ReplayBuffer:
    """Single pooled buffer holding demonstrations and online episodes.

    Capacity is counted in steps; eviction drops whole episodes, oldest first.
    """

    def __init__(self, T: int, capacity: int = 1_000_000):
        self.T = T
        self.capacity = capacity
        self.episodes: deque[tuple[list[StepRecord], ChunkBatch | None]] = deque()
        self.n_steps = 0
        self._cache: ChunkBatch | None = None

    def __len__(self) -> int:
        return self.n_steps

    @property
    def n_windows(self) -> int:
        return sum(0 if w is None else len(w) for _, w in self.episodes)

    def push_episode(self, records: Sequence[StepRecord]) -> None:
        records = list(records)
        if not records:
            return
        check_episode(records)
        if len(records) > self.capacity:
            raise ValueError(f"episode of {len(records)} steps exceeds buffer capacity {self.capacity}")
        self.episodes.append((records, episode_windows(records, self.T)))
        self.n_steps += len(records)
        while self.n_steps > self.capacity:
            old, _ = self.episodes.popleft()
            self.n_steps -= len(old)
        self._cache = None

    def windows(self) -> ChunkBatch:
        if self._cache is None:
            parts = [w for _, w in self.episodes if w is not None]
            if not parts:
                raise ValueError("buffer holds no complete chunk window")
            self._cache = ChunkBatch.concat(parts)
        return self._cache

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> ChunkBatch:
        """Uniform draw with replacement over all chunk-aligned windows."""
        pool = self.windows()
        return pool.take(rng.integers(0, len(pool), size=batch_size))


# --------------------------------------------------------------------------
# Demo files


def _fmt(x) -> str:
    return "%.9g" % x


def save_demos(path, episodes: Iterable[Sequence[StepRecord]], state_dim: int, action_dim: int) -> None:
    lines = [f"poco-demos v1 state_dim={state_dim} action_dim={action_dim}"]
    for ep in episodes:
        for r in ep:
            fields = [str(r.episode_id), str(r.step_index), "1" if r.done else "0", _fmt(r.reward)]
            fields += [_fmt(v) for v in np.asarray(r.state).ravel()]
            fields += [_fmt(v) for v in np.asarray(r.action).ravel()]
            lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_demos(path) -> tuple[list[list[StepRecord]], int, int]:
    """Parse a demo file; returns ``(episodes, state_dim, action_dim)``."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise DemoParseError(1, "missing header")
    head = lines[0].split()
    try:
        if head[:2] != ["poco-demos", "v1"] or len(head) != 4:
            raise ValueError
        kv = dict(h.split("=", 1) for h in head[2:])
        sd, ad = int(kv["state_dim"]), int(kv["action_dim"])
    except (ValueError, KeyError):
        raise DemoParseError(1, f"bad header {lines[0]!r}") from None
    episodes: list[list[StepRecord]] = []
    width = 4 + sd + ad
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != width:
            raise DemoParseError(lineno, f"expected {width} fields, found {len(parts)}")
        try:
            eid, idx = int(parts[0]), int(parts[1])
            if parts[2] not in ("0", "1"):
                raise ValueError("done flag must be 0 or 1")
            vals = np.array([float(p) for p in parts[3:]])
        except ValueError as exc:
            raise DemoParseError(lineno, str(exc)) from None
        rec = StepRecord(vals[1:1 + sd].astype(np.float32), vals[1 + sd:].astype(np.float32),
                         float(vals[0]), parts[2] == "1", eid, idx)
        if episodes and episodes[-1][-1].episode_id == eid:
            prev = episodes[-1][-1]
            if prev.done or idx != prev.step_index + 1:
                raise DemoParseError(lineno, f"non-contiguous step in episode {eid}")
            episodes[-1].append(rec)
        else:
            episodes.append([rec])
    return episodes, sd, ad
