import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from poco import replay as rp
from poco.replay import DemoParseError, ReplayBuffer, StepRecord


def make_episode(n, eid=0, done=True, state_dim=2, action_dim=2, rng=None, success=True):
    """States encode (episode, step) so windows can be traced back to their origin."""
    recs = []
    for i in range(n):
        state = np.zeros(state_dim, dtype=np.float32)
        state[0], state[1 % state_dim] = eid, i
        action = (rng.uniform(-1, 1, action_dim) if rng is not None
                  else np.full(action_dim, i / 100)).astype(np.float32)
        last = i == n - 1
        reward = 0.0 if (last and done and success) else -1.0
        recs.append(StepRecord(state, action, reward, done and last, eid, i))
    return recs


class TestWindows:
    def test_exact_division(self):
        w = rp.episode_windows(make_episode(12), 4)
        np.testing.assert_array_equal(w.states[:, 1], [0, 4, 8])
        np.testing.assert_array_equal(w.lengths, [4, 4, 4])
        np.testing.assert_array_equal(w.terminals, [False, False, True])

    def test_terminal_short_window(self):
        w = rp.episode_windows(make_episode(10), 4)
        np.testing.assert_array_equal(w.states[:, 1], [0, 4, 8])
        last = w[2]
        assert last.terminal and len(last.rewards) == 2
        np.testing.assert_array_equal(last.rewards, [-1.0, 0.0])
        # padded with the final executed action
        np.testing.assert_array_equal(last.chunk.reshape(4, 2)[2:], np.full((2, 2), 0.09, np.float32))

    def test_next_state_is_after_window(self):
        w = rp.episode_windows(make_episode(12), 4)
        np.testing.assert_array_equal(w.next_states[:2, 1], [4, 8])

    def test_truncated_episode_drops_unbootstrappable_tail(self):
        w = rp.episode_windows(make_episode(12, done=False), 4)
        np.testing.assert_array_equal(w.states[:, 1], [0, 4])
        assert not w.terminals.any()

    def test_chunk_is_consecutive_actions(self):
        recs = make_episode(9, rng=np.random.default_rng(0))
        w = rp.episode_windows(recs, 3)
        np.testing.assert_array_equal(w.chunks[1], np.concatenate([r.action for r in recs[3:6]]))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 8), st.booleans())
    def test_alignment_and_boundaries(self, n, T, done):
        w = rp.episode_windows(make_episode(n, done=done), T)
        if w is None:
            assert not done and n <= T
            return
        assert np.all(w.states[:, 1] % T == 0)
        assert np.all(w.lengths[~w.terminals] == T)
        assert np.all(w.lengths >= 1) and np.all(w.lengths <= T)
        assert np.all(w.states[:, 1] + w.lengths <= n)
        assert w.terminals.sum() == (1 if done else 0)
        expected = -(-n // T) if done else (n - 1) // T
        assert len(w) == expected


class TestBuffer:
    def test_empty_episode_is_noop(self):
        buf = ReplayBuffer(4)
        buf.push_episode([])
        assert len(buf) == 0 and buf.n_windows == 0

    def test_empty_buffer_sampling_fails(self):
        with pytest.raises(ValueError):
            ReplayBuffer(4).sample_batch(3, np.random.default_rng(0))

    def test_non_contiguous_rejected(self):
        recs = make_episode(5)
        with pytest.raises(ValueError):
            ReplayBuffer(4).push_episode(recs[:2] + recs[3:])

    def test_singleton_window(self):
        buf = ReplayBuffer(4)
        buf.push_episode(make_episode(3))
        b = buf.sample_batch(16, np.random.default_rng(0))
        assert len(b) == 16
        assert np.all(b.states == b.states[0]) and np.all(b.chunks == b.chunks[0])

    def test_deterministic(self):
        buf = ReplayBuffer(4)
        for e in range(3):
            buf.push_episode(make_episode(13, e))
        a = buf.sample_batch(32, np.random.default_rng(5))
        b = buf.sample_batch(32, np.random.default_rng(5))
        assert a.states.tobytes() == b.states.tobytes() and a.chunks.tobytes() == b.chunks.tobytes()

    def test_uniform_over_windows(self):
        buf = ReplayBuffer(4)
        for e in range(4):
            buf.push_episode(make_episode(12, e))
        n_win = buf.n_windows
        assert n_win == 12
        b = buf.sample_batch(100_000, np.random.default_rng(0))
        key = (b.states[:, 0] * 100 + b.states[:, 1]).astype(int)
        _, counts = np.unique(key, return_counts=True)
        assert len(counts) == n_win
        p = 1 / n_win
        sigma = np.sqrt(100_000 * p * (1 - p))
        assert np.all(np.abs(counts - 100_000 * p) <= 3 * sigma)
        assert chisquare(counts).pvalue > 1e-3

    def test_fifo_eviction_whole_episodes(self):
        buf = ReplayBuffer(4, capacity=25)
        for e in range(4):
            buf.push_episode(make_episode(10, e))
        assert len(buf) == 20
        assert [ep[0][0].episode_id for ep in buf.episodes] == [2, 3]
        assert set(np.unique(buf.windows().states[:, 0])) == {2.0, 3.0}

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 30), min_size=1, max_size=20), st.integers(30, 100))
    def test_capacity_never_exceeded(self, lengths, cap):
        buf = ReplayBuffer(5, capacity=cap)
        for e, n in enumerate(lengths):
            buf.push_episode(make_episode(n, e))
            assert len(buf) <= cap
            assert all(len(ep) == lengths[ep[0].episode_id] for ep, _ in buf.episodes)

    def test_oversized_episode_rejected(self):
        with pytest.raises(ValueError):
            ReplayBuffer(4, capacity=5).push_episode(make_episode(6))


class TestDemoFiles:
    def _episodes(self, rng, n_eps=3, sd=2, ad=2):
        return [make_episode(int(rng.integers(3, 12)), e, state_dim=sd, action_dim=ad, rng=rng)
                for e in range(n_eps)]

    def test_round_trip_byte_identical(self, tmp_path):
        eps = self._episodes(np.random.default_rng(0))
        rp.save_demos(tmp_path / "a.txt", eps, 2, 2)
        loaded, sd, ad = rp.load_demos(tmp_path / "a.txt")
        assert (sd, ad) == (2, 2)
        rp.save_demos(tmp_path / "b.txt", loaded, sd, ad)
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
        for e0, e1 in zip(eps, loaded):
            for r0, r1 in zip(e0, e1):
                assert r0.state.tobytes() == r1.state.tobytes()
                assert r0.action.tobytes() == r1.action.tobytes()
                assert (r0.reward, r0.done, r0.episode_id, r0.step_index) == \
                    (r1.reward, r1.done, r1.episode_id, r1.step_index)

    def test_header_and_line_format(self, tmp_path):
        rp.save_demos(tmp_path / "d.txt", [make_episode(2)], 2, 2)
        lines = (tmp_path / "d.txt").read_text().splitlines()
        assert lines[0] == "poco-demos v1 state_dim=2 action_dim=2"
        assert lines[2].split()[:4] == ["0", "1", "1", "0"]

    def test_empty_set(self, tmp_path):
        rp.save_demos(tmp_path / "e.txt", [], 3, 1)
        assert rp.load_demos(tmp_path / "e.txt") == ([], 3, 1)

    def test_pick_cube_scale(self, tmp_path):
        # 40 episodes, 3471 transitions in total, 9-dim states and 4-dim actions
        rng = np.random.default_rng(1)
        lengths = np.full(40, 3471 // 40)
        lengths[: 3471 - lengths.sum()] += 1
        eps = [make_episode(int(n), e, state_dim=9, action_dim=4, rng=rng) for e, n in enumerate(lengths)]
        for ep in eps:
            for r in ep:
                r.state[:] = rng.standard_normal(9).astype(np.float32)
        rp.save_demos(tmp_path / "pc.txt", eps, 9, 4)
        loaded, sd, ad = rp.load_demos(tmp_path / "pc.txt")
        assert len(loaded) == 40 and sum(map(len, loaded)) == 3471 and (sd, ad) == (9, 4)
        flat0 = np.concatenate([np.r_[r.state, r.action] for ep in eps for r in ep])
        flat1 = np.concatenate([np.r_[r.state, r.action] for ep in loaded for r in ep])
        assert flat0.tobytes() == flat1.tobytes()

    @pytest.mark.parametrize("body,lineno", [
        ("bogus header\n", 1),
        ("poco-demos v1 state_dim=2 action_dim=2\n0 0 0 -1 0 0 0\n", 2),
        ("poco-demos v1 state_dim=2 action_dim=2\n0 0 0 -1 0 0 0 0\n0 0 1 0 0 0 0 0\n", 3),
        ("poco-demos v1 state_dim=2 action_dim=2\n0 0 2 -1 0 0 0 0\n", 2),
        ("poco-demos v1 state_dim=2 action_dim=2\n0 0 0 -1 0 x 0 0\n", 2),
    ])
    def test_malformed_reports_line(self, tmp_path, body, lineno):
        (tmp_path / "bad.txt").write_text(body)
        with pytest.raises(DemoParseError) as exc:
            rp.load_demos(tmp_path / "bad.txt")
        assert exc.value.lineno == lineno
