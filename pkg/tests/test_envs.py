import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poco import envs
from poco.envs import EnvState


@pytest.fixture(params=envs.ENV_NAMES)
def spec(request):
    return envs.make_env(request.param)


class TestReset:
    def test_deterministic(self, spec):
        assert envs.reset(spec, 3).position.tobytes() == envs.reset(spec, 3).position.tobytes()

    def test_inside_start_region(self, spec):
        rng = np.random.default_rng(0)
        pos = np.stack([envs.reset(spec, rng).position for _ in range(1000)])
        assert np.all(np.abs(pos - spec.start_center) <= spec.start_half_width)
        assert np.all(envs.in_free_space(spec, pos))

    def test_configurable_start_width(self):
        spec = envs.make_env("point_reach", start_half_width=0.1)
        rng = np.random.default_rng(1)
        pos = np.stack([envs.reset(spec, rng).position for _ in range(200)])
        assert np.all(np.abs(pos - spec.start_center) <= 0.1)


class TestStep:
    def test_zero_action(self, spec):
        st0 = envs.reset(spec, 0)
        st1, r, done = envs.step(spec, st0, np.zeros(2))
        np.testing.assert_array_equal(st1.position, st0.position)
        assert st1.step == 1 and r == -1.0 and not done

    def test_goal_terminates_with_zero_reward(self, spec):
        g = np.asarray(spec.goals[0])
        st0 = EnvState(g - np.array([0.03, 0.0]))
        st1, r, done = envs.step(spec, st0, np.array([0.6, 0.0]))
        assert done and st1.success and r == 0.0

    def test_success_bonus_convention(self):
        spec = envs.make_env("point_reach", reward_convention="success_bonus")
        _, r, _ = envs.step(spec, EnvState(np.array([0.0, 0.0])), np.zeros(2))
        assert r == -0.01
        _, r, _ = envs.step(spec, EnvState(np.array([0.5, 0.0])), np.zeros(2))
        assert r == 1.0

    def test_timeout(self):
        spec = envs.make_env("point_reach", horizon=3)
        st0 = envs.reset(spec, 0)
        for _ in range(3):
            st0, _, done = envs.step(spec, st0, np.zeros(2))
        assert done and not st0.success
        with pytest.raises(RuntimeError):
            envs.step(spec, st0, np.zeros(2))

    def test_actions_clamped(self):
        spec = envs.make_env("point_reach")
        st1, _, _ = envs.step(spec, EnvState(np.zeros(2)), np.array([5.0, -5.0]))
        np.testing.assert_allclose(st1.position, [0.05, -0.05])

    def test_workspace_bounds(self):
        spec = envs.make_env("point_reach")
        st1, _, _ = envs.step(spec, EnvState(np.array([0.99, -0.99])), np.array([1.0, -1.0]))
        np.testing.assert_allclose(st1.position, [1.0, -1.0])

    def test_wall_projection(self):
        spec = envs.make_env("channel_insert")
        # just left of the wall, above the corridor: x motion blocked, y motion kept
        p = np.array([-0.02, 0.3])
        st1, _, _ = envs.step(spec, EnvState(p), np.array([1.0, 0.4]))
        np.testing.assert_allclose(st1.position, [-0.02, 0.32])
        # inside the corridor pushing into its ceiling: y blocked, x kept
        p = np.array([0.2, 0.04])
        st1, _, _ = envs.step(spec, EnvState(p), np.array([0.4, 1.0]))
        np.testing.assert_allclose(st1.position, [0.22, 0.04])

    def test_corridor_entry(self):
        spec = envs.make_env("channel_insert")
        st1, _, _ = envs.step(spec, EnvState(np.array([-0.02, 0.0])), np.array([1.0, 0.0]))
        np.testing.assert_allclose(st1.position, [0.03, 0.0])

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-3, 3), st.floats(-3, 3))
    def test_never_enters_walls(self, x, y, ax, ay):
        spec = envs.make_env("channel_insert")
        p = np.array([[x, y]])
        if not envs.in_free_space(spec, p)[0]:
            return
        q = envs.move(spec, p, np.array([[ax, ay]]))
        assert envs.in_free_space(spec, q)[0]
        assert np.all(np.abs(q) <= 1.0)


class TestExpert:
    def test_at_goal_is_noise_only(self):
        spec = envs.make_env("point_reach")
        g = np.asarray(spec.goals[0])
        a = envs.expert_action(spec, g, np.random.default_rng(0), 0.0)
        np.testing.assert_array_equal(a, [0.0, 0.0])
        a = envs.expert_action(spec, g, np.random.default_rng(0), 0.2)
        assert np.all(np.abs(a) <= 0.2)

    def test_noise_free_reaches_goal_from_grid(self):
        spec = envs.make_env("point_reach")
        lo = np.subtract(spec.start_center, spec.start_half_width)
        hi = np.add(spec.start_center, spec.start_half_width)
        for x in np.linspace(lo[0], hi[0], 10):
            for y in np.linspace(lo[1], hi[1], 10):
                st0 = EnvState(np.array([x, y]))
                while not st0.done:
                    st0, _, _ = envs.step(spec, st0, envs.expert_action(spec, st0, None, 0.0))
                assert st0.success

    def test_noise_free_channel_expert(self):
        spec = envs.make_env("channel_insert")
        rng = np.random.default_rng(0)
        for _ in range(100):
            _, _, _, ok = envs.rollout(spec, lambda s: envs.expert_action(spec, s, rng, 0.0), rng)
            assert ok

    def test_bimodal_split(self):
        spec = envs.make_env("bimodal_reach")
        ends = []
        for seed in range(40):
            rng = np.random.default_rng(seed)
            st0 = EnvState(np.array(spec.start_center, dtype=float))
            while not st0.done:
                st0, _, _ = envs.step(spec, st0, envs.expert_action(spec, st0, rng, 0.0))
            assert st0.success
            ends.append(np.sign(st0.position[1]))
        frac_up = np.mean(np.array(ends) > 0)
        assert 0.2 <= frac_up <= 0.8

    def test_bimodal_equal_return(self):
        # mirrored starts head to mirrored goals and need the same number of steps
        spec = envs.make_env("bimodal_reach")
        for y in (0.05, 0.15, 0.25):
            returns, ends = [], []
            for sign in (1, -1):
                st0 = EnvState(np.array([-0.5, sign * y]))
                ret = 0.0
                while not st0.done:
                    st0, r, _ = envs.step(spec, st0, envs.expert_action(spec, st0, None, 0.0))
                    ret += r
                assert st0.success
                returns.append(ret)
                ends.append(np.sign(st0.position[1]))
            assert returns[0] == returns[1] and ends == [1, -1]

    def test_default_noise_success_rate(self, spec):
        rng = np.random.default_rng(123)
        wins = sum(envs.rollout(spec, lambda s: envs.expert_action(spec, s, rng, envs.DEFAULT_DEMO_NOISE), rng)[3]
                   for _ in range(500))
        assert wins / 500 >= 0.9


class TestDemos:
    def test_fifty_successes(self):
        spec = envs.make_env("point_reach")
        eps = envs.collect_demos(spec, 50, 0)
        assert len(eps) == 50
        for ep in eps:
            assert ep[-1].done and ep[-1].reward == 0.0
            assert all(r.reward == -1.0 and not r.done for r in ep[:-1])

    def test_deterministic(self):
        spec = envs.make_env("channel_insert")
        a, b = envs.collect_demos(spec, 5, 7), envs.collect_demos(spec, 5, 7)
        for ea, eb in zip(a, b):
            assert all(ra.state.tobytes() == rb.state.tobytes() and ra.action.tobytes() == rb.action.tobytes()
                       for ra, rb in zip(ea, eb))

    def test_replay_reproduces_rewards(self):
        spec = envs.make_env("channel_insert")
        for ep in envs.collect_demos(spec, 5, 1):
            # demo states are stored in float32; replaying from the exact start reproduces the episode
            st0 = EnvState(np.asarray(ep[0].state, dtype=np.float64))
            for r in ep:
                np.testing.assert_allclose(st0.position, r.state, atol=1e-6)
                st0, rew, _ = envs.step(spec, st0, r.action)
                assert rew == r.reward

    def test_return_bounds(self, spec):
        for ep in envs.collect_demos(spec, 10, 2):
            ret = sum(r.reward for r in ep)
            assert -spec.horizon <= ret <= 0

    def test_unreachable_raises(self):
        spec = envs.make_env("point_reach", horizon=2)
        with pytest.raises(RuntimeError):
            envs.collect_demos(spec, 3, 0)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            envs.make_env("point_reach", goals=((0.99, 0.0),))
        with pytest.raises(ValueError):
            envs.make_env("point_reach", horizon=0)
        with pytest.raises(ValueError):
            envs.make_env("nope")
