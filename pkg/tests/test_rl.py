"""Tests for CartPole dynamics, DQN pieces, and the federated RL loop."""

import math

import numpy as np
import pytest

from fedwb.errors import DimensionError, DomainError
from fedwb.nn import Loss, NetworkParams, forward
from fedwb.rl import (
    CartPoleState,
    DqnConfig,
    EnvParams,
    HfrlSimulation,
    Q_ACTIVATIONS,
    ReplayBuffer,
    THETA_LIMIT,
    Transition,
    X_LIMIT,
    duration_difference,
    env_step,
    epsilon_at,
    initial_state,
    is_terminal,
    moving_average,
    run_hfrl,
    select_action,
    td_update,
    write_difference_csv,
    write_durations_csv,
    write_moving_average_csv,
)

TINY = DqnConfig(eps_decay=50.0, sync_every=10, replay_capacity=64, batch_size=4,
                 learning_rate=0.01, episodes=3, max_steps=25, hidden_units=8)


def q_net_with_constant_output(q0, q1, hidden=4):
    """Two-layer net whose output is (q0, q1) for every state."""
    w1 = np.zeros((hidden, 4))
    b1 = np.ones(hidden)                 # ReLU passes the ones through
    w2 = np.zeros((2, hidden))
    b2 = np.array([q0, q1], dtype=np.float64)
    return NetworkParams([w1, w2], [b1, b2])


def reference_accelerations(state, force, p):
    """Cart-pole accelerations from the coupled Newton-Euler equations.

    Independent derivation: the pole is a uniform rod of mass m and length
    2*l pivoted on the cart, giving the 2x2 linear system

        (M+m) x'' + m l cos(t) t''  = F + m l t'^2 sin(t)
        m l cos(t) x'' + 4/3 m l^2 t'' = m g l sin(t)

    solved directly with a matrix inverse.
    """
    m, M, l, g = p.pole_mass, p.cart_mass, p.half_length, p.gravity
    t, td = state.theta, state.theta_dot
    a = np.array([[M + m, m * l * math.cos(t)],
                  [m * l * math.cos(t), 4.0 / 3.0 * m * l * l]])
    b = np.array([force + m * l * td * td * math.sin(t),
                  m * g * l * math.sin(t)])
    return np.linalg.solve(a, b)        # (x_acc, theta_acc)


class TestEnvParams:
    def test_positive_required(self):
        with pytest.raises(DomainError):
            EnvParams(half_length=0.0)
        with pytest.raises(DomainError):
            EnvParams(gravity=-9.8)


class TestEnvStep:
    def test_matches_independent_dynamics(self):
        for half_length in (0.25, 0.5, 0.75):
            p = EnvParams(half_length=half_length)
            state = CartPoleState(0.01, -0.02, 0.03, 0.04)
            for step in range(30):
                action = step % 2
                force = p.force_mag if action == 1 else -p.force_mag
                x_acc, theta_acc = reference_accelerations(state, force, p)
                x_dot = state.x_dot + p.tau * x_acc
                expected = CartPoleState(
                    state.x + p.tau * x_dot, x_dot,
                    state.theta + p.tau * (state.theta_dot + p.tau * theta_acc),
                    state.theta_dot + p.tau * theta_acc)
                nxt, reward, done = env_step(state, action, p)
                assert reward == 1.0
                assert nxt.x == pytest.approx(expected.x, abs=1e-12)
                assert nxt.x_dot == pytest.approx(expected.x_dot, abs=1e-12)
                assert nxt.theta == pytest.approx(expected.theta, abs=1e-12)
                assert nxt.theta_dot == pytest.approx(expected.theta_dot, abs=1e-12)
                if step < 10:
                    assert not done      # near-upright start survives several pushes
                if done:
                    break
                state = nxt

    def test_termination_on_angle(self):
        state = CartPoleState(0.0, 0.0, THETA_LIMIT * 0.999, 1.0)
        nxt, _, done = env_step(state, 1)
        assert done and abs(nxt.theta) > THETA_LIMIT

    def test_termination_on_position(self):
        state = CartPoleState(X_LIMIT * 0.9999, 3.0, 0.0, 0.0)
        _, _, done = env_step(state, 1)
        assert done

    def test_step_on_terminal_rejected(self):
        with pytest.raises(DomainError):
            env_step(CartPoleState(3.0, 0.0, 0.0, 0.0), 0)
        with pytest.raises(DomainError):
            env_step(CartPoleState(0.0, 0.0, 0.0, 0.0), 2)

    def test_pure_function(self):
        state = CartPoleState(0.01, 0.02, -0.03, 0.04)
        a = env_step(state, 1)
        b = env_step(state, 1)
        assert a == b

    def test_initial_state_range(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = initial_state(rng)
            assert max(abs(v) for v in (s.x, s.x_dot, s.theta, s.theta_dot)) <= 0.05
            assert not is_terminal(s)


class TestReplayBuffer:
    def transition(self, k):
        return Transition(np.full(4, float(k)), 0, None, 1.0, True)

    def test_eviction_order(self):
        buf = ReplayBuffer(5)
        for k in range(8):
            buf.push(self.transition(k))
        assert len(buf) == 5
        kept = sorted(t.state[0] for t in buf._items)
        assert kept == [3.0, 4.0, 5.0, 6.0, 7.0]

    def test_sampling_requires_enough(self):
        buf = ReplayBuffer(4)
        buf.push(self.transition(0))
        with pytest.raises(DomainError):
            buf.sample(2, np.random.default_rng(0))
        buf.push(self.transition(1))
        assert len(buf.sample(2, np.random.default_rng(0))) == 2

    def test_capacity_positive(self):
        with pytest.raises(DomainError):
            ReplayBuffer(0)


class TestEpsilonSchedule:
    def test_monotone_between_limits(self):
        cfg = DqnConfig()
        values = [epsilon_at(cfg, t) for t in range(0, 20000, 25)]
        assert values[0] <= cfg.eps_start
        assert values[-1] == pytest.approx(cfg.eps_end, abs=1e-3)
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_config_validation(self):
        with pytest.raises(DomainError):
            DqnConfig(gamma=1.5)
        with pytest.raises(DomainError):
            DqnConfig(eps_start=0.1, eps_end=0.5)
        with pytest.raises(DomainError):
            DqnConfig(replay_capacity=8, batch_size=16)
        with pytest.raises(DomainError):
            DqnConfig(loss=Loss.CROSS_ENTROPY)


class TestSelectAction:
    def test_pure_greedy(self):
        net = q_net_with_constant_output(0.2, 0.9)
        action = select_action(net, np.zeros(4), 0.0, np.random.default_rng(0))
        assert action == 1

    def test_tie_breaks_to_zero(self):
        net = q_net_with_constant_output(0.4, 0.4)
        assert select_action(net, np.zeros(4), 0.0, np.random.default_rng(1)) == 0

    def test_full_exploration_frequencies(self):
        net = q_net_with_constant_output(0.0, 1.0)
        rng = np.random.default_rng(2)
        n = 10_000
        ones = sum(select_action(net, np.zeros(4), 1.0, rng) for _ in range(n))
        sigma = math.sqrt(0.25 / n)
        assert abs(ones / n - 0.5) <= 3 * sigma

    def test_epsilon_validated(self):
        net = q_net_with_constant_output(0.0, 1.0)
        with pytest.raises(DomainError):
            select_action(net, np.zeros(4), 1.5, np.random.default_rng(0))


class TestTdUpdate:
    def test_zero_delta_leaves_params(self):
        online = q_net_with_constant_output(1.0, 1.0)
        target = q_net_with_constant_output(5.0, -3.0)
        cfg = DqnConfig(gamma=0.0, batch_size=1, replay_capacity=2,
                        hidden_units=4, learning_rate=0.1)
        batch = [Transition(np.zeros(4), 0, np.ones(4), 1.0, False)]
        updated = td_update(online, target, batch, cfg)
        for a, b in zip(updated.weights + updated.biases,
                        online.weights + online.biases):
            assert np.array_equal(a, b)

    def test_terminal_batch_ignores_target_net(self):
        rng = np.random.default_rng(3)
        online = NetworkParams.glorot((4, 6, 2), rng)
        batch = [Transition(rng.standard_normal(4), int(rng.integers(2)), None, 1.0, True)
                 for _ in range(5)]
        cfg = DqnConfig(batch_size=5, replay_capacity=8, hidden_units=6)
        t1 = NetworkParams.glorot((4, 6, 2), np.random.default_rng(4))
        t2 = NetworkParams.glorot((4, 6, 2), np.random.default_rng(5))
        u1 = td_update(online, t1, batch, cfg)
        u2 = td_update(online, t2, batch, cfg)
        for a, b in zip(u1.weights + u1.biases, u2.weights + u2.biases):
            assert np.array_equal(a, b)

    @pytest.mark.parametrize("loss", [Loss.HUBER, Loss.SQUARED_ERROR])
    def test_matches_finite_difference_gradient(self, loss):
        rng = np.random.default_rng(6)
        online = NetworkParams.glorot((4, 5, 2), rng)
        target = NetworkParams.glorot((4, 5, 2), np.random.default_rng(7))
        tr = Transition(rng.standard_normal(4), 1, rng.standard_normal(4), 1.0, False)
        cfg = DqnConfig(gamma=0.9, batch_size=1, replay_capacity=2,
                        hidden_units=5, learning_rate=1.0, loss=loss)

        q_next, _ = forward(target, tr.next_state, Q_ACTIVATIONS)
        y = tr.reward + cfg.gamma * q_next.max()

        def td_loss(params):
            q, _ = forward(params, tr.state, Q_ACTIVATIONS)
            delta = q[tr.action] - y
            return 0.5 * delta ** 2 if (loss is Loss.SQUARED_ERROR or abs(delta) <= 1) \
                else abs(delta) - 0.5

        updated = td_update(online, target, [tr], cfg)
        h = 1e-5
        worst = 0.0
        for arr, new in zip(online.weights + online.biases,
                            updated.weights + updated.biases):
            flat, new_flat = arr.ravel(), new.ravel()
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = td_loss(online)
                flat[k] = orig - h
                down = td_loss(online)
                flat[k] = orig
                numeric = (up - down) / (2 * h)
                analytic = (orig - new_flat[k]) / cfg.learning_rate
                worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-8))
        assert worst < 1e-4

    def test_empty_batch_rejected(self):
        cfg = DqnConfig(batch_size=1, replay_capacity=2, hidden_units=4)
        net = q_net_with_constant_output(0.0, 0.0)
        with pytest.raises(DomainError):
            td_update(net, net, [], cfg)


class TestHfrlSimulation:
    def test_durations_within_bounds(self):
        result = run_hfrl([EnvParams(half_length=0.25), EnvParams(half_length=0.75)],
                          TINY, method="avg", seed=0)
        assert result.durations.shape == (2, 3)
        assert result.durations.min() >= 1
        assert result.durations.max() <= TINY.max_steps
        assert result.epsilons.shape == (2, 3)

    def test_target_changes_only_at_sync_boundaries(self):
        sim = HfrlSimulation([EnvParams()], TINY, method="avg", seed=1)
        previous = [p.copy() for p in (sim.agents[0].target,)]
        for step in range(1, 31):
            sim.step()
            target = sim.agents[0].target
            changed = any(not np.array_equal(a, b) for a, b in zip(
                previous[0].weights + previous[0].biases,
                target.weights + target.biases))
            assert changed == (step % TINY.sync_every == 0)
            previous = [target.copy()]
        assert sim.sync_steps == [10, 20, 30]

    def test_post_aggregation_coherence(self):
        sim = HfrlSimulation([EnvParams(half_length=h) for h in (0.25, 0.5, 0.75)],
                             TINY, method="wb", seed=2)
        for _ in range(TINY.sync_every):
            sim.step()
        ref = sim.agents[0].online
        for agent in sim.agents[1:]:
            for a, b in zip(ref.weights + ref.biases,
                            agent.online.weights + agent.online.biases):
                assert np.array_equal(a, b)
            for a, b in zip(agent.online.weights + agent.online.biases,
                            agent.target.weights + agent.target.biases):
                assert np.array_equal(a, b)

    def test_methods_identical_before_first_fusion(self):
        sims = [HfrlSimulation([EnvParams(), EnvParams()], TINY, method=m, seed=3)
                for m in ("wb", "avg")]
        for _ in range(TINY.sync_every - 1):
            for sim in sims:
                sim.step()
        a, b = sims[0].agents[0].online, sims[1].agents[0].online
        for x, y in zip(a.weights + a.biases, b.weights + b.biases):
            assert np.array_equal(x, y)

    def test_single_agent_fusion_is_identity(self):
        results = [run_hfrl([EnvParams()], TINY, method=m, seed=4)
                   for m in ("wb", "avg")]
        assert np.array_equal(results[0].durations, results[1].durations)

    def test_deterministic(self):
        a = run_hfrl([EnvParams()], TINY, method="wb", seed=5)
        b = run_hfrl([EnvParams()], TINY, method="wb", seed=5)
        assert np.array_equal(a.durations, b.durations)
        assert np.array_equal(a.epsilons, b.epsilons)

    def test_bad_method(self):
        with pytest.raises(DomainError):
            HfrlSimulation([EnvParams()], TINY, method="mean", seed=0)
        with pytest.raises(DomainError):
            HfrlSimulation([], TINY, method="wb", seed=0)


class TestMovingAverage:
    def test_constant_series(self):
        out = moving_average(np.full(120, 7.0), 50)
        assert np.allclose(out, 7.0)

    def test_window_one_is_identity(self):
        series = np.arange(10.0)
        assert np.array_equal(moving_average(series, 1), series)

    def test_arithmetic_series(self):
        out = moving_average(np.arange(1.0, 101.0), 50)
        assert out[-1] == pytest.approx(75.5)
        assert out[0] == 1.0
        assert out[1] == 1.5

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            moving_average([], 50)


class TestDurationDifference:
    def test_identical_series(self):
        s = np.array([3.0, 4.0, 5.0])
        assert np.array_equal(duration_difference(s, s), np.zeros(3))

    def test_constant_offset(self):
        avg = np.array([10.0, 20.0, 30.0])
        assert np.array_equal(duration_difference(avg + 10, avg), np.full(3, 10.0))

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            duration_difference([1.0], [1.0, 2.0])


class TestCsvWriters:
    def test_files_and_determinism(self, tmp_path):
        wb = run_hfrl([EnvParams()], TINY, method="wb", seed=6)
        avg = run_hfrl([EnvParams()], TINY, method="avg", seed=6)
        d1, d2 = tmp_path / "d1.csv", tmp_path / "d2.csv"
        write_durations_csv(d1, wb)
        write_durations_csv(d2, wb)
        assert d1.read_bytes() == d2.read_bytes()
        lines = d1.read_text().splitlines()
        assert lines[0] == "episode,agent_id,duration,epsilon"
        assert len(lines) == 1 + 3

        ma = tmp_path / "ma.csv"
        write_moving_average_csv(ma, wb)
        assert ma.read_text().splitlines()[0] == "episode,agent_id,duration_ma50"

        diff = tmp_path / "diff.csv"
        write_difference_csv(diff, wb, avg)
        rows = diff.read_text().splitlines()
        assert rows[0] == "episode,wb_mean_duration,avg_mean_duration,difference"
        assert len(rows) == 1 + TINY.episodes
