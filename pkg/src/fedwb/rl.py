"""CartPole with configurable pole length, DQN agents, and federated training.

Agents advance in lockstep on a shared global step counter; every
``sync_every`` global steps each agent's target network is set to its online
network, the online networks are fused (barycenter or average), and the
result is written back to every agent's online *and* target networks. An
agent whose episode ends resets immediately and keeps acting until all
agents have finished their episode quota, so the barrier stays aligned.

The simulation is single-threaded with one RNG stream per agent, so runs
are reproducible and agents never share mutable state.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, DomainError
from .fusion import FusionWeights, fuse_avg, fuse_wb
from .nn import (
    Activation,
    Loss,
    NetworkParams,
    SgdConfig,
    backprop_from_output_grad,
    forward,
    sgd_step,
)
from .ot import GroundCost

__all__ = [
    "EnvParams",
    "CartPoleState",
    "Transition",
    "ReplayBuffer",
    "DqnConfig",
    "X_LIMIT",
    "THETA_LIMIT",
    "initial_state",
    "is_terminal",
    "env_step",
    "epsilon_at",
    "select_action",
    "td_update",
    "HfrlSimulation",
    "HfrlResult",
    "run_hfrl",
    "moving_average",
    "duration_difference",
    "write_durations_csv",
    "write_moving_average_csv",
    "write_difference_csv",
]

Q_ACTIVATIONS = (Activation.RELU, Activation.IDENTITY)
N_ACTIONS = 2
X_LIMIT = 2.4
THETA_LIMIT = 12.0 * math.pi / 180.0
INIT_RANGE = 0.05


@dataclass(frozen=True)
class EnvParams:
    """Cart-pole physics constants; ``half_length`` is the heterogeneity knob."""

    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    force_mag: float = 10.0
    tau: float = 0.02

    def __post_init__(self):
        for name in ("gravity", "cart_mass", "pole_mass", "half_length",
                     "force_mag", "tau"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")


@dataclass(frozen=True)
class CartPoleState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])


def initial_state(rng: np.random.Generator) -> CartPoleState:
    vals = rng.uniform(-INIT_RANGE, INIT_RANGE, size=4)
    return CartPoleState(*vals)


def is_terminal(state: CartPoleState) -> bool:
    return abs(state.x) > X_LIMIT or abs(state.theta) > THETA_LIMIT


def env_step(state: CartPoleState, action: int,
             params: EnvParams = EnvParams()) -> tuple[CartPoleState, float, bool]:
    """Advance one time step with a semi-implicit Euler integrator.

    ``action`` 0 pushes left, 1 pushes right; each surviving step is worth
    reward 1. Stepping a terminal state is an error.
    """
    if is_terminal(state):
        raise DomainError("cannot step a terminal state")
    if action not in (0, 1):
        raise DomainError(f"action must be 0 or 1, got {action!r}")
    force = params.force_mag if action == 1 else -params.force_mag
    cos_t = math.cos(state.theta)
    sin_t = math.sin(state.theta)
    total_mass = params.cart_mass + params.pole_mass
    pole_mass_length = params.pole_mass * params.half_length

    temp = (force + pole_mass_length * state.theta_dot ** 2 * sin_t) / total_mass
    theta_acc = (params.gravity * sin_t - cos_t * temp) / (
        params.half_length * (4.0 / 3.0 - params.pole_mass * cos_t ** 2 / total_mass))
    x_acc = temp - pole_mass_length * theta_acc * cos_t / total_mass

    x_dot = state.x_dot + params.tau * x_acc
    x = state.x + params.tau * x_dot
    theta_dot = state.theta_dot + params.tau * theta_acc
    theta = state.theta + params.tau * theta_dot
    nxt = CartPoleState(x, x_dot, theta, theta_dot)
    return nxt, 1.0, is_terminal(nxt)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    next_state: np.ndarray | None      # None when the episode terminated
    reward: float
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise DomainError("replay capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._cursor] = transition
        self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        if batch_size > len(self._items):
            raise DomainError(
                f"cannot sample {batch_size} from a buffer of {len(self._items)}")
        idx = rng.integers(0, len(self._items), size=batch_size)
        return [self._items[i] for i in idx]


@dataclass(frozen=True)
class DqnConfig:
    gamma: float = 0.95
    eps_start: float = 0.9
    eps_end: float = 0.05
    eps_decay: float = 1000.0           # steps; eps(t) = end + (start-end)*exp(-t/decay)
    sync_every: int = 500               # target-sync / aggregation cadence, global steps
    replay_capacity: int = 10000
    batch_size: int = 64
    learning_rate: float = 0.05
    episodes: int = 600
    max_steps: int = 500
    loss: Loss = Loss.HUBER
    hidden_units: int = 256

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError("gamma must lie in [0, 1]")
        if not (0.0 <= self.eps_end <= self.eps_start <= 1.0):
            raise DomainError("need 0 <= eps_end <= eps_start <= 1")
        if self.eps_decay <= 0 or self.sync_every < 1 or self.batch_size < 1:
            raise DomainError("eps_decay, sync_every and batch_size must be positive")
        if self.replay_capacity < self.batch_size:
            raise DomainError("replay capacity must hold at least one batch")
        if self.episodes < 1 or self.max_steps < 1 or self.hidden_units < 1:
            raise DomainError("episodes, max_steps and hidden_units must be positive")
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        if self.loss not in (Loss.HUBER, Loss.SQUARED_ERROR):
            raise DomainError("DQN loss must be Huber or squared error")


def epsilon_at(config: DqnConfig, step: int) -> float:
    """Exploration rate after ``step`` global steps (monotone non-increasing)."""
    return config.eps_end + (config.eps_start - config.eps_end) * math.exp(
        -step / config.eps_decay)


def select_action(q_net: NetworkParams, state: np.ndarray, epsilon: float,
                  rng: np.random.Generator) -> int:
    """Epsilon-greedy action: explore uniformly, otherwise argmax Q (ties -> 0)."""
    if not 0.0 <= epsilon <= 1.0:
        raise DomainError("epsilon must lie in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(N_ACTIONS))
    q, _ = forward(q_net, np.asarray(state, dtype=np.float64), Q_ACTIVATIONS)
    return int(np.argmax(q))


def td_update(online: NetworkParams, target: NetworkParams,
              batch: list[Transition], config: DqnConfig) -> NetworkParams:
    """One gradient step toward the one-step bootstrap targets.

    ``delta_i = Q(s_i, a_i) - y_i`` with ``y_i = r_i`` for terminal
    transitions and ``r_i + gamma * max_a Qhat(s'_i, a)`` otherwise; the
    target network receives no gradient. The mean loss over the batch is the
    configured Huber or squared error in ``delta``.
    """
    if not batch:
        raise DomainError("empty transition batch")
    states = np.stack([t.state for t in batch])
    actions = np.array([t.action for t in batch])
    rewards = np.array([t.reward for t in batch])
    done = np.array([t.done for t in batch])
    next_states = np.stack([np.zeros(4) if t.next_state is None else t.next_state
                            for t in batch])

    q_next, _ = forward(target, next_states, Q_ACTIVATIONS)
    targets = rewards + config.gamma * q_next.max(axis=1) * (~done)

    q, cache = forward(online, states, Q_ACTIVATIONS)
    delta = q[np.arange(len(batch)), actions] - targets
    if config.loss is Loss.HUBER:
        dloss = np.clip(delta, -1.0, 1.0)
    else:
        dloss = delta
    out_grad = np.zeros_like(q)
    out_grad[np.arange(len(batch)), actions] = dloss / len(batch)
    grads = backprop_from_output_grad(online, cache, out_grad)
    return sgd_step(online, grads, SgdConfig(config.learning_rate, len(batch)))


@dataclass
class _Agent:
    env: EnvParams
    rng: np.random.Generator
    online: NetworkParams
    target: NetworkParams
    replay: ReplayBuffer
    state: CartPoleState = None
    episode_steps: int = 0
    durations: list = field(default_factory=list)
    episode_eps: list = field(default_factory=list)


@dataclass
class HfrlResult:
    durations: np.ndarray       # (agents, episodes) steps survived
    epsilons: np.ndarray        # (agents, episodes) exploration rate at episode end
    global_params: NetworkParams
    sync_steps: list            # global steps at which aggregation happened


class HfrlSimulation:
    """Lockstep multi-agent DQN training with periodic model fusion."""

    def __init__(self, env_params: list[EnvParams], config: DqnConfig,
                 method: str = "wb", seed: int = 0,
                 lam: FusionWeights | None = None,
                 cost: GroundCost = GroundCost(), projection: str = "round"):
        if not env_params:
            raise DomainError("need at least one agent environment")
        if method not in ("wb", "avg"):
            raise DomainError(f"method must be 'wb' or 'avg', got {method!r}")
        if lam is not None and len(lam.lam) != len(env_params):
            raise DimensionError("fusion weights length must equal agent count")
        self.config = config
        self.method = method
        self.lam = lam
        self.cost = cost
        self.projection = projection
        init = NetworkParams.glorot((4, config.hidden_units, N_ACTIONS),
                                    np.random.default_rng(seed))
        self.agents = []
        for a, env in enumerate(env_params):
            rng = np.random.default_rng([seed, a])
            agent = _Agent(env=env, rng=rng, online=init.copy(), target=init.copy(),
                           replay=ReplayBuffer(config.replay_capacity))
            agent.state = initial_state(rng)
            self.agents.append(agent)
        self.global_step = 0
        self.sync_steps: list[int] = []

    def _fuse(self, nets: list[NetworkParams]) -> NetworkParams:
        if self.method == "wb":
            return fuse_wb(nets, self.lam, self.cost, self.projection)
        return fuse_avg(nets)

    def step(self) -> None:
        """One global step: every agent acts, learns, and maybe aggregates."""
        cfg = self.config
        self.global_step += 1
        eps = epsilon_at(cfg, self.global_step)
        for agent in self.agents:
            action = select_action(agent.online, agent.state.as_vector(), eps,
                                   agent.rng)
            nxt, reward, done = env_step(agent.state, action, agent.env)
            agent.episode_steps += 1
            truncated = agent.episode_steps >= cfg.max_steps
            agent.replay.push(Transition(
                state=agent.state.as_vector(), action=action,
                next_state=None if done else nxt.as_vector(),
                reward=reward, done=done))
            if len(agent.replay) >= cfg.batch_size:
                batch = agent.replay.sample(cfg.batch_size, agent.rng)
                agent.online = td_update(agent.online, agent.target, batch, cfg)
            if done or truncated:
                agent.durations.append(agent.episode_steps)
                agent.episode_eps.append(eps)
                agent.episode_steps = 0
                agent.state = initial_state(agent.rng)
            else:
                agent.state = nxt

        if self.global_step % cfg.sync_every == 0:
            for agent in self.agents:
                agent.target = agent.online.copy()
            fused = self._fuse([agent.online for agent in self.agents])
            for agent in self.agents:
                agent.online = fused.copy()
                agent.target = fused.copy()
            self.sync_steps.append(self.global_step)

    def run(self) -> HfrlResult:
        """Step until every agent has finished its episode quota."""
        episodes = self.config.episodes
        while min(len(agent.durations) for agent in self.agents) < episodes:
            self.step()
        durations = np.array([agent.durations[:episodes] for agent in self.agents])
        epsilons = np.array([agent.episode_eps[:episodes] for agent in self.agents])
        return HfrlResult(durations, epsilons,
                          self._fuse([agent.online for agent in self.agents]),
                          list(self.sync_steps))


def run_hfrl(env_params: list[EnvParams], config: DqnConfig, method: str = "wb",
             seed: int = 0, lam: FusionWeights | None = None,
             cost: GroundCost = GroundCost(), projection: str = "round") -> HfrlResult:
    """Train heterogeneous agents with periodic fusion; see HfrlSimulation."""
    sim = HfrlSimulation(env_params, config, method, seed, lam, cost, projection)
    return sim.run()


def moving_average(series, window: int = 50) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` entries average the prefix."""
    values = np.asarray(series, dtype=np.float64)
    if values.size == 0:
        raise DomainError("series is empty")
    if window < 1:
        raise DomainError("window must be >= 1")
    cum = np.cumsum(values)
    out = np.empty_like(cum)
    if values.size <= window:
        out[:] = cum / np.arange(1, values.size + 1)
        return out
    out[:window] = cum[:window] / np.arange(1, window + 1)
    out[window:] = (cum[window:] - cum[:-window]) / window
    return out


def duration_difference(wb_series, avg_series) -> np.ndarray:
    """Elementwise (barycenter minus average) episode-duration gap."""
    wb = np.asarray(wb_series, dtype=np.float64)
    avg = np.asarray(avg_series, dtype=np.float64)
    if wb.shape != avg.shape:
        raise DimensionError(f"series shapes differ: {wb.shape} vs {avg.shape}")
    return wb - avg


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def write_durations_csv(path, result: HfrlResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode", "agent_id", "duration", "epsilon"])
        agents, episodes = result.durations.shape
        for episode in range(episodes):
            for a in range(agents):
                writer.writerow([episode + 1, a, int(result.durations[a, episode]),
                                 _fmt(result.epsilons[a, episode])])


def write_moving_average_csv(path, result: HfrlResult, window: int = 50) -> None:
    smoothed = [moving_average(result.durations[a], window)
                for a in range(result.durations.shape[0])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode", "agent_id", f"duration_ma{window}"])
        agents, episodes = result.durations.shape
        for episode in range(episodes):
            for a in range(agents):
                writer.writerow([episode + 1, a, _fmt(smoothed[a][episode])])


def write_difference_csv(path, wb_result: HfrlResult, avg_result: HfrlResult) -> None:
    """Per-episode gap between the two methods' mean-over-agents durations."""
    wb_mean = wb_result.durations.mean(axis=0)
    avg_mean = avg_result.durations.mean(axis=0)
    diff = duration_difference(wb_mean, avg_mean)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode", "wb_mean_duration", "avg_mean_duration", "difference"])
        for episode, (w, v, d) in enumerate(zip(wb_mean, avg_mean, diff), start=1):
            writer.writerow([episode, _fmt(w), _fmt(v), _fmt(d)])
