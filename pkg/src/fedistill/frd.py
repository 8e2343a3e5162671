"""Federated reinforcement distillation on a CartPole environment.

Agents learn with advantage actor-critic and periodically share experience:

* ``pd``  -- raw ``(state, policy)`` records, concatenated at the server;
* ``frd`` -- proxy memories: policies averaged over a grid of state
  clusters, then averaged across agents per cluster;
* ``frl`` -- FedAvg over actor weights.

Received experience is distilled into each actor by minimizing the
cross-entropy between the memory's policy and the actor's policy.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .nn import CROSS_ENTROPY, MSE, Mlp, backward, fedavg, forward, log_softmax, softmax
from .seeding import child_int, child_rng

N_ACTIONS = 2
STATE_DIM = 4


class EpisodeDoneError(RuntimeError):
    pass


class CartPoleEnv:
    """Classic cart-pole balancing task, integrated with semi-implicit Euler."""

    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    length = 0.5  # half the pole length
    force_mag = 10.0
    tau = 0.02
    theta_threshold = 12 * 2 * math.pi / 360
    x_threshold = 2.4
    max_steps = 500

    def __init__(self):
        self.state = None
        self.steps = 0
        self.done = True
        self.terminated = False

    @property
    def total_mass(self):
        return self.masspole + self.masscart

    def reset(self, rng=None, state=None):
        if state is None:
            rng = np.random.default_rng(0) if rng is None else rng
            state = rng.uniform(-0.05, 0.05, size=STATE_DIM)
        self.state = tuple(float(v) for v in state)
        self.steps = 0
        self.done = False
        self.terminated = False
        return np.array(self.state)

    def step(self, action):
        if self.done:
            raise EpisodeDoneError("episode has ended; call reset()")
        if action not in (0, 1):
            raise ValueError(f"action must be 0 or 1, got {action!r}")
        x, x_dot, theta, theta_dot = self.state
        force = self.force_mag if action == 1 else -self.force_mag
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        pml = self.masspole * self.length
        temp = (force + pml * theta_dot ** 2 * sin_t) / self.total_mass
        theta_acc = (self.gravity * sin_t - cos_t * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos_t ** 2 / self.total_mass))
        x_acc = temp - pml * theta_acc * cos_t / self.total_mass
        x_dot += self.tau * x_acc
        x += self.tau * x_dot
        theta_dot += self.tau * theta_acc
        theta += self.tau * theta_dot
        self.state = (x, x_dot, theta, theta_dot)
        self.steps += 1
        self.terminated = abs(x) > self.x_threshold or abs(theta) > self.theta_threshold
        self.done = self.terminated or self.steps >= self.max_steps
        return np.array(self.state), 1.0, self.done


@dataclass
class A2cAgent:
    actor: Mlp
    critic: Mlp
    discount: float = 0.99

    def __post_init__(self):
        if self.actor.output_dim != N_ACTIONS or self.critic.output_dim != 1:
            raise ValueError("actor must output 2 action logits and critic 1 value")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")

    @classmethod
    def build(cls, hidden=(32, 32), seed=0, discount=0.99, critic_hidden=None):
        critic_hidden = hidden if critic_hidden is None else critic_hidden
        actor = Mlp([STATE_DIM, *hidden, N_ACTIONS], "tanh", child_int(seed, "actor"))
        critic = Mlp([STATE_DIM, *critic_hidden, 1], "tanh", child_int(seed, "critic"))
        return cls(actor, critic, discount)

    def policy(self, states):
        return softmax(forward(self.actor, states)[0])

    def value(self, states):
        v = forward(self.critic, states)[0]
        return v[..., 0]

    def copy(self):
        return A2cAgent(self.actor.copy(), self.critic.copy(), self.discount)


def advantage(agent: A2cAgent, s, a, r, s_next, done) -> float:
    """One-step TD advantage ``r + discount * V(s') * (1 - done) - V(s)``.

    ``a`` does not enter the estimate; it is accepted for symmetry with Q(s, a).
    """
    v = float(agent.value(np.asarray(s, dtype=np.float64)))
    v_next = 0.0 if done else float(agent.value(np.asarray(s_next, dtype=np.float64)))
    return r + agent.discount * v_next - v


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray  # True where the next state is terminal (not mere time-out)
    policies: np.ndarray

    def __len__(self):
        return self.actions.shape[0]

    @property
    def score(self) -> float:
        return float(self.rewards.sum())


def play_episode(agent: A2cAgent, rng, env=None) -> Trajectory:
    env = CartPoleEnv() if env is None else env
    s = env.reset(rng)
    states, actions, rewards, nexts, terms, pols = [], [], [], [], [], []
    while not env.done:
        pi = agent.policy(s)
        a = int(rng.random() < pi[1])
        s_next, r, _ = env.step(a)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        nexts.append(s_next)
        terms.append(env.terminated)
        pols.append(pi)
        s = s_next
    return Trajectory(np.array(states), np.array(actions), np.array(rewards),
                      np.array(nexts), np.array(terms), np.array(pols))


def td_targets(agent: A2cAgent, traj: Trajectory) -> np.ndarray:
    v_next = agent.value(traj.next_states)
    return traj.rewards + agent.discount * v_next * (~traj.terminals)


def a2c_update(agent: A2cAgent, traj: Trajectory, eta, critic_eta=None) -> A2cAgent:
    """One actor step along ``A * grad log pi(a|s)`` and one critic TD step.

    Both use the advantages/targets of the pre-update critic. Returns a new agent.
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    critic_eta = eta if critic_eta is None else critic_eta
    targets = td_targets(agent, traj)
    adv = targets - agent.value(traj.states)
    out = agent.copy()
    onehot = np.eye(N_ACTIONS)[traj.actions]
    # minimizing A * (-log pi(a|s)) ascends A * log pi(a|s)
    g_actor = backward(agent.actor, traj.states, onehot, kinds=(CROSS_ENTROPY, CROSS_ENTROPY),
                       sample_weight=adv)
    g_critic = backward(agent.critic, traj.states, targets[:, None], kinds=(MSE, MSE))
    out.actor.weights -= eta * g_actor
    out.critic.weights -= critic_eta * g_critic
    return out


# --- state clustering -------------------------------------------------------

DEFAULT_RANGES = (
    (-2.4, 2.4),
    (-3.0, 3.0),
    (-2 * 12 * math.pi / 180, 2 * 12 * math.pi / 180),
    (-3.5, 3.5),
)


@dataclass(frozen=True)
class ClusterConfig:
    S: int = 30
    ranges: Tuple[Tuple[float, float], ...] = DEFAULT_RANGES

    def __post_init__(self):
        if self.S <= 0:
            raise ValueError("S must be positive")
        for lo, hi in self.ranges:
            if not hi > lo:
                raise ValueError(f"empty range ({lo}, {hi})")

    @property
    def n_clusters(self) -> int:
        return self.S ** len(self.ranges)

    def bin_index(self, dim, value) -> int:
        lo, hi = self.ranges[dim]
        k = math.floor((value - lo) / (hi - lo) * self.S)
        return min(max(k, 0), self.S - 1)

    def midpoint(self, dim, k) -> float:
        lo, hi = self.ranges[dim]
        width = (hi - lo) / self.S
        return lo + (k + 0.5) * width


def cluster_state(config: ClusterConfig, state) -> Tuple[int, np.ndarray]:
    """Mixed-radix cluster id (first dimension most significant) and its bin midpoints.

    Bins are half-open ``[lo, hi)``; out-of-range values clamp to the edge bins.
    """
    ident = 0
    rep = np.empty(len(config.ranges))
    for d, v in enumerate(state):
        k = config.bin_index(d, float(v))
        ident = ident * config.S + k
        rep[d] = config.midpoint(d, k)
    return ident, rep


def cluster_representative(config: ClusterConfig, ident: int) -> np.ndarray:
    digits = []
    for _ in config.ranges:
        ident, k = divmod(ident, config.S)
        digits.append(k)
    digits.reverse()
    return np.array([config.midpoint(d, k) for d, k in enumerate(digits)])


# --- experience memories ----------------------------------------------------

@dataclass
class RawExperienceMemory:
    states: np.ndarray = field(default_factory=lambda: np.zeros((0, STATE_DIM)))
    policies: np.ndarray = field(default_factory=lambda: np.zeros((0, N_ACTIONS)))

    def __len__(self):
        return self.states.shape[0]

    def extend(self, states, policies):
        self.states = np.vstack([self.states, np.asarray(states, dtype=np.float64)])
        self.policies = np.vstack([self.policies, np.asarray(policies, dtype=np.float64)])

    @classmethod
    def concatenate(cls, memories: Sequence["RawExperienceMemory"]):
        out = cls()
        for m in memories:
            out.extend(m.states, m.policies)
        return out

    def training_set(self):
        return self.states, self.policies


class ProxyExperienceMemory:
    """Cluster id -> (policy sum, visit count)."""

    def __init__(self, config: ClusterConfig, entries: Optional[Dict[int, Tuple[np.ndarray, int]]] = None):
        self.config = config
        self.entries = {} if entries is None else dict(entries)

    def __len__(self):
        return len(self.entries)

    def add(self, ident, policy, visits=1):
        policy = np.asarray(policy, dtype=np.float64)
        if ident in self.entries:
            total, n = self.entries[ident]
            self.entries[ident] = (total + policy, n + visits)
        else:
            self.entries[ident] = (policy.copy(), visits)

    def average(self, ident) -> np.ndarray:
        total, n = self.entries[ident]
        return total / n

    def ids(self):
        return sorted(self.entries)

    def training_set(self):
        ids = self.ids()
        if not ids:
            return np.zeros((0, STATE_DIM)), np.zeros((0, N_ACTIONS))
        states = np.stack([cluster_representative(self.config, i) for i in ids])
        policies = np.stack([self.average(i) for i in ids])
        return states, policies


def build_proxy_memory(raw: RawExperienceMemory, config: ClusterConfig) -> ProxyExperienceMemory:
    mem = ProxyExperienceMemory(config)
    for s, p in zip(raw.states, raw.policies):
        mem.add(cluster_state(config, s)[0], p)
    return mem


def merge_global(memories: Sequence[ProxyExperienceMemory], weighted=False) -> ProxyExperienceMemory:
    """Per-cluster mean of the agents' local average policies.

    By default every agent that visited a cluster counts once; with
    ``weighted=True`` agents count in proportion to their visits.
    """
    memories = list(memories)
    if not memories:
        raise ValueError("nothing to merge")
    config = memories[0].config
    if any(m.config != config for m in memories[1:]):
        raise ValueError("proxy memories use different cluster configurations")
    merged = ProxyExperienceMemory(config)
    for ident in sorted(set().union(*(m.entries for m in memories))):
        holders = [m for m in memories if ident in m.entries]
        if weighted:
            total = sum(m.entries[ident][0] for m in holders)
            visits = sum(m.entries[ident][1] for m in holders)
            merged.entries[ident] = (total, visits)
        else:
            avg = sum(m.average(ident) for m in holders) / len(holders)
            merged.entries[ident] = (avg * len(holders), len(holders))
    return merged


def distill_loss(agent: A2cAgent, memory) -> Tuple[float, np.ndarray]:
    """``-sum_k sum_a pi_target(a|s_k) log pi_actor(a|s_k)`` and its actor gradient."""
    states, targets = memory.training_set()
    if states.shape[0] == 0:
        raise ValueError("empty memory")
    K = states.shape[0]
    logits = forward(agent.actor, states)[0]
    value = float(-np.sum(targets * log_softmax(logits)))
    grad = backward(agent.actor, states, targets, kinds=(CROSS_ENTROPY, CROSS_ENTROPY)) * K
    return value, grad


def distill(agent: A2cAgent, memory, steps, eta, batch_size=64, rng=None) -> A2cAgent:
    """Minibatch SGD on the mean distillation cross-entropy over ``memory``."""
    states, targets = memory.training_set()
    out = agent.copy()
    n = states.shape[0]
    if n == 0 or steps == 0:
        return out
    rng = np.random.default_rng(0) if rng is None else rng
    size = min(batch_size, n)
    for _ in range(steps):
        idx = rng.choice(n, size=size, replace=False)
        g = backward(out.actor, states[idx], targets[idx], kinds=(CROSS_ENTROPY, CROSS_ENTROPY))
        out.actor.weights -= eta * g
    return out


# --- payload accounting -------------------------------------------------------

def raw_memory_bytes(memory: RawExperienceMemory, float_width=4) -> int:
    return len(memory) * (STATE_DIM + N_ACTIONS) * float_width


def proxy_memory_bytes(memory: ProxyExperienceMemory, float_width=4) -> int:
    # one slot for the cluster id plus the averaged policy
    return len(memory) * (N_ACTIONS + 1) * float_width


def proxy_payload_bound(config: ClusterConfig, float_width=4) -> int:
    return config.n_clusters * (N_ACTIONS + 1) * float_width


def model_bytes(model: Mlp, float_width=4) -> int:
    return model.n_params * float_width


def exchange_payloads(scheme, raw_memories, agents, config: ClusterConfig, float_width=4):
    """Per-agent ``(uplink, downlink)`` bytes plus whatever each agent downloads."""
    C = len(raw_memories)
    if scheme == "pd":
        glob = RawExperienceMemory.concatenate(raw_memories)
        up = [raw_memory_bytes(m, float_width) for m in raw_memories]
        down = [raw_memory_bytes(glob, float_width)] * C
        return up, down, glob
    if scheme == "frd":
        local = [build_proxy_memory(m, config) for m in raw_memories]
        glob = merge_global(local)
        up = [proxy_memory_bytes(m, float_width) for m in local]
        down = [proxy_memory_bytes(glob, float_width)] * C
        return up, down, glob
    if scheme == "frl":
        size = [model_bytes(a.actor, float_width) for a in agents]
        return size, size, None
    raise ValueError(f"unknown scheme {scheme!r}")


# --- orchestration ------------------------------------------------------------

@dataclass
class DrlConfig:
    hidden: Tuple[int, ...] = (32, 32)
    agent_hidden: Optional[List[Tuple[int, ...]]] = None
    discount: float = 0.99
    actor_lr: float = 0.01
    critic_lr: float = 0.01
    S: int = 30
    exchange_interval: int = 25
    distill_steps: int = 20
    distill_lr: float = 0.01
    distill_batch: int = 64
    mission_score: float = 490.0
    mission_window: int = 10
    float_width: int = 4

    def hidden_for(self, agent_id):
        if self.agent_hidden is not None:
            return tuple(self.agent_hidden[agent_id])
        return tuple(self.hidden)


@dataclass
class ExchangeReport:
    exchange: int
    episode: int
    rolling_scores: List[float]
    uplink_bytes: List[int]
    downlink_bytes: List[int]

    def rows(self):
        for c in range(len(self.rolling_scores)):
            yield {
                "exchange": self.exchange,
                "agent": c,
                "rolling_score": self.rolling_scores[c],
                "uplink_bytes": self.uplink_bytes[c],
                "downlink_bytes": self.downlink_bytes[c],
            }


@dataclass
class DrlResult:
    scheme: str
    reports: List[ExchangeReport]
    scores: np.ndarray  # (C, episodes played)
    mission_episode: Optional[int]
    agents: List[A2cAgent]


def _rolling(scores, window):
    tail = scores[-window:]
    return float(np.mean(tail)) if tail else 0.0


def run_drl(scheme: str, agents: int, episodes: int, config: DrlConfig = None, seed=0,
            n_jobs=1) -> DrlResult:
    """Train ``agents`` A2C learners, exchanging every ``config.exchange_interval`` episodes.

    Stops at ``episodes`` or once any agent's mean score over the last
    ``mission_window`` episodes reaches ``mission_score``.
    """
    config = DrlConfig() if config is None else config
    if scheme not in ("pd", "frd", "frl"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if agents < 1:
        raise ValueError("need at least one agent")
    clusters = ClusterConfig(config.S)
    team = [A2cAgent.build(config.hidden_for(c), child_int(seed, "agent", c), config.discount)
            for c in range(agents)]
    if scheme == "frl":
        for a in team[1:]:
            if not a.actor.same_architecture(team[0].actor):
                fedavg([team[0].actor, a.actor])  # raises AggregationError
    scores = [[] for _ in range(agents)]
    reports = []
    mission = None
    episode = 0
    exchange = 0

    def run_block(c, start, stop):
        agent = team[c]
        memory = RawExperienceMemory()
        played = []
        for e in range(start, stop):
            rng = child_rng(seed, "episode", c, e)
            traj = play_episode(agent, rng)
            agent = a2c_update(agent, traj, config.actor_lr, config.critic_lr)
            memory.extend(traj.states, traj.policies)
            played.append(traj.score)
            if _rolling(scores[c] + played, config.mission_window) >= config.mission_score \
                    and len(scores[c]) + len(played) >= config.mission_window:
                break
        return agent, memory, played

    while episode < episodes and mission is None:
        stop = min(episode + config.exchange_interval, episodes)
        if n_jobs > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                blocks = list(pool.map(lambda c: run_block(c, episode, stop), range(agents)))
        else:
            blocks = [run_block(c, episode, stop) for c in range(agents)]
        memories = []
        for c, (agent, memory, played) in enumerate(blocks):
            team[c] = agent
            scores[c].extend(played)
            memories.append(memory)
        hits = [episode + len(b[2]) for c, b in enumerate(blocks)
                if len(scores[c]) >= config.mission_window
                and _rolling(scores[c], config.mission_window) >= config.mission_score]
        if hits:
            mission = min(hits)
            break
        episode = stop
        if episode >= episodes:
            break
        exchange += 1
        up, down, glob = exchange_payloads(scheme, memories, team, clusters, config.float_width)
        if scheme == "frl":
            avg = fedavg([a.actor for a in team])
            for a in team:
                a.actor.weights = avg.weights.copy()
        else:
            team = [distill(a, glob, config.distill_steps, config.distill_lr, config.distill_batch,
                            child_rng(seed, "distill", c, exchange)) for c, a in enumerate(team)]
        reports.append(ExchangeReport(exchange, episode,
                                      [_rolling(s, config.mission_window) for s in scores], up, down))
    width = max(len(s) for s in scores)
    padded = np.full((agents, width), np.nan)
    for c, s in enumerate(scores):
        padded[c, :len(s)] = s
    return DrlResult(scheme, reports, padded, mission, team)
