"""
Value-based mutation agent: one-hidden-layer Q network, Boltzmann action
selection, uniform experience replay and a periodically refreshed target
network. A small numpy implementation; no autodiff framework.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyCorpus, NonFiniteLoss
from .features import FEATURE_DIM
from .env import EVADED, EvasionEnv, Episode, Skipped, play

CHECKPOINT_FORMAT = "pe_evade.agent"
CHECKPOINT_VERSION = 1


@dataclass
class PolicyParams:
    temperature: float = 1.0
    gamma: float = 0.95
    batch_size: int = 32
    learning_rate: float = 1e-3
    target_refresh: int = 100
    hidden: int = 64
    capacity: int = 5000
    selection: str = "softmax"  # or "proportional"
    greedy_eval: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.selection not in ("softmax", "proportional"):
            raise ValueError(f"unknown selection rule {self.selection!r}")


def boltzmann_probs(q: Sequence[float], temperature: float) -> np.ndarray:
    z = np.asarray(q, dtype=np.float64) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def proportional_probs(q: Sequence[float], floor: float = 1e-3) -> np.ndarray:
    """Probabilities directly proportional to Q, with negative and tiny values floored."""
    w = np.maximum(np.asarray(q, dtype=np.float64), floor)
    return w / w.sum()


def select_action(q: Sequence[float], temperature: float, rng: np.random.Generator) -> int:
    """Draw an index with probability softmax(q / temperature)."""
    if len(q) == 0:
        raise ValueError("empty Q vector")
    p = boltzmann_probs(q, temperature)
    return int(rng.choice(len(p), p=p))


# Adam moves every weight by about lr per step, so the first layer's output
# jitter grows with the L1 norm of the input (~100 after log compression).
# Shrinking the input and widening the init by the same factor keeps the
# initial activations and cuts that jitter tenfold.
INPUT_SCALE = 0.1


def preprocess(states: np.ndarray) -> np.ndarray:
    """Signed log compression; raw features span from 1e-4 (histograms) to 1e9 (timestamps)."""
    s = np.asarray(states, dtype=np.float64)
    return INPUT_SCALE * np.sign(s) * np.log1p(np.abs(s))


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int = 5000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: List[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, t: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._next] = t
        self._next = (self._next + 1) % self.capacity

    def items(self) -> List[Transition]:
        """Oldest first."""
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._next :] + self._items[: self._next]

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[Transition]:
        k = min(batch_size, len(self._items))
        idx = rng.choice(len(self._items), size=k, replace=False)
        return [self._items[i] for i in idx]


class QNetwork:
    """input -> ReLU hidden -> one value per action, trained with Adam."""

    def __init__(self, n_inputs: int, n_actions: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.W1 = rng.normal(0.0, np.sqrt(2.0 / n_inputs) / INPUT_SCALE, size=(n_inputs, hidden))
        self.b1 = np.zeros(hidden)
        self.W2 = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, n_actions))
        self.b2 = np.zeros(n_actions)
        self.steps = 0
        self._m = [np.zeros_like(p) for p in self.params]
        self._v = [np.zeros_like(p) for p in self.params]

    @property
    def params(self) -> List[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    @property
    def n_actions(self) -> int:
        return self.b2.shape[0]

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pre = x @ self.W1 + self.b1
        h = np.maximum(pre, 0.0)
        return h @ self.W2 + self.b2, h

    def q_values(self, states: np.ndarray) -> np.ndarray:
        x = preprocess(np.atleast_2d(states))
        return self.forward(x)[0]

    def copy(self) -> "QNetwork":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "W1": self.W1.tolist(), "b1": self.b1.tolist(),
            "W2": self.W2.tolist(), "b2": self.b2.tolist(),
            "steps": self.steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QNetwork":
        W1 = np.asarray(d["W1"], dtype=np.float64)
        net = cls(W1.shape[0], len(d["b2"]), W1.shape[1])
        net.W1 = W1
        net.b1 = np.asarray(d["b1"], dtype=np.float64)
        net.W2 = np.asarray(d["W2"], dtype=np.float64)
        net.b2 = np.asarray(d["b2"], dtype=np.float64)
        net.steps = int(d["steps"])
        net._m = [np.zeros_like(p) for p in net.params]
        net._v = [np.zeros_like(p) for p in net.params]
        return net


def td_targets(batch: Sequence[Transition], gamma: float, target: QNetwork) -> np.ndarray:
    """r + gamma * max_a Q_target(s', a), with the bootstrap masked on terminal transitions."""
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    done = np.array([t.done for t in batch], dtype=bool)
    out = rewards.copy()
    live = ~done
    if gamma != 0.0 and live.any():
        nxt = np.stack([t.next_state for t in batch])[live]
        out[live] += gamma * target.q_values(nxt).max(axis=1)
    return out


def td_loss_and_grads(net: QNetwork, batch: Sequence[Transition], targets: np.ndarray):
    """Mean of 0.5 * (Q(s, a) - target)^2 over the batch and its gradient for each parameter."""
    x = preprocess(np.stack([t.state for t in batch]))
    actions = np.array([t.action for t in batch])
    q, h = net.forward(x)
    n = len(batch)
    rows = np.arange(n)
    err = q[rows, actions] - targets
    loss = 0.5 * float(np.mean(err**2))
    dq = np.zeros_like(q)
    dq[rows, actions] = err / n
    gW2 = h.T @ dq
    gb2 = dq.sum(axis=0)
    dh = (dq @ net.W2.T) * (h > 0)
    gW1 = x.T @ dh
    gb1 = dh.sum(axis=0)
    return loss, [gW1, gb1, gW2, gb2]


def td_update(
    net: QNetwork,
    batch: Sequence[Transition],
    gamma: float,
    lr: float,
    target: Optional[QNetwork] = None,
) -> Tuple[QNetwork, float]:
    """One Adam step on the squared TD error of the taken actions. Updates ``net`` in place."""
    if not batch:
        raise ValueError("empty batch")
    targets = td_targets(batch, gamma, target if target is not None else net)
    loss, grads = td_loss_and_grads(net, batch, targets)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"TD loss is {loss}")
    net.steps += 1
    b1, b2, eps = 0.9, 0.999, 1e-8
    for p, g, m, v in zip(net.params, grads, net._m, net._v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**net.steps)
        vhat = v / (1 - b2**net.steps)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return net, loss


@dataclass
class TrainedAgent:
    net: QNetwork
    params: PolicyParams
    actions: List[str]
    log: List[dict] = field(default_factory=list)

    def choose(self, state: np.ndarray, rng: np.random.Generator, greedy: Optional[bool] = None) -> int:
        q = self.net.q_values(state)[0]
        greedy = self.params.greedy_eval if greedy is None else greedy
        if greedy:
            return int(np.argmax(q))
        if self.params.selection == "proportional":
            p = proportional_probs(q)
            return int(rng.choice(len(p), p=p))
        return select_action(q, self.params.temperature, rng)

    def state_value(self, state: np.ndarray) -> float:
        """Expected Q under the Boltzmann policy, reported for diagnostics."""
        q = self.net.q_values(state)[0]
        return float(boltzmann_probs(q, self.params.temperature) @ q)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(
                {
                    "format": CHECKPOINT_FORMAT,
                    "version": CHECKPOINT_VERSION,
                    "params": asdict(self.params),
                    "actions": self.actions,
                    "net": self.net.to_dict(),
                },
                f,
            )

    @classmethod
    def load(cls, path: str) -> "TrainedAgent":
        with open(path) as f:
            d = json.load(f)
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
        return cls(QNetwork.from_dict(d["net"]), PolicyParams(**d["params"]), d["actions"])


@dataclass
class TrainingResult:
    agent: TrainedAgent
    evaders: List[Tuple[str, bytes, List[str]]]  # (sample id, bytes, actions)
    steps: int
    episodes: List[Episode]


def _episode_record(index: int, ep: Episode) -> dict:
    return {
        "episode": index,
        "sample_id": ep.sample_id,
        "actions": [a.value for a in ep.actions],
        "rewards": ep.rewards,
        "outcome": ep.outcome,
        "skip_reason": ep.skip_reason,
        "truncated": ep.truncated,
    }


def train_agent(
    env_factory: Callable[[], EvasionEnv],
    samples: Sequence[Tuple[str, bytes]],
    budget: int,
    params: Optional[PolicyParams] = None,
    seed: int = 0,
    on_episode: Optional[Callable[[TrainedAgent, Episode], None]] = None,
) -> TrainingResult:
    """Play episodes round-robin over ``samples`` until exactly ``budget`` env steps were taken.

    ``on_episode`` is called after every played episode (progress reporting).
    """
    if not samples:
        raise EmptyCorpus("no training samples")
    params = params or PolicyParams()
    env = env_factory()
    rng = np.random.default_rng(seed)
    net = QNetwork(FEATURE_DIM, env.n_actions, params.hidden, seed=seed)
    target = net.copy()
    buffer = ReplayBuffer(params.capacity)
    agent = TrainedAgent(net, params, [a.value for a in env.action_space])
    evaders: List[Tuple[str, bytes, List[str]]] = []
    episodes: List[Episode] = []
    steps = 0
    updates = 0

    def choose(state):
        q = net.q_values(state)[0]
        if params.selection == "proportional":
            p = proportional_probs(q)
            return int(rng.choice(len(p), p=p))
        return select_action(q, params.temperature, rng)

    while steps < budget:
        order = rng.permutation(len(samples))
        played_any = False
        for i in order:
            if steps >= budget:
                break
            sid, data = samples[i]
            state = env.reset(data, sid)
            if isinstance(state, Skipped):
                episodes.append(env.episode)
                agent.log.append(_episode_record(len(agent.log), env.episode))
                continue
            played_any = True
            while steps < budget:
                a = choose(state)
                result = env.step(a)
                steps += 1
                buffer.add(Transition(state, a, result.reward, result.state, result.done))
                if len(buffer) >= params.batch_size:
                    batch = buffer.sample(params.batch_size, rng)
                    td_update(net, batch, params.gamma, params.learning_rate, target)
                    updates += 1
                    if updates % params.target_refresh == 0:
                        target = net.copy()
                state = result.state
                if result.done:
                    break
            else:
                env.truncate()
            ep = env.episode
            if ep.outcome == EVADED:
                evaders.append((sid, env.harvest_evader(), [a.value for a in ep.actions]))
            episodes.append(ep)
            agent.log.append(_episode_record(len(agent.log), ep))
            if on_episode is not None:
                on_episode(agent, ep)
        if not played_any:
            raise EmptyCorpus("every training sample was skipped")
    return TrainingResult(agent, evaders, steps, episodes)


def agent_episode(env: EvasionEnv, agent: TrainedAgent, sample: bytes, sample_id: str,
                  rng: np.random.Generator, greedy: Optional[bool] = None) -> Episode:
    return play(env, sample, sample_id, lambda s: agent.choose(s, rng, greedy))
