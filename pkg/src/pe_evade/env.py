"""
The evasion game: one sample per episode, one mutation per turn.

The environment holds raw bytes, re-parses them every turn, and asks a
label-only oracle for a verdict. Reward is ``R`` when the oracle says
benign and 0 otherwise; the episode ends on evasion or after ``max_turns``.

    env = EvasionEnv(ModelOracle(model), EnvConfig(seed=1))
    state = env.reset(sample_bytes, "sample-1")
    result = env.step(ActionKind.OVERLAY_APPEND)
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .errors import ActionUnavailable, EpisodeFinished, LayoutOverflow, Malformed, NotEvaded, NotPe
from .features import extract
from .mutations import ActionKind, EngineConfig, action_space, apply_action
from .pe.image import parse, serialize

BENIGN = 0
MALICIOUS = 1

EVADED = "evaded"
FAILED = "failed"
SKIPPED = "skipped"


class LabelOracle(Protocol):
    def label(self, data: bytes) -> int: ...


class CountingOracle:
    """Wraps an oracle and counts queries."""

    def __init__(self, inner: LabelOracle):
        self._inner = inner
        self.queries = 0

    def label(self, data: bytes) -> int:
        self.queries += 1
        return self._inner.label(data)


class SectionNameOracle:
    """Rigged target: malicious iff any section carries a blacklisted name."""

    def __init__(self, blacklist: Sequence[str] = (".evil",)):
        self.blacklist = frozenset(blacklist)
        self.queries = 0

    def label(self, data: bytes) -> int:
        self.queries += 1
        try:
            img = parse(data)
        except (NotPe, Malformed):
            return MALICIOUS
        return MALICIOUS if any(s.label in self.blacklist for s in img.sections) else BENIGN


@dataclass
class EnvConfig:
    max_turns: int = 10
    reward: float = 10.0
    seed: int = 0
    engine: EngineConfig = field(default_factory=EngineConfig)
    actions: Optional[List[ActionKind]] = None

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if self.reward <= 0:
            raise ValueError("reward must be > 0")
        if self.actions is None:
            self.actions = action_space(self.engine)


@dataclass(frozen=True)
class Skipped:
    reason: str  # "initially-benign" or "malformed"


@dataclass
class StepResult:
    state: np.ndarray
    reward: float
    done: bool
    info: Dict[str, Any]


@dataclass
class Episode:
    sample_id: str
    steps: List[Tuple[ActionKind, StepResult]] = field(default_factory=list)
    outcome: str = FAILED
    evader: Optional[bytes] = None
    skip_reason: Optional[str] = None
    truncated: bool = False

    @property
    def actions(self) -> List[ActionKind]:
        return [a for a, _ in self.steps]

    @property
    def rewards(self) -> List[float]:
        return [r.reward for _, r in self.steps]


class EvasionEnv:
    """Gym-style reset/step over raw PE bytes. Only ``oracle.label`` is ever called."""

    def __init__(self, oracle: LabelOracle, config: Optional[EnvConfig] = None):
        self.oracle = oracle
        self.config = config or EnvConfig()
        self.action_space: List[ActionKind] = list(self.config.actions)
        self.episode: Optional[Episode] = None
        self._bytes: Optional[bytes] = None
        self._state: Optional[np.ndarray] = None
        self._key = 0
        self._turn = 0
        self._done = True

    @property
    def n_actions(self) -> int:
        return len(self.action_space)

    @property
    def current_bytes(self) -> Optional[bytes]:
        return self._bytes

    def reset(self, sample: bytes, sample_id: str = "", episode_key: Optional[int] = None) -> Union[np.ndarray, Skipped]:
        """Arm an episode, or return :class:`Skipped` for unplayable samples."""
        self.episode = Episode(sample_id)
        self._done = True
        try:
            state = extract(sample)
        except (NotPe, Malformed):
            self.episode.outcome = SKIPPED
            self.episode.skip_reason = "malformed"
            return Skipped("malformed")
        if self.oracle.label(sample) == BENIGN:
            self.episode.outcome = SKIPPED
            self.episode.skip_reason = "initially-benign"
            return Skipped("initially-benign")
        self._bytes = bytes(sample)
        self._state = state
        self._key = zlib.crc32(sample) if episode_key is None else int(episode_key)
        self._turn = 0
        self._done = False
        return state

    def _turn_rng(self) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, self._key, self._turn])

    def step(self, action: Union[int, ActionKind]) -> StepResult:
        if self._done or self.episode is None:
            raise EpisodeFinished("reset() a malicious sample before stepping")
        kind = self.action_space[action] if isinstance(action, (int, np.integer)) else ActionKind(action)
        self._turn += 1
        error = None
        try:
            new = serialize(apply_action(parse(self._bytes), kind, self._turn_rng(), self.config.engine))
            state = self._state if new == self._bytes else extract(new)
        except (ActionUnavailable, LayoutOverflow, Malformed, NotPe) as exc:
            new, state, error = self._bytes, self._state, f"{type(exc).__name__}: {exc}"
        changed = new != self._bytes
        self._bytes, self._state = new, state
        verdict = self.oracle.label(new)
        reward = self.config.reward if verdict == BENIGN else 0.0
        done = verdict == BENIGN or self._turn >= self.config.max_turns
        info = {
            "turn": self._turn,
            "action": kind.value,
            "label": verdict,
            "length": len(new),
            "changed": changed,
            "error": error,
        }
        result = StepResult(state, reward, done, info)
        self.episode.steps.append((kind, result))
        if done:
            self._done = True
            if verdict == BENIGN:
                self.episode.outcome = EVADED
                self.episode.evader = new
            else:
                self.episode.outcome = FAILED
        return result

    def truncate(self) -> None:
        """End an in-flight episode early (mutation budget exhausted)."""
        if self.episode is not None and not self._done:
            self.episode.outcome = FAILED
            self.episode.truncated = True
            self._done = True

    def harvest_evader(self) -> bytes:
        if self.episode is None or self.episode.outcome != EVADED:
            raise NotEvaded("the current episode did not evade")
        return self.episode.evader


def play(env: EvasionEnv, sample: bytes, sample_id: str, choose, max_steps: Optional[int] = None) -> Episode:
    """Run one episode, picking actions with ``choose(state) -> index``."""
    state = env.reset(sample, sample_id)
    if isinstance(state, Skipped):
        return env.episode
    steps = 0
    while True:
        if max_steps is not None and steps >= max_steps:
            env.truncate()
            break
        result = env.step(choose(state))
        steps += 1
        state = result.state
        if result.done:
            break
    return env.episode


def random_policy(env: EvasionEnv, sample: bytes, rng: np.random.Generator, sample_id: str = "") -> Episode:
    """Control arm: every action drawn uniformly from the active action set."""
    return play(env, sample, sample_id, lambda _state: int(rng.integers(env.n_actions)))
