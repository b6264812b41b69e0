"""
Core Interfaces
Environment, actor, learner, agent and variable-source contracts plus the
environment loop that mediates their interaction.
"""

import abc
import enum
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from errors import ProtocolError, SpecViolationError, TransientError

logger = logging.getLogger(__name__)


class StepType(enum.IntEnum):
    FIRST = 0
    MID = 1
    LAST = 2


@dataclass(frozen=True)
class TimeStep:
    """One environment emission: reward r_t, observation o_{t+1}, end flag e_{t+1}"""
    step_type: StepType
    reward: float
    observation: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise ValueError(f"reward must be finite, got {self.reward}")
        if self.step_type == StepType.FIRST and self.reward != 0.0:
            raise ValueError("FIRST time steps carry zero reward")

    def first(self) -> bool:
        return self.step_type == StepType.FIRST

    def mid(self) -> bool:
        return self.step_type == StepType.MID

    def last(self) -> bool:
        return self.step_type == StepType.LAST

    @property
    def episode_end(self) -> bool:
        return self.step_type == StepType.LAST


def restart(observation) -> TimeStep:
    return TimeStep(StepType.FIRST, 0.0, np.asarray(observation, dtype=np.float64))


def transition(reward: float, observation) -> TimeStep:
    return TimeStep(StepType.MID, float(reward), np.asarray(observation, dtype=np.float64))


def termination(reward: float, observation) -> TimeStep:
    return TimeStep(StepType.LAST, float(reward), np.asarray(observation, dtype=np.float64))


def truncation(reward: float, observation) -> TimeStep:
    """Episode cap reached: still LAST, but the value beyond it is not zero"""
    return TimeStep(StepType.LAST, float(reward), np.asarray(observation, dtype=np.float64), truncated=True)


@dataclass(frozen=True)
class DiscreteActionSpec:
    num_values: int

    def __post_init__(self):
        if self.num_values < 1:
            raise ValueError("discrete action spec needs at least one action")

    @property
    def shape(self) -> Tuple[int, ...]:
        return ()

    @property
    def size(self) -> int:
        return 1

    def validate(self, action) -> int:
        value = np.asarray(action)
        if value.size != 1:
            raise SpecViolationError(f"action {action!r} is not a discrete index")
        scalar = value.reshape(()).item()
        if isinstance(scalar, float) and not scalar.is_integer():
            raise SpecViolationError(f"action {action!r} is not a discrete index")
        index = int(scalar)
        if not 0 <= index < self.num_values:
            raise SpecViolationError(f"action {index} outside [0, {self.num_values})")
        return index


@dataclass(frozen=True)
class BoundedActionSpec:
    low: Tuple[float, ...]
    high: Tuple[float, ...]

    def __post_init__(self):
        if len(self.low) != len(self.high) or not self.low:
            raise ValueError("low and high must be non-empty and of equal length")
        if any(lo >= hi for lo, hi in zip(self.low, self.high)):
            raise ValueError("continuous bounds need low < high elementwise")

    @property
    def shape(self) -> Tuple[int, ...]:
        return (len(self.low),)

    @property
    def size(self) -> int:
        return len(self.low)

    def clip(self, action) -> np.ndarray:
        return np.clip(np.asarray(action, dtype=np.float64), self.low, self.high)

    def validate(self, action) -> np.ndarray:
        value = np.asarray(action, dtype=np.float64).reshape(-1)
        if value.shape != self.shape:
            raise SpecViolationError(f"action shape {value.shape} != {self.shape}")
        if not np.all(np.isfinite(value)):
            raise SpecViolationError("action contains non-finite values")
        if np.any(value < np.asarray(self.low)) or np.any(value > np.asarray(self.high)):
            raise SpecViolationError(f"action {value} outside bounds [{self.low}, {self.high}]")
        return value


ActionSpec = Union[DiscreteActionSpec, BoundedActionSpec]


@dataclass(frozen=True)
class ObservationSpec:
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    def validate(self, observation) -> np.ndarray:
        value = np.asarray(observation, dtype=np.float64)
        if value.shape != self.shape:
            raise SpecViolationError(f"observation shape {value.shape} != {self.shape}")
        return value


@dataclass(frozen=True)
class ParameterSnapshot:
    """Immutable, versioned copy of named parameter tensors"""
    version: int
    tensors: Tuple[Tuple[str, np.ndarray], ...]

    @classmethod
    def from_params(cls, version: int, params: Dict[str, np.ndarray]) -> "ParameterSnapshot":
        frozen = []
        for name, value in params.items():
            array = np.array(value, dtype=np.float64, copy=True)
            array.setflags(write=False)
            frozen.append((name, array))
        return cls(version=int(version), tensors=tuple(frozen))

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: np.array(value, copy=True) for name, value in self.tensors}

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.tensors]

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [value.shape for _, value in self.tensors]


@dataclass
class LoopResult:
    episode_return: float
    episode_length: int
    actor_steps_total: int


class Counter:
    """Thread-safe named counters shared between workers"""

    def __init__(self, **initial: int):
        self._lock = threading.Lock()
        self._counts: Dict[str, int] = dict(initial)

    def increment(self, **deltas: int) -> Dict[str, int]:
        with self._lock:
            for key, delta in deltas.items():
                self._counts[key] = self._counts.get(key, 0) + delta
            return dict(self._counts)

    def get(self, key: str, default: int = 0) -> int:
        with self._lock:
            return self._counts.get(key, default)

    def get_counts(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._counts)


class Environment(abc.ABC):
    """Environment contract; enforces reset before step and no step after LAST"""

    def __init__(self):
        self._needs_reset = True

    def reset(self) -> TimeStep:
        self._needs_reset = False
        timestep = self._reset()
        if not timestep.first():
            raise ProtocolError("reset must return a FIRST time step")
        return timestep

    def step(self, action) -> TimeStep:
        if self._needs_reset:
            raise ProtocolError("step called before reset or after the episode ended")
        action = self.action_spec().validate(action)
        timestep = self._step(action)
        if timestep.last():
            self._needs_reset = True
        return timestep

    @abc.abstractmethod
    def _reset(self) -> TimeStep:
        """Start a new episode"""

    @abc.abstractmethod
    def _step(self, action) -> TimeStep:
        """Advance one step with a validated action"""

    @abc.abstractmethod
    def observation_spec(self) -> ObservationSpec:
        ...

    @abc.abstractmethod
    def action_spec(self) -> ActionSpec:
        ...


class Actor(abc.ABC):
    """Acting contract. Subclasses implement the underscored hooks."""

    def __init__(self):
        self._in_episode = False

    @abc.abstractmethod
    def select_action(self, observation: np.ndarray):
        ...

    def observe_first(self, timestep: TimeStep):
        if not timestep.first():
            raise ProtocolError("observe_first expects a FIRST time step")
        self._in_episode = True
        self._observe_first(timestep)

    def observe(self, action, next_timestep: TimeStep):
        if not self._in_episode:
            raise ProtocolError("observe called before observe_first")
        if next_timestep.first():
            raise ProtocolError("observe received a FIRST time step")
        self._observe(action, next_timestep)
        if next_timestep.last():
            self._in_episode = False

    def update(self, wait: bool = False):
        """Pull fresh parameters (plain actors) or learn (agents)"""

    def _observe_first(self, timestep: TimeStep):
        pass

    def _observe(self, action, next_timestep: TimeStep):
        pass


class VariableSource(abc.ABC):
    @abc.abstractmethod
    def get_snapshot(self) -> Optional[ParameterSnapshot]:
        """Latest published parameters, or None before the first publication"""


class Learner(VariableSource):
    """Consumes sampled experience and publishes parameter snapshots"""

    @abc.abstractmethod
    def step(self) -> Dict[str, float]:
        """Run one learning step and return its metrics"""

    def state_dict(self) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        raise NotImplementedError


class VariableClient:
    """Pull-based parameter client polling a variable source every `update_period` calls"""

    def __init__(self, source: VariableSource, update_period: int = 100,
                 max_retries: int = 3, retry_delay: float = 0.05):
        if update_period < 1:
            raise ValueError("update_period must be >= 1")
        self._source = source
        self._update_period = update_period
        self._max_retries = max_retries
        self._retry_delay = retry_delay
        self._calls = 0
        self._snapshot: Optional[ParameterSnapshot] = None

    @property
    def version(self) -> int:
        return -1 if self._snapshot is None else self._snapshot.version

    @property
    def snapshot(self) -> Optional[ParameterSnapshot]:
        return self._snapshot

    @property
    def params(self) -> Optional[Dict[str, np.ndarray]]:
        if self._snapshot is None:
            return None
        return {name: value for name, value in self._snapshot.tensors}

    def update(self, wait: bool = False) -> bool:
        self._calls += 1
        if wait or self._calls >= self._update_period:
            self._calls = 0
            return self.update_and_wait()
        return False

    def update_and_wait(self) -> bool:
        snapshot = None
        for attempt in range(self._max_retries + 1):
            try:
                snapshot = self._source.get_snapshot()
                break
            except TransientError as e:
                if attempt == self._max_retries:
                    logger.error(f"Variable source unreachable after {attempt + 1} attempts: {e}")
                    raise
                logger.warning(f"Variable source unavailable, retrying: {e}")
                time.sleep(self._retry_delay * (2 ** attempt))
        if snapshot is None:
            return False
        if self._snapshot is None or snapshot.version > self._snapshot.version:
            self._snapshot = snapshot
            return True
        return False


class LearningSchedule(abc.ABC):
    @abc.abstractmethod
    def should_step(self, num_observations: int, steps_this_call: int) -> bool:
        ...


class FixedRatioSchedule(LearningSchedule):
    """One learner step every `observations_per_step` observations (fractions allowed)"""

    def __init__(self, min_observations: int = 0, observations_per_step: float = 1.0,
                 can_sample: Optional[Callable[[], bool]] = None):
        if observations_per_step <= 0:
            raise ValueError("observations_per_step must be positive")
        self.min_observations = min_observations
        self.observations_per_step = observations_per_step
        self._can_sample = can_sample

    def due(self, num_observations: int) -> int:
        if num_observations < self.min_observations:
            return 0
        if self.observations_per_step >= 1:
            return int(num_observations % int(round(self.observations_per_step)) == 0)
        return int(round(1.0 / self.observations_per_step))

    def should_step(self, num_observations: int, steps_this_call: int) -> bool:
        if steps_this_call >= self.due(num_observations):
            return False
        return self._can_sample is None or self._can_sample()


class RateLimitedSchedule(LearningSchedule):
    """Step while the replay rate limiter admits a full batch"""

    def __init__(self, can_sample: Callable[[], bool], max_steps_per_call: int = 1000):
        self._can_sample = can_sample
        self._max_steps_per_call = max_steps_per_call

    def should_step(self, num_observations: int, steps_this_call: int) -> bool:
        return steps_this_call < self._max_steps_per_call and self._can_sample()


class Agent(Actor):
    """An actor that also owns a learner and runs it synchronously"""

    def __init__(self, actor: Actor, learner: Learner, schedule: LearningSchedule):
        super().__init__()
        self._actor = actor
        self._learner = learner
        self._schedule = schedule
        self._num_observations = 0
        self.last_metrics: Dict[str, float] = {}

    @property
    def actor(self) -> Actor:
        return self._actor

    @property
    def learner(self) -> Learner:
        return self._learner

    def select_action(self, observation):
        return self._actor.select_action(observation)

    def _observe_first(self, timestep: TimeStep):
        self._actor.observe_first(timestep)

    def _observe(self, action, next_timestep: TimeStep):
        self._num_observations += 1
        self._actor.observe(action, next_timestep)

    def update(self, wait: bool = False):
        steps = 0
        while self._schedule.should_step(self._num_observations, steps):
            self.last_metrics = self._learner.step()
            steps += 1
        if steps:
            self._actor.update(wait=True)


def run_episode(environment: Environment, actor: Actor, counter: Optional[Counter] = None) -> LoopResult:
    """reset, observe_first, then {select_action, step, observe, update} until LAST"""
    timestep = environment.reset()
    actor.observe_first(timestep)
    episode_return = 0.0
    episode_length = 0
    while not timestep.last():
        action = actor.select_action(timestep.observation)
        environment.action_spec().validate(action)
        timestep = environment.step(action)
        actor.observe(action, timestep)
        actor.update()
        episode_return += timestep.reward
        episode_length += 1
    if counter is not None:
        counts = counter.increment(actor_steps=episode_length, episodes=1)
        total = counts["actor_steps"]
    else:
        total = episode_length
    return LoopResult(episode_return=episode_return, episode_length=episode_length, actor_steps_total=total)


class EnvironmentLoop:
    """Runs episodes of one actor in one environment, single-worker confined"""

    def __init__(self, environment: Environment, actor: Actor, counter: Optional[Counter] = None,
                 should_stop: Optional[Callable[[], bool]] = None):
        self._environment = environment
        self._actor = actor
        self._counter = counter or Counter()
        self._should_stop = should_stop or (lambda: False)

    def run_episode(self) -> LoopResult:
        return run_episode(self._environment, self._actor, self._counter)

    def episodes(self, num_episodes: Optional[int] = None) -> Iterator[LoopResult]:
        count = 0
        while (num_episodes is None or count < num_episodes) and not self._should_stop():
            yield self.run_episode()
            count += 1

    def run(self, num_episodes: Optional[int] = None, num_steps: Optional[int] = None) -> List[LoopResult]:
        results = []
        steps = 0
        for result in self.episodes(num_episodes):
            results.append(result)
            steps += result.episode_length
            if num_steps is not None and steps >= num_steps:
                break
        return results


@dataclass
class LearnerClock:
    """Learner walltime accumulated from immediately after the first learner step"""
    walltime: float = 0.0
    _last: Optional[float] = field(default=None, repr=False)

    def tick(self):
        now = time.perf_counter()
        if self._last is not None:
            self.walltime += now - self._last
        self._last = now

    def resume(self):
        """Continue accumulating from now (after a checkpoint restore)"""
        self._last = time.perf_counter()
