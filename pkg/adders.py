"""
Adders
Turn an actor's observe stream into replay items: n-step transitions, fixed-length
sequence slices with burn-in and overlap, and whole episodes.
"""

import abc
import collections
import logging
from dataclasses import dataclass
from typing import Callable, Deque, Dict, List, Optional, Tuple

import numpy as np

import codec
from codec import Episode, Item, SequenceSlice, Transition
from core import TimeStep
from errors import ProtocolError

logger = logging.getLogger(__name__)

PriorityFn = Callable[[Item], float]


@dataclass(frozen=True)
class AdderConfig:
    n: int = 5
    gamma: float = 0.99
    sequence_length: int = 20
    period: int = 10
    burn_in_length: int = 4
    max_episode_length: Optional[int] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.sequence_length < 1 or not 1 <= self.period <= self.sequence_length:
            raise ValueError("need 1 <= period <= sequence_length")
        if not 0 <= self.burn_in_length < self.sequence_length:
            raise ValueError("burn_in_length must lie in [0, sequence_length)")


class Adder(abc.ABC):
    """Base adder; emitted items are inserted into `table` when one is given"""

    def __init__(self, table=None, priority_fn: Optional[PriorityFn] = None):
        self._table = table
        self._priority_fn = priority_fn or (lambda item: 1.0)
        self._started = False
        self.num_emitted = 0

    def _emit(self, items: List[Item]) -> List[Item]:
        for item in items:
            if self._table is not None:
                self._table.insert(codec.encode(item), self._priority_fn(item))
            self.num_emitted += 1
        return items

    def _check_started(self):
        if not self._started:
            raise ProtocolError("add called before add_first")

    @abc.abstractmethod
    def add_first(self, timestep: TimeStep, *args):
        ...

    @abc.abstractmethod
    def add(self, action, next_timestep: TimeStep, *args, **kwargs) -> List[Item]:
        ...

    def reset(self):
        self._started = False


class NStepTransitionAdder(Adder):
    """Overlapping n-step transitions with stride 1; partial windows flushed at episode end"""

    def __init__(self, n: int, gamma: float, table=None, priority_fn: Optional[PriorityFn] = None):
        super().__init__(table, priority_fn)
        if n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        self.n = n
        self.gamma = gamma
        self._buffer: Deque[Tuple[np.ndarray, np.ndarray, float]] = collections.deque()
        self._observation: Optional[np.ndarray] = None

    def add_first(self, timestep: TimeStep, *args):
        if not timestep.first():
            raise ProtocolError("add_first expects a FIRST time step")
        self._buffer.clear()
        self._observation = timestep.observation
        self._started = True

    def _window(self, next_observation: np.ndarray, terminal: bool) -> Transition:
        observation, action, _ = self._buffer[0]
        reward = 0.0
        for i, (_, _, r) in enumerate(self._buffer):
            reward += (self.gamma ** i) * r
        n_actual = len(self._buffer)
        discount = 0.0 if terminal else self.gamma ** n_actual
        return Transition(observation=observation, action=np.asarray(action, dtype=np.float64),
                          reward=reward, discount=discount, next_observation=next_observation,
                          n_actual=n_actual)

    def add(self, action, next_timestep: TimeStep, *args, **kwargs) -> List[Transition]:
        self._check_started()
        if next_timestep.first():
            raise ProtocolError("add received a FIRST time step")
        self._buffer.append((self._observation, np.asarray(action, dtype=np.float64), next_timestep.reward))
        self._observation = next_timestep.observation
        terminal = next_timestep.last() and not next_timestep.truncated
        emitted = []
        if len(self._buffer) == self.n:
            emitted.append(self._window(next_timestep.observation, terminal))
            self._buffer.popleft()
        if next_timestep.last():
            while self._buffer:
                emitted.append(self._window(next_timestep.observation, terminal))
                self._buffer.popleft()
            self._started = False
        return self._emit(emitted)


class SequenceAdder(Adder):
    """Fixed-length slices every `period` steps, padded with a validity mask at episode end.

    The recurrent state passed to add_first / add is the state the actor holds
    before processing the accompanying observation.
    """

    def __init__(self, sequence_length: int, period: int, burn_in_length: int = 0, table=None,
                 priority_fn: Optional[PriorityFn] = None, state_dim: Optional[int] = None):
        super().__init__(table, priority_fn)
        if sequence_length < 1 or not 1 <= period <= sequence_length:
            raise ValueError("need 1 <= period <= sequence_length")
        if not 0 <= burn_in_length < sequence_length:
            raise ValueError("burn_in_length must lie in [0, sequence_length)")
        self.sequence_length = sequence_length
        self.period = period
        self.burn_in_length = burn_in_length
        self.state_dim = state_dim
        self._steps: List[Dict[str, np.ndarray]] = []
        self._observation: Optional[np.ndarray] = None
        self._state: Optional[np.ndarray] = None
        self._next_start = 0
        self._covered = 0

    def _check_state(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64).reshape(-1)
        if self.state_dim is None:
            self.state_dim = state.shape[0]
        elif state.shape[0] != self.state_dim:
            raise ValueError(f"recurrent state has dimension {state.shape[0]}, expected {self.state_dim}")
        return state

    def add_first(self, timestep: TimeStep, recurrent_state=None):
        if not timestep.first():
            raise ProtocolError("add_first expects a FIRST time step")
        if recurrent_state is None:
            recurrent_state = np.zeros(self.state_dim or 0)
        self._state = self._check_state(recurrent_state)
        self._observation = timestep.observation
        self._steps = []
        self._next_start = 0
        self._covered = 0
        self._started = True

    def add(self, action, next_timestep: TimeStep, recurrent_state=None,
            extras: Optional[Dict[str, float]] = None) -> List[SequenceSlice]:
        self._check_started()
        if next_timestep.first():
            raise ProtocolError("add received a FIRST time step")
        terminal = next_timestep.last() and not next_timestep.truncated
        self._steps.append({
            "observation": self._observation,
            "action": np.asarray(action, dtype=np.float64),
            "reward": next_timestep.reward,
            "discount": 0.0 if terminal else 1.0,
            "state": self._state,
            "log_prob": float((extras or {}).get("log_prob", 0.0)),
        })
        self._observation = next_timestep.observation
        if recurrent_state is None:
            recurrent_state = np.zeros(self.state_dim or 0)
        self._state = self._check_state(recurrent_state)

        emitted = []
        count = len(self._steps)
        while self._next_start + self.sequence_length <= count:
            emitted.append(self._slice(self._next_start))
            self._covered = self._next_start + self.sequence_length
            self._next_start += self.period
        if next_timestep.last():
            if self._covered < count and self._next_start < count:
                emitted.append(self._slice(self._next_start))
            self._steps = []
            self._started = False
        return self._emit(emitted)

    def _observation_at(self, index: int) -> np.ndarray:
        if index < len(self._steps):
            return self._steps[index]["observation"]
        return self._observation

    def _slice(self, start: int) -> SequenceSlice:
        length = self.sequence_length
        steps = self._steps[start:start + length]
        valid = len(steps)
        obs_shape = np.shape(self._observation)
        action_shape = np.shape(steps[0]["action"])
        observations = np.zeros((length + 1,) + obs_shape)
        actions = np.zeros((length,) + action_shape)
        rewards = np.zeros(length)
        discounts = np.zeros(length)
        mask = np.zeros(length)
        log_probs = np.zeros(length)
        for i, step in enumerate(steps):
            observations[i] = step["observation"]
            actions[i] = step["action"]
            rewards[i] = step["reward"]
            discounts[i] = step["discount"]
            mask[i] = 1.0
            log_probs[i] = step["log_prob"]
        observations[valid] = self._observation_at(start + valid)
        return SequenceSlice(observations=observations, actions=actions, rewards=rewards,
                             discounts=discounts, mask=mask, start_state=steps[0]["state"],
                             burn_in_length=self.burn_in_length, is_episode_start=start == 0,
                             behavior_log_probs=log_probs)


class EpisodeAdder(Adder):
    """Whole trajectories, emitted once at episode end or at `max_length` with a truncation flag"""

    def __init__(self, max_length: Optional[int] = None, table=None, priority_fn: Optional[PriorityFn] = None):
        super().__init__(table, priority_fn)
        if max_length is not None and max_length < 1:
            raise ValueError("max_length must be >= 1")
        self.max_length = max_length
        self._observations: List[np.ndarray] = []
        self._actions: List[np.ndarray] = []
        self._rewards: List[float] = []
        self._policies: List[np.ndarray] = []

    def add_first(self, timestep: TimeStep, *args):
        if not timestep.first():
            raise ProtocolError("add_first expects a FIRST time step")
        self._observations = [timestep.observation]
        self._actions, self._rewards, self._policies = [], [], []
        self._started = True

    def add(self, action, next_timestep: TimeStep, *args,
            extras: Optional[Dict[str, np.ndarray]] = None, **kwargs) -> List[Episode]:
        if next_timestep.first():
            raise ProtocolError("add received a FIRST time step")
        if not self._started:
            if self._observations:
                # remainder of an episode already emitted as truncated
                if next_timestep.last():
                    self._observations = []
                return []
            raise ProtocolError("add called before add_first")
        self._observations.append(next_timestep.observation)
        self._actions.append(np.asarray(action, dtype=np.float64))
        self._rewards.append(next_timestep.reward)
        if extras and "search_policy" in extras:
            self._policies.append(np.asarray(extras["search_policy"], dtype=np.float64))
        capped = self.max_length is not None and len(self._rewards) >= self.max_length
        if not (next_timestep.last() or capped):
            return []
        truncated = next_timestep.truncated or (capped and not next_timestep.last())
        if truncated and not next_timestep.truncated:
            logger.warning(f"Episode truncated at {len(self._rewards)} steps")
        policies = np.stack(self._policies) if len(self._policies) == len(self._rewards) else np.zeros((0, 0))
        episode = Episode(observations=np.stack(self._observations), actions=np.stack(self._actions),
                          rewards=np.asarray(self._rewards), search_policies=policies, truncated=truncated)
        self._started = False
        if next_timestep.last():
            self._observations = []
        return self._emit([episode])
