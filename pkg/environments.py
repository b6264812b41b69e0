"""
Environments
Native toy tasks covering exploration, memory and basic control, plus the
tabular value-iteration oracle used throughout the tests.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Hashable, List, Optional, Tuple

import numpy as np

from codec import Episode
from core import (BoundedActionSpec, DiscreteActionSpec, Environment, ObservationSpec, TimeStep, restart,
                  termination, transition, truncation)
from errors import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvDescriptor:
    name: str
    observation_spec: ObservationSpec
    action_spec: object
    episode_cap: int
    size: int = 0

    def __post_init__(self):
        if self.episode_cap < 1:
            raise ValueError("episode cap must be >= 1")


@dataclass
class TabularMdp:
    transitions: np.ndarray
    rewards: np.ndarray
    start_state: int = 0
    terminal_states: FrozenSet[int] = field(default_factory=frozenset)
    gamma: float = 0.9

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        num_states, num_actions, num_next = self.transitions.shape
        if num_states != num_next:
            raise ValueError("transition tensor must be S x A x S")
        if self.rewards.shape != (num_states, num_actions):
            raise ValueError("reward tensor must be S x A")
        if not np.allclose(self.transitions.sum(axis=2), 1.0, atol=1e-12, rtol=0.0):
            raise ValueError("transition rows must sum to 1")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        self.terminal_states = frozenset(int(s) for s in self.terminal_states)

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def deterministic(self) -> bool:
        return bool(np.all(np.isclose(self.transitions.max(axis=2), 1.0)))


def value_iteration(mdp: TabularMdp, gamma: Optional[float] = None, tol: float = 1e-10,
                    max_iterations: int = 100_000) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bellman optimality iteration; terminal states have value 0. Returns (V*, Q*, pi*)"""
    gamma = mdp.gamma if gamma is None else gamma
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if gamma == 1.0 and not mdp.terminal_states:
        raise ValueError("gamma = 1 requires an episodic MDP with terminal states")
    continuing = np.ones(mdp.num_states)
    continuing[list(mdp.terminal_states)] = 0.0
    values = np.zeros(mdp.num_states)
    for _ in range(max_iterations):
        q = mdp.rewards + gamma * mdp.transitions @ values
        q *= continuing[:, None]
        new_values = q.max(axis=1)
        if np.max(np.abs(new_values - values)) < tol:
            values = new_values
            break
        values = new_values
    else:
        raise ValueError("value iteration did not converge")
    q = (mdp.rewards + gamma * mdp.transitions @ values) * continuing[:, None]
    return values, q, np.argmax(q, axis=1)


def random_mdp(num_states: int, num_actions: int, seed: int, gamma: float = 0.9) -> TabularMdp:
    if num_states < 1 or num_actions < 1:
        raise ValueError("sizes must be >= 1")
    rng = np.random.default_rng(seed)
    transitions = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    transitions /= transitions.sum(axis=2, keepdims=True)
    rewards = rng.uniform(0.0, 1.0, size=(num_states, num_actions))
    return TabularMdp(transitions=transitions, rewards=rewards, start_state=0, gamma=gamma)


def chain_mdp(length: int = 3) -> TabularMdp:
    """States 0..length; action 1 moves right, 0 moves left; reaching `length` pays 1 and ends"""
    if length < 1:
        raise ValueError("chain length must be >= 1")
    num_states = length + 1
    transitions = np.zeros((num_states, 2, num_states))
    rewards = np.zeros((num_states, 2))
    for s in range(num_states):
        if s == length:
            transitions[s, :, s] = 1.0
            continue
        transitions[s, 0, max(s - 1, 0)] = 1.0
        transitions[s, 1, s + 1] = 1.0
        if s + 1 == length:
            rewards[s, 1] = 1.0
    return TabularMdp(transitions, rewards, start_state=0, terminal_states=frozenset({length}), gamma=0.9)


GRID_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


def gridworld_mdp(rows: int = 4, cols: int = 4, walls: Tuple[Tuple[int, int], ...] = ((1, 1), (2, 1)),
                  goal: Optional[Tuple[int, int]] = None, wall_penalty: float = 0.0,
                  gamma: float = 0.9) -> TabularMdp:
    """Actions up, right, down, left; bumping a wall or the border keeps the state"""
    goal = goal or (rows - 1, cols - 1)
    num_states = rows * cols
    transitions = np.zeros((num_states, 4, num_states))
    rewards = np.zeros((num_states, 4))
    blocked = set(walls)
    goal_index = goal[0] * cols + goal[1]
    for r in range(rows):
        for c in range(cols):
            s = r * cols + c
            for a, (dr, dc) in enumerate(GRID_MOVES):
                if s == goal_index or (r, c) in blocked:
                    transitions[s, a, s] = 1.0
                    continue
                nr, nc = r + dr, c + dc
                if not (0 <= nr < rows and 0 <= nc < cols) or (nr, nc) in blocked:
                    transitions[s, a, s] = 1.0
                    rewards[s, a] = wall_penalty
                    continue
                ns = nr * cols + nc
                transitions[s, a, ns] = 1.0
                if ns == goal_index:
                    rewards[s, a] = 1.0
    return TabularMdp(transitions, rewards, start_state=0, terminal_states=frozenset({goal_index}), gamma=gamma)


class SeededEnvironment(Environment):
    """Environment with its own random stream and an episode cap"""

    def __init__(self, episode_cap: int, seed: Optional[int] = None):
        super().__init__()
        if episode_cap < 1:
            raise ValueError("episode cap must be >= 1")
        self.episode_cap = episode_cap
        self._rng = np.random.default_rng(seed)
        self._t = 0

    def _emit(self, reward: float, observation: np.ndarray, terminal: bool) -> TimeStep:
        self._t += 1
        if terminal:
            return termination(reward, observation)
        if self._t >= self.episode_cap:
            return truncation(reward, observation)
        return transition(reward, observation)

    def oracle_action(self):
        raise NotImplementedError(f"{type(self).__name__} has no oracle policy")

    def descriptor(self) -> EnvDescriptor:
        return EnvDescriptor(name=type(self).__name__, observation_spec=self.observation_spec(),
                             action_spec=self.action_spec(), episode_cap=self.episode_cap)


class TabularSimulator:
    def __init__(self, mdp: TabularMdp):
        if not mdp.deterministic:
            raise ConfigurationError("search needs a deterministic MDP")
        self.mdp = mdp
        self.num_actions = mdp.num_actions

    def step(self, state: Hashable, action: int) -> Tuple[Hashable, float, bool]:
        next_state = int(np.argmax(self.mdp.transitions[state, action]))
        return next_state, float(self.mdp.rewards[state, action]), next_state in self.mdp.terminal_states

    def observation(self, state: Hashable) -> np.ndarray:
        return np.eye(self.mdp.num_states)[state]


class TabularEnvironment(SeededEnvironment):
    """Walks a TabularMdp with one-hot observations"""

    def __init__(self, mdp: TabularMdp, episode_cap: int = 100, seed: Optional[int] = None, name: str = "tabular"):
        super().__init__(episode_cap, seed)
        self.mdp = mdp
        self.name = name
        self.state = mdp.start_state
        self._policy: Optional[np.ndarray] = None

    def _obs(self) -> np.ndarray:
        return np.eye(self.mdp.num_states)[self.state]

    def _reset(self) -> TimeStep:
        self._t = 0
        self.state = self.mdp.start_state
        return restart(self._obs())

    def _step(self, action) -> TimeStep:
        reward = float(self.mdp.rewards[self.state, action])
        self.state = int(self._rng.choice(self.mdp.num_states, p=self.mdp.transitions[self.state, action]))
        return self._emit(reward, self._obs(), self.state in self.mdp.terminal_states)

    def observation_spec(self) -> ObservationSpec:
        return ObservationSpec((self.mdp.num_states,))

    def action_spec(self) -> DiscreteActionSpec:
        return DiscreteActionSpec(self.mdp.num_actions)

    def simulator(self) -> TabularSimulator:
        return TabularSimulator(self.mdp)

    def oracle_action(self) -> int:
        if self._policy is None:
            _, _, self._policy = value_iteration(self.mdp)
        return int(self._policy[self.state])

    def descriptor(self) -> EnvDescriptor:
        return EnvDescriptor(self.name, self.observation_spec(), self.action_spec(), self.episode_cap,
                             self.mdp.num_states)


class DeepSeaSimulator:
    """Deep Sea dynamics; `action_mapping[row, col]` is the action that moves right in that cell"""

    def __init__(self, size: int, action_mapping: Optional[np.ndarray] = None):
        self.size = size
        self.num_actions = 2
        self.action_mapping = np.ones((size, size), dtype=np.int64) if action_mapping is None else action_mapping
        if self.action_mapping.shape != (size, size):
            raise ValueError(f"action mapping must have shape {(size, size)}")

    def right_action(self, state) -> int:
        row, col = state
        return int(self.action_mapping[row, col])

    def step(self, state, action):
        row, col = state
        moves_right = int(action) == self.right_action(state)
        col = min(col + 1, self.size) if moves_right else max(col - 1, 0)
        reward = -0.01 / self.size if moves_right else 0.0
        row += 1
        terminal = row == self.size
        if terminal and col == self.size:
            reward += 1.0
        return (row, col), reward, terminal

    def observation(self, state) -> np.ndarray:
        row, col = state
        obs = np.zeros(self.size * self.size)
        if row < self.size:
            obs[row * self.size + col] = 1.0
        return obs


class DeepSea(SeededEnvironment):
    """N x N descent grid: only the all-right path reaches the treasure.

    Moving right costs 0.01 / N, moving left is free. Which action moves right is
    drawn per cell from `mapping_seed`, so environments built with the same mapping
    seed share it whatever their episode seed; `randomize_actions=False` makes
    action 1 right everywhere. The stochastic variant flips the executed action
    with `flip_probability`.
    """

    def __init__(self, size: int = 10, stochastic: bool = False, flip_probability: Optional[float] = None,
                 seed: Optional[int] = None, mapping_seed: int = 0, randomize_actions: bool = True):
        if size < 2:
            raise ValueError("deep sea size must be >= 2")
        super().__init__(size, seed)
        self.size = size
        self.stochastic = stochastic
        self.flip_probability = (1.0 / size if flip_probability is None else flip_probability) if stochastic else 0.0
        mapping = None
        if randomize_actions:
            mapping = np.random.default_rng(mapping_seed).binomial(1, 0.5, (size, size)).astype(np.int64)
        self._model = DeepSeaSimulator(size, mapping)
        self.state = (0, 0)

    @property
    def action_mapping(self) -> np.ndarray:
        return self._model.action_mapping

    def _reset(self) -> TimeStep:
        self._t = 0
        self.state = (0, 0)
        return restart(self._model.observation(self.state))

    def _step(self, action) -> TimeStep:
        if self.stochastic and self._rng.random() < self.flip_probability:
            action = 1 - action
        self.state, reward, terminal = self._model.step(self.state, action)
        return self._emit(reward, self._model.observation(self.state), terminal)

    def observation_spec(self) -> ObservationSpec:
        return ObservationSpec((self.size * self.size,))

    def action_spec(self) -> DiscreteActionSpec:
        return DiscreteActionSpec(2)

    def simulator(self) -> DeepSeaSimulator:
        if self.stochastic:
            raise ConfigurationError("the stochastic deep sea has no perfect simulator")
        return self._model

    def oracle_action(self) -> int:
        return self._model.right_action(self.state)

    @property
    def optimal_return(self) -> float:
        return 1.0 - 0.01

    def descriptor(self) -> EnvDescriptor:
        name = "deep_sea_stochastic" if self.stochastic else "deep_sea"
        return EnvDescriptor(name, self.observation_spec(), self.action_spec(), self.episode_cap, self.size)


def make_deep_sea(size: int, stochastic: bool = False, seed: Optional[int] = None, **kwargs) -> DeepSea:
    return DeepSea(size=size, stochastic=stochastic, seed=seed, **kwargs)


def record_episode(environment: Environment, policy: Callable[[np.ndarray], object]) -> Episode:
    timestep = environment.reset()
    observations, actions, rewards = [timestep.observation], [], []
    while not timestep.last():
        action = policy(timestep.observation)
        timestep = environment.step(action)
        observations.append(timestep.observation)
        actions.append(np.asarray(action, dtype=np.float64))
        rewards.append(timestep.reward)
    return Episode(observations=np.stack(observations), actions=np.stack(actions),
                   rewards=np.asarray(rewards), truncated=timestep.truncated)


def deep_sea_demonstrations(environment: DeepSea, num_demos: Optional[int] = None,
                            success_fraction: float = 0.8, seed: int = 0) -> List[Episode]:
    """Deterministic: one all-right demonstration. Stochastic: size * 10 demos, 80/20 success mix"""
    if not environment.stochastic:
        return [record_episode(environment, lambda obs: environment.oracle_action()) for _ in range(num_demos or 1)]
    num_demos = num_demos or environment.size * 10
    num_success = int(round(success_fraction * num_demos))
    rng = np.random.default_rng(seed)
    successes, failures = [], []
    attempts = 0
    while len(successes) < num_success or len(failures) < num_demos - num_success:
        attempts += 1
        if attempts > 1000 * num_demos:
            raise RuntimeError("could not assemble the requested demonstration mix")
        if len(successes) < num_success:
            episode = record_episode(environment, lambda obs: environment.oracle_action())
        else:
            episode = record_episode(environment, lambda obs: int(rng.integers(2)))
        succeeded = episode.rewards[-1] > 0.5
        if succeeded and len(successes) < num_success:
            successes.append(episode)
        elif not succeeded and len(failures) < num_demos - num_success:
            failures.append(episode)
    demos = successes + failures
    order = rng.permutation(len(demos))
    return [demos[i] for i in order]


class TMaze(SeededEnvironment):
    """Corridor of length T with a cue shown only at step 0.

    Observation: [cue_left, cue_right, junction_flag, t / T]. Any action moves
    along the corridor; at the junction action 0 goes left and 1 goes right,
    paying +1 when it matches the cue and -1 otherwise.
    """

    def __init__(self, corridor_length: int = 10, seed: Optional[int] = None):
        if corridor_length < 0:
            raise ValueError("corridor length must be >= 0")
        super().__init__(corridor_length + 1, seed)
        self.corridor_length = corridor_length
        self.cue = 0
        self.position = 0

    def _obs(self) -> np.ndarray:
        obs = np.zeros(4)
        if self.position == 0:
            obs[self.cue] = 1.0
        if self.position == self.corridor_length:
            obs[2] = 1.0
        obs[3] = self.position / self.corridor_length if self.corridor_length else 1.0
        return obs

    def _reset(self) -> TimeStep:
        self._t = 0
        self.cue = int(self._rng.integers(2))
        self.position = 0
        return restart(self._obs())

    def _step(self, action) -> TimeStep:
        if self.position == self.corridor_length:
            reward = 1.0 if action == self.cue else -1.0
            return self._emit(reward, np.zeros(4), True)
        self.position += 1
        return self._emit(0.0, self._obs(), False)

    def observation_spec(self) -> ObservationSpec:
        return ObservationSpec((4,))

    def action_spec(self) -> DiscreteActionSpec:
        return DiscreteActionSpec(2)

    def oracle_action(self) -> int:
        return self.cue

    def descriptor(self) -> EnvDescriptor:
        return EnvDescriptor("tmaze", self.observation_spec(), self.action_spec(), self.episode_cap,
                             self.corridor_length)


def make_tmaze(corridor_length: int, seed: Optional[int] = None) -> TMaze:
    return TMaze(corridor_length, seed)


DT = 0.05


class PointMass(SeededEnvironment):
    """1-D point mass, force in [-1, 1], semi-implicit Euler with dt = 0.05, no gravity.

    v' = v + u dt, x' = x + v' dt. Reward 1 inside |x| < 0.1, otherwise 1 - tanh|x|.
    Episodes last 200 steps and start at rest with x ~ U[-0.3, 0.3].
    """

    TARGET = 0.1

    def __init__(self, episode_cap: int = 200, start_range: float = 0.3, seed: Optional[int] = None):
        super().__init__(episode_cap, seed)
        self.start_range = start_range
        self.position = 0.0
        self.velocity = 0.0

    def _obs(self) -> np.ndarray:
        return np.array([self.position, self.velocity])

    def reward(self) -> float:
        distance = abs(self.position)
        return 1.0 if distance < self.TARGET else float(1.0 - np.tanh(distance))

    def _reset(self) -> TimeStep:
        self._t = 0
        self.position = float(self._rng.uniform(-self.start_range, self.start_range))
        self.velocity = 0.0
        return restart(self._obs())

    def set_state(self, position: float, velocity: float):
        self.position, self.velocity = float(position), float(velocity)

    def _step(self, action) -> TimeStep:
        force = float(np.asarray(action).reshape(-1)[0])
        self.velocity += force * DT
        self.position += self.velocity * DT
        return self._emit(self.reward(), self._obs(), False)

    def observation_spec(self) -> ObservationSpec:
        return ObservationSpec((2,))

    def action_spec(self) -> BoundedActionSpec:
        return BoundedActionSpec((-1.0,), (1.0,))

    def oracle_action(self) -> np.ndarray:
        return bang_bang_policy(self._obs())

    @property
    def max_return(self) -> float:
        return float(self.episode_cap)

    def descriptor(self) -> EnvDescriptor:
        return EnvDescriptor("point_mass", self.observation_spec(), self.action_spec(), self.episode_cap, 1)


def bang_bang_policy(observation: np.ndarray, gain: float = 50.0) -> np.ndarray:
    """Full force toward the switching curve x + v|v|/2 = 0, saturated"""
    x, v = float(observation[0]), float(observation[1])
    return np.array([float(np.clip(-gain * (x + v * abs(v) / 2.0), -1.0, 1.0))])


class Pendulum(SeededEnvironment):
    """Frictionless pendulum, theta = 0 hanging, torque in [-2, 2], semi-implicit Euler dt = 0.05.

    Reward (1 - cos theta) / 2 is 1 upright. Observation [cos theta, sin theta, omega].
    """

    GRAVITY = 9.81
    MAX_TORQUE = 2.0

    def __init__(self, episode_cap: int = 200, initial_angle: float = 0.0, seed: Optional[int] = None):
        super().__init__(episode_cap, seed)
        self.initial_angle = initial_angle
        self.angle = initial_angle
        self.angular_velocity = 0.0

    def _obs(self) -> np.ndarray:
        return np.array([np.cos(self.angle), np.sin(self.angle), self.angular_velocity])

    def energy(self) -> float:
        return 0.5 * self.angular_velocity ** 2 - self.GRAVITY * np.cos(self.angle)

    def _reset(self) -> TimeStep:
        self._t = 0
        self.angle = self.initial_angle
        self.angular_velocity = 0.0
        return restart(self._obs())

    def _step(self, action) -> TimeStep:
        torque = float(np.asarray(action).reshape(-1)[0])
        self.angular_velocity += (-self.GRAVITY * np.sin(self.angle) + torque) * DT
        self.angle += self.angular_velocity * DT
        reward = float((1.0 - np.cos(self.angle)) / 2.0)
        return self._emit(reward, self._obs(), False)

    def observation_spec(self) -> ObservationSpec:
        return ObservationSpec((3,))

    def action_spec(self) -> BoundedActionSpec:
        return BoundedActionSpec((-self.MAX_TORQUE,), (self.MAX_TORQUE,))

    def descriptor(self) -> EnvDescriptor:
        return EnvDescriptor("pendulum", self.observation_spec(), self.action_spec(), self.episode_cap, 1)


def make_point_mass(seed: Optional[int] = None, **kwargs) -> PointMass:
    return PointMass(seed=seed, **kwargs)


def make_pendulum(seed: Optional[int] = None, **kwargs) -> Pendulum:
    return Pendulum(seed=seed, **kwargs)


class BanditSimulator:
    def __init__(self, means: np.ndarray):
        self.means = means
        self.num_actions = len(means)

    def step(self, state, action):
        return "done", float(self.means[action]), True

    def observation(self, state) -> np.ndarray:
        return np.ones(1)


class Bandit(SeededEnvironment):
    """One-step multi-armed bandit with a constant observation; optional Gaussian reward noise"""

    def __init__(self, means=(0.2, 0.8), noise: float = 0.0, seed: Optional[int] = None):
        super().__init__(1, seed)
        self.means = np.asarray(means, dtype=np.float64)
        if len(self.means) < 1:
            raise ValueError("bandit needs at least one arm")
        self.noise = noise
        self.state = "root"

    def _reset(self) -> TimeStep:
        self._t = 0
        self.state = "root"
        return restart(np.ones(1))

    def _step(self, action) -> TimeStep:
        reward = float(self.means[action])
        if self.noise:
            reward += float(self._rng.normal(0.0, self.noise))
        self.state = "done"
        return self._emit(reward, np.ones(1), True)

    def observation_spec(self) -> ObservationSpec:
        return ObservationSpec((1,))

    def action_spec(self) -> DiscreteActionSpec:
        return DiscreteActionSpec(len(self.means))

    def simulator(self) -> BanditSimulator:
        return BanditSimulator(self.means)

    def oracle_action(self) -> int:
        return int(np.argmax(self.means))

    def descriptor(self) -> EnvDescriptor:
        return EnvDescriptor("bandit", self.observation_spec(), self.action_spec(), 1, len(self.means))


def make_environment(name: str, seed: Optional[int] = None, size: Optional[int] = None,
                     episode_cap: Optional[int] = None, mdp_seed: int = 0) -> SeededEnvironment:
    """Factory used by the runtime and CLI"""
    if name == "chain":
        env = TabularEnvironment(chain_mdp(size or 3), episode_cap=episode_cap or 10 * (size or 3),
                                 seed=seed, name="chain")
    elif name == "gridworld":
        side = size or 4
        env = TabularEnvironment(gridworld_mdp(side, side), episode_cap=episode_cap or 50, seed=seed,
                                 name="gridworld")
    elif name == "random_mdp":
        env = TabularEnvironment(random_mdp(size or 20, 4, seed=mdp_seed), episode_cap=episode_cap or 50,
                                 seed=seed, name="random_mdp")
    elif name == "deep_sea":
        env = DeepSea(size or 10, seed=seed, mapping_seed=mdp_seed)
    elif name == "deep_sea_stochastic":
        env = DeepSea(size or 10, stochastic=True, seed=seed, mapping_seed=mdp_seed)
    elif name == "tmaze":
        env = TMaze(10 if size is None else size, seed=seed)
    elif name == "point_mass":
        env = PointMass(episode_cap=episode_cap or 200, seed=seed)
    elif name == "pendulum":
        env = Pendulum(episode_cap=episode_cap or 200, seed=seed)
    elif name == "bandit":
        env = Bandit(seed=seed)
    else:
        raise ConfigurationError(f"unknown environment {name!r}")
    return env


ENVIRONMENTS: Dict[str, str] = {
    "chain": "discrete", "gridworld": "discrete", "random_mdp": "discrete", "deep_sea": "discrete",
    "deep_sea_stochastic": "discrete", "tmaze": "discrete", "point_mass": "continuous",
    "pendulum": "continuous", "bandit": "discrete",
}
