"""
Agents
Acting policies, actors, and the builder that assembles tables, adders,
networks, learners and actors from an ExperimentConfig. Single-process and
distributed runs both construct their components through AgentBuilder.
"""

import logging
from typing import Callable, Dict, Hashable, Optional, Tuple

import numpy as np

import codec
from adders import Adder, EpisodeAdder, NStepTransitionAdder, SequenceAdder
from config import CONTINUOUS_ALGORITHMS, DEMO_ALGORITHMS, SEQUENCE_ALGORITHMS, ExperimentConfig
from core import Actor, BoundedActionSpec, DiscreteActionSpec, TimeStep, VariableClient, VariableSource
from datasets import MixedDataset, ReplayDataset
from errors import ConfigurationError
from kernels import categorical_support
from learners import (LOG_STD_MAX, LOG_STD_MIN, BCLearner, BaseLearner, D4PGLearner, DQNLearner, ImpalaLearner,
                      MCTSLearner, MPOLearner, R2D2Learner, unprefixed)
from neural import DenseNet, GRUCell, Head, Optimizer, Params, RecurrentNet, log_softmax, softmax
from replay import RateLimiterConfig, RemoverKind, SamplerKind, TableConfig
from search import Simulator, mcts_search

logger = logging.getLogger(__name__)

LOG_UNIFORM_EPSILON_RANGE = (1e-3, 0.4)

Extras = Dict[str, np.ndarray]


class EpsilonGreedy:
    """epsilon schedule: linear decay, a per-actor log-uniform draw, or a fixed value"""

    def __init__(self, mode: str = "linear", start: float = 1.0, end: float = 0.05, decay_steps: int = 0,
                 rng: Optional[np.random.Generator] = None):
        if mode not in ("linear", "log_uniform", "fixed"):
            raise ValueError(f"unknown epsilon mode {mode!r}")
        self.mode = mode
        self.start = start
        self.end = end
        self.decay_steps = decay_steps
        self.steps = 0
        self._log_uniform = None
        if mode == "log_uniform":
            low, high = LOG_UNIFORM_EPSILON_RANGE
            draw_rng = rng if rng is not None else np.random.default_rng()
            self._log_uniform = float(np.exp(draw_rng.uniform(np.log(low), np.log(high))))

    @property
    def epsilon(self) -> float:
        if self.mode == "fixed":
            return self.start
        if self.mode == "log_uniform":
            return self._log_uniform
        if self.decay_steps <= 0:
            return self.end
        fraction = min(self.steps / self.decay_steps, 1.0)
        return self.start + fraction * (self.end - self.start)

    def choose(self, q_values: np.ndarray, rng: np.random.Generator) -> int:
        epsilon = self.epsilon
        self.steps += 1
        if rng.random() < epsilon:
            return int(rng.integers(len(q_values)))
        return int(np.argmax(q_values))


# Policies map (params, observation) to (action, extras). `greedy` selects the
# noise-free action used by evaluators.

class QPolicy:
    def __init__(self, network: DenseNet, exploration: Optional[EpsilonGreedy] = None):
        self.network = network
        self.exploration = exploration

    def __call__(self, params: Params, observation: np.ndarray, rng: np.random.Generator,
                 greedy: bool = False) -> Tuple[int, Extras]:
        q, _ = self.network.forward(params, observation)
        if greedy or self.exploration is None:
            return int(np.argmax(q[0])), {}
        return self.exploration.choose(q[0], rng), {}


class CategoricalPolicy:
    """Samples from softmax over the first `num_actions` outputs and records the log-probability"""

    def __init__(self, network: DenseNet, num_actions: int):
        self.network = network
        self.num_actions = num_actions

    def __call__(self, params, observation, rng, greedy=False):
        outputs, tape = self.network.forward(params, observation)
        logits = tape.logits[0, :self.num_actions]
        if greedy:
            return int(np.argmax(logits)), {}
        log_probs = log_softmax(logits)
        action = int(rng.choice(self.num_actions, p=np.exp(log_probs)))
        return action, {"log_prob": float(log_probs[action])}


class DeterministicPolicy:
    """Deterministic policy plus Gaussian noise of scale sigma * (high - low), clipped to the bounds"""

    def __init__(self, network: DenseNet, sigma: float = 0.1):
        self.network = network
        self.sigma = sigma

    def __call__(self, params, observation, rng, greedy=False):
        outputs, _ = self.network.forward(params, observation)
        action = outputs[0]
        if not greedy and self.sigma > 0:
            scale = self.sigma * (self.network.high - self.network.low)
            action = action + scale * rng.standard_normal(action.shape)
        return np.clip(action, self.network.low, self.network.high), {}


class GaussianPolicy:
    def __init__(self, network: DenseNet, low: np.ndarray, high: np.ndarray):
        self.network = network
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)

    def __call__(self, params, observation, rng, greedy=False):
        outputs, _ = self.network.forward(params, observation)
        dim = outputs.shape[1] // 2
        mean = outputs[0, :dim]
        if greedy:
            return np.clip(mean, self.low, self.high), {}
        std = np.exp(np.clip(outputs[0, dim:], LOG_STD_MIN, LOG_STD_MAX))
        return np.clip(mean + std * rng.standard_normal(dim), self.low, self.high), {}


class FeedForwardActor(Actor):
    """Stateless actor: policy over the latest pulled parameters, experience sent to an adder"""

    def __init__(self, policy: Callable, variable_client: VariableClient, adder: Optional[Adder] = None,
                 rng: Optional[np.random.Generator] = None, greedy: bool = False):
        super().__init__()
        self._policy = policy
        self._client = variable_client
        self._adder = adder
        self._rng = rng if rng is not None else np.random.default_rng()
        self._greedy = greedy
        self._extras: Extras = {}

    def _params(self) -> Params:
        params = self._client.params
        if params is None:
            self._client.update_and_wait()
            params = self._client.params
            if params is None:
                raise ConfigurationError("variable source has not published parameters")
        return params

    def select_action(self, observation: np.ndarray):
        action, self._extras = self._policy(self._params(), observation, self._rng, self._greedy)
        return action

    def _observe_first(self, timestep: TimeStep):
        if self._adder is not None:
            self._adder.add_first(timestep)

    def _observe(self, action, next_timestep: TimeStep):
        if self._adder is not None:
            self._adder.add(action, next_timestep, extras=self._extras)

    def update(self, wait: bool = False):
        self._client.update(wait)


class RecurrentActor(FeedForwardActor):
    """epsilon-greedy over a recurrent Q-network; hands the adder the state held before each observation"""

    def __init__(self, network: RecurrentNet, variable_client: VariableClient, adder: Optional[Adder] = None,
                 exploration: Optional[EpsilonGreedy] = None, rng: Optional[np.random.Generator] = None,
                 greedy: bool = False):
        super().__init__(None, variable_client, adder, rng, greedy)
        self.network = network
        self.exploration = exploration
        self.state = network.cell.initial_state(1)
        self._next_state: Optional[np.ndarray] = None

    def select_action(self, observation: np.ndarray):
        q, self._next_state = self.network.step(self._params(), self.state, observation)
        if self._greedy or self.exploration is None:
            return int(np.argmax(q))
        return self.exploration.choose(q, self._rng)

    def _observe_first(self, timestep: TimeStep):
        self.state = self.network.cell.initial_state(1)
        self._next_state = None
        if self._adder is not None:
            self._adder.add_first(timestep, self.state[0])

    def _observe(self, action, next_timestep: TimeStep):
        if self._next_state is not None:
            self.state = self._next_state
        if self._adder is not None:
            self._adder.add(action, next_timestep, self.state[0])


class MctsActor(FeedForwardActor):
    """Plans with MCTS against a perfect simulator using the published policy and value networks"""

    def __init__(self, simulator: Simulator, state_fn: Callable[[], Hashable], policy_net: DenseNet,
                 value_net: DenseNet, variable_client: VariableClient, adder: Optional[Adder] = None,
                 num_simulations: int = 50, max_depth: int = 50, uct_c: float = 1.0, gamma: float = 1.0,
                 unvisited_value: float = 1.0, temperature: float = 1.0, sample: bool = False,
                 rng: Optional[np.random.Generator] = None, greedy: bool = False):
        super().__init__(None, variable_client, adder, rng, greedy)
        self.simulator = simulator
        self.state_fn = state_fn
        self.policy_net = policy_net
        self.value_net = value_net
        self.num_simulations = num_simulations
        self.max_depth = max_depth
        self.uct_c = uct_c
        self.gamma = gamma
        self.unvisited_value = unvisited_value
        self.temperature = temperature
        self.sample = sample
        self.last_search = None

    def search(self, observation: np.ndarray):
        state = self.state_fn()
        if not np.array_equal(self.simulator.observation(state), np.asarray(observation, dtype=np.float64)):
            raise ValueError("simulator state does not match the environment observation")
        params = self._params()
        policy_params = unprefixed("policy", params)
        value_params = unprefixed("value", params)

        def policy_fn(obs):
            _, tape = self.policy_net.forward(policy_params, obs)
            return softmax(tape.logits[0])

        def value_fn(obs):
            values, _ = self.value_net.forward(value_params, obs)
            return float(values[0, 0])

        return mcts_search(state, self.simulator, policy_fn, value_fn, self.num_simulations, self.max_depth,
                           self.uct_c, self.gamma, self.temperature, self.unvisited_value)

    def select_action(self, observation: np.ndarray):
        result = self.search(observation)
        self.last_search = result
        self._extras = {"search_policy": result.search_policy}
        if self.sample and not self._greedy:
            return int(self._rng.choice(len(result.search_policy), p=result.search_policy))
        return result.action


def expected_tag(algorithm: str) -> int:
    if algorithm == "mcts":
        return codec.EPISODE_TAG
    if algorithm in SEQUENCE_ALGORITHMS:
        return codec.SEQUENCE_TAG
    return codec.TRANSITION_TAG


class AgentBuilder:
    """Builds every component of one algorithm for a given environment"""

    def __init__(self, config: ExperimentConfig, environment):
        self.config = config
        self.agent = config.agent
        self.algorithm = config.agent.algorithm
        self.observation_size = environment.observation_spec().size
        self.action_spec = environment.action_spec()
        self.episode_cap = getattr(environment, "episode_cap", None)
        self.continuous = isinstance(self.action_spec, BoundedActionSpec)
        if self.algorithm in CONTINUOUS_ALGORITHMS and not self.continuous:
            raise ConfigurationError(f"{self.algorithm} needs a continuous action space")
        if self.algorithm in ("dqn", "dqfd", "r2d2", "r2d3", "impala", "mcts") and self.continuous:
            raise ConfigurationError(f"{self.algorithm} needs a discrete action space")
        self.tag = expected_tag(self.algorithm)
        self._networks = self._make_networks()

    # -- sizes ---------------------------------------------------------------

    @property
    def num_actions(self) -> int:
        if isinstance(self.action_spec, DiscreteActionSpec):
            return self.action_spec.num_values
        raise ConfigurationError("continuous action space has no action count")

    @property
    def action_dim(self) -> int:
        return self.action_spec.size

    def _hidden(self, inputs: int, outputs: int):
        return [inputs, *self.agent.hidden_sizes, outputs]

    @property
    def distributional(self) -> bool:
        return self.algorithm in ("d4pg", "dmpo") and self.agent.num_atoms > 1

    def support(self) -> Optional[np.ndarray]:
        if not self.distributional:
            return None
        return categorical_support(self.agent.v_min, self.agent.v_max, self.agent.num_atoms)

    def _make_networks(self) -> Dict[str, object]:
        a = self.agent
        obs = self.observation_size
        if self.algorithm in ("dqn", "dqfd"):
            if a.dueling:
                return {"q": DenseNet(self._hidden(obs, self.num_actions + 1), head=Head.DUELING)}
            return {"q": DenseNet(self._hidden(obs, self.num_actions))}
        if self.algorithm in ("r2d2", "r2d3"):
            cell = GRUCell(obs, a.recurrent_size)
            head = DenseNet([a.recurrent_size, *a.hidden_sizes, self.num_actions])
            return {"q": RecurrentNet(cell, head)}
        if self.algorithm == "impala":
            return {"net": DenseNet(self._hidden(obs, self.num_actions + 1))}
        if self.algorithm in ("ddpg", "d4pg"):
            low, high = self.action_spec.low, self.action_spec.high
            policy = DenseNet(self._hidden(obs, self.action_dim), head=Head.TANH_SCALED, action_low=low,
                              action_high=high)
            return {"policy": policy, "critic": self._critic(obs + self.action_dim, 1)}
        if self.algorithm in ("mpo", "dmpo"):
            if self.continuous:
                return {"policy": DenseNet(self._hidden(obs, 2 * self.action_dim)),
                        "critic": self._critic(obs + self.action_dim, 1)}
            return {"policy": DenseNet(self._hidden(obs, self.num_actions)),
                    "critic": self._critic(obs, self.num_actions)}
        if self.algorithm == "mcts":
            return {"policy": DenseNet(self._hidden(obs, self.num_actions)), "value": DenseNet(self._hidden(obs, 1))}
        if self.algorithm == "bc":
            if self.continuous:
                return {"policy": DenseNet(self._hidden(obs, self.action_dim), head=Head.TANH_SCALED,
                                           action_low=self.action_spec.low, action_high=self.action_spec.high)}
            return {"policy": DenseNet(self._hidden(obs, self.num_actions))}
        raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")

    def _critic(self, inputs: int, num_outputs: int) -> DenseNet:
        if self.distributional:
            atoms = self.agent.num_atoms
            return DenseNet(self._hidden(inputs, num_outputs * atoms), head=Head.CATEGORICAL, num_atoms=atoms)
        return DenseNet(self._hidden(inputs, num_outputs))

    @property
    def networks(self) -> Dict[str, object]:
        return self._networks

    # -- replay ----------------------------------------------------------------

    def make_table_config(self, seed: Optional[int] = None, name: str = "replay",
                          rate_limited: bool = True) -> TableConfig:
        a = self.agent
        limiter = None
        if a.use_rate_limiter and rate_limited:
            limiter = RateLimiterConfig(samples_per_insert=a.samples_per_insert, tolerance=a.spi_tolerance,
                                        min_size_to_sample=a.min_replay_size)
        if self.algorithm == "impala":
            return TableConfig(capacity=a.replay_capacity, sampler=SamplerKind.FIFO, remover=RemoverKind.FIFO,
                               min_size_to_sample=min(a.batch_size, a.replay_capacity), seed=seed, name=name)
        sampler = SamplerKind.PRIORITY if a.prioritized else SamplerKind.UNIFORM
        return TableConfig(capacity=a.replay_capacity, sampler=sampler, priority_exponent=a.priority_exponent,
                           remover=RemoverKind.FIFO, rate_limiter=limiter,
                           min_size_to_sample=min(a.min_replay_size, a.replay_capacity), seed=seed, name=name)

    def demo_table_config(self, capacity: int, seed: Optional[int] = None) -> TableConfig:
        sampler = SamplerKind.PRIORITY if self.agent.prioritized else SamplerKind.UNIFORM
        return TableConfig(capacity=max(capacity, 1), sampler=sampler, priority_exponent=self.agent.priority_exponent,
                           seed=seed, name="demonstrations")

    def make_adder(self, table=None) -> Adder:
        a = self.agent
        if self.algorithm in ("r2d2", "r2d3"):
            return SequenceAdder(a.sequence_length, a.sequence_period, a.burn_in_length, table=table,
                                 state_dim=a.recurrent_size)
        if self.algorithm == "impala":
            return SequenceAdder(a.sequence_length, a.sequence_period, 0, table=table, state_dim=0)
        if self.algorithm == "mcts":
            return EpisodeAdder(max_length=self.episode_cap, table=table)
        n = 1 if self.algorithm == "bc" else a.n_step
        return NStepTransitionAdder(n, a.gamma, table=table)

    def make_dataset(self, table, demo_table=None, timeout: Optional[float] = None):
        if self.algorithm in DEMO_ALGORITHMS and self.agent.demo_ratio > 0:
            return MixedDataset(table, demo_table, self.agent.batch_size, self.agent.demo_ratio, self.tag, timeout)
        return ReplayDataset(table, self.agent.batch_size, self.tag, timeout)

    # -- learners --------------------------------------------------------------

    def _optimizer(self) -> Optimizer:
        return Optimizer(learning_rate=self.agent.learning_rate, kind=self.agent.optimizer)

    def make_learner(self, dataset, seed: Optional[int] = None) -> BaseLearner:
        a = self.agent
        seed = a.seed if seed is None else seed
        nets = self._networks
        target = dict(target_update_mode=a.target_update_mode, target_update_period=a.target_update_period,
                      polyak_tau=a.polyak_tau)
        importance = a.importance_exponent if a.prioritized else 0.0
        if self.algorithm in ("dqn", "dqfd"):
            return DQNLearner(nets["q"], dataset, self._optimizer(), importance_exponent=importance, seed=seed,
                              **target)
        if self.algorithm in ("r2d2", "r2d3"):
            return R2D2Learner(nets["q"], dataset, self._optimizer(), gamma=a.gamma, importance_exponent=importance,
                               priority_eta=a.priority_eta, use_stored_state=a.use_stored_state, seed=seed,
                               **target)
        if self.algorithm == "impala":
            return ImpalaLearner(nets["net"], dataset, self._optimizer(), gamma=a.gamma,
                                 entropy_coeff=a.entropy_coeff, baseline_cost=a.baseline_cost, rho_clip=a.rho_clip,
                                 c_clip=a.c_clip, seed=seed)
        if self.algorithm in ("ddpg", "d4pg"):
            return D4PGLearner(nets["policy"], nets["critic"], dataset, self._optimizer(), self._optimizer(),
                               support=self.support(), seed=seed, **target)
        if self.algorithm in ("mpo", "dmpo"):
            low = self.action_spec.low if self.continuous else None
            high = self.action_spec.high if self.continuous else None
            return MPOLearner(nets["policy"], nets["critic"], dataset, self._optimizer(), self._optimizer(),
                              continuous=self.continuous, support=self.support(), action_low=low, action_high=high,
                              epsilon=a.mpo_epsilon, epsilon_eta=a.mpo_epsilon_eta, init_eta=a.mpo_init_eta,
                              init_alpha=a.mpo_init_alpha, dual_learning_rate=a.mpo_dual_learning_rate,
                              num_samples=a.mpo_num_samples, seed=seed, **target)
        if self.algorithm == "mcts":
            return MCTSLearner(nets["policy"], nets["value"], dataset, self._optimizer(), gamma=a.gamma,
                               value_target=a.mcts_value_target, n_step=a.mcts_n_step, seed=seed)
        return BCLearner(nets["policy"], dataset, self._optimizer(), seed=seed)

    # -- actors ----------------------------------------------------------------

    def make_exploration(self, rng: np.random.Generator) -> EpsilonGreedy:
        a = self.agent
        decay = a.epsilon_decay_steps or max(1, int(0.1 * self.config.total_actor_steps))
        return EpsilonGreedy(a.epsilon_mode, a.epsilon_start, a.epsilon_end, decay, rng)

    def make_policy(self, rng: np.random.Generator):
        a = self.agent
        nets = self._networks
        if self.algorithm in ("dqn", "dqfd"):
            return QPolicy(nets["q"], self.make_exploration(rng))
        if self.algorithm == "impala":
            return CategoricalPolicy(nets["net"], self.num_actions)
        if self.algorithm in ("ddpg", "d4pg"):
            return DeterministicPolicy(nets["policy"], a.exploration_sigma)
        if self.algorithm in ("mpo", "dmpo"):
            if self.continuous:
                return GaussianPolicy(nets["policy"], self.action_spec.low, self.action_spec.high)
            return CategoricalPolicy(nets["policy"], self.num_actions)
        if self.algorithm == "bc":
            if self.continuous:
                return DeterministicPolicy(nets["policy"], 0.0)
            return QPolicy(nets["policy"])
        raise ConfigurationError(f"{self.algorithm} has no feed-forward policy")

    def make_actor(self, variable_source: VariableSource, environment=None, adder: Optional[Adder] = None,
                   seed: Optional[int] = None, evaluation: bool = False) -> Actor:
        """Evaluation actors act greedily and never own an adder"""
        a = self.agent
        rng = np.random.default_rng(a.seed if seed is None else seed)
        client = VariableClient(variable_source, update_period=a.variable_update_period)
        if evaluation:
            adder = None
        if self.algorithm in ("r2d2", "r2d3"):
            return RecurrentActor(self._networks["q"], client, adder, self.make_exploration(rng), rng, evaluation)
        if self.algorithm == "mcts":
            if environment is None:
                raise ConfigurationError("the search actor needs its environment's simulator")
            return MctsActor(environment.simulator(), lambda: environment.state, self._networks["policy"],
                             self._networks["value"], client, adder, num_simulations=a.mcts_num_simulations,
                             max_depth=a.mcts_max_depth, uct_c=a.mcts_uct_c, gamma=a.gamma,
                             unvisited_value=a.mcts_unvisited_value, rng=rng,
                             greedy=evaluation)
        return FeedForwardActor(self.make_policy(rng), client, adder, rng, evaluation)

    def samples_per_step(self) -> float:
        """Actor steps per learner step implied by SPI and batch size"""
        return self.agent.batch_size / self.agent.samples_per_insert

    def describe(self) -> str:
        extra = f", atoms={self.agent.num_atoms}" if self.distributional else ""
        return f"{self.algorithm} on obs={self.observation_size} actions={self.action_spec}{extra}"
