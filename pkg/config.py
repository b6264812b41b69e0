"""
Configuration
Typed experiment settings with key=value file, environment and CLI overrides.
Precedence: defaults < config file < ACTORLOOP_* environment variables < CLI flags.
"""

import dataclasses
import logging
import math
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

from errors import ConfigurationError

logger = logging.getLogger(__name__)

ENV_PREFIX = "ACTORLOOP_"

ALGORITHMS = ("dqn", "dqfd", "r2d2", "r2d3", "impala", "ddpg", "d4pg", "mpo", "dmpo", "mcts", "bc")
CONTINUOUS_ALGORITHMS = ("ddpg", "d4pg")
SEQUENCE_ALGORITHMS = ("r2d2", "r2d3", "impala")
DEMO_ALGORITHMS = ("dqfd", "r2d3")


@dataclass
class AgentConfig:
    algorithm: str = "dqn"
    hidden_sizes: Tuple[int, ...] = (64, 64)
    recurrent_size: int = 32
    gamma: float = 0.99
    n_step: int = 5
    sequence_length: int = 20
    sequence_period: int = 10
    burn_in_length: int = 4
    batch_size: int = 256
    samples_per_insert: float = 32.0
    spi_tolerance: float = 1.0
    use_rate_limiter: bool = True
    min_replay_size: int = 1000
    replay_capacity: int = 1_000_000
    prioritized: bool = True
    priority_exponent: float = 0.6
    importance_exponent: float = 0.4
    target_update_mode: str = "periodic"
    target_update_period: int = 100
    polyak_tau: float = 0.005
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epsilon_mode: str = "linear"
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 0
    exploration_sigma: float = 0.1
    dueling: bool = False
    use_stored_state: bool = True
    priority_eta: float = 0.9
    entropy_coeff: float = 0.01
    baseline_cost: float = 0.5
    rho_clip: float = 1.0
    c_clip: float = 1.0
    num_atoms: int = 51
    v_min: float = -10.0
    v_max: float = 10.0
    mpo_epsilon: float = 0.01
    mpo_epsilon_eta: float = 0.1
    mpo_init_eta: float = 1.0
    mpo_init_alpha: float = 1.0
    mpo_dual_learning_rate: float = 0.01
    mpo_num_samples: int = 20
    mcts_num_simulations: int = 50
    mcts_max_depth: int = 50
    mcts_uct_c: float = 1.0
    mcts_unvisited_value: float = 1.0
    mcts_value_target: str = "mc"
    mcts_n_step: int = 10
    demo_ratio: float = 0.25
    demo_file: Optional[str] = None
    variable_update_period: int = 100
    seed: int = 0

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}; choose from {', '.join(ALGORITHMS)}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 <= self.demo_ratio <= 1.0:
            raise ConfigurationError("demo_ratio must lie in [0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if self.n_step < 1:
            raise ConfigurationError("n_step must be >= 1")
        if not 1 <= self.sequence_period <= self.sequence_length:
            raise ConfigurationError("need 1 <= sequence_period <= sequence_length")
        if not 0 <= self.burn_in_length < self.sequence_length:
            raise ConfigurationError("burn_in_length must lie in [0, sequence_length)")
        if self.samples_per_insert <= 0 or self.spi_tolerance <= 0:
            raise ConfigurationError("samples_per_insert and spi_tolerance must be positive")
        if self.replay_capacity < 1 or not 1 <= self.min_replay_size <= self.replay_capacity:
            raise ConfigurationError("need 1 <= min_replay_size <= replay_capacity")
        if self.epsilon_mode not in ("linear", "log_uniform", "fixed"):
            raise ConfigurationError(f"unknown epsilon_mode {self.epsilon_mode!r}")
        if self.target_update_mode not in ("periodic", "polyak"):
            raise ConfigurationError(f"unknown target_update_mode {self.target_update_mode!r}")
        if self.target_update_period < 1 or self.variable_update_period < 1:
            raise ConfigurationError("update periods must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.mcts_value_target not in ("mc", "n-step"):
            raise ConfigurationError("mcts_value_target must be 'mc' or 'n-step'")
        if not math.isfinite(self.mcts_unvisited_value):
            raise ConfigurationError("mcts_unvisited_value must be finite")
        if self.num_atoms < 1 or self.v_min >= self.v_max:
            raise ConfigurationError("need num_atoms >= 1 and v_min < v_max")
        if self.mpo_num_samples < 2 and self.algorithm in ("mpo", "dmpo"):
            raise ConfigurationError("MPO needs at least 2 candidate actions per state")
        if self.algorithm in DEMO_ALGORITHMS and self.demo_ratio > 0 and not self.demo_file:
            logger.info("No demo_file configured; demonstrations must be supplied programmatically")
        return self


@dataclass
class EnvConfig:
    env_name: str = "gridworld"
    env_size: Optional[int] = None
    episode_cap: Optional[int] = None
    mdp_seed: int = 0

    def validate(self):
        from environments import ENVIRONMENTS
        if self.env_name not in ENVIRONMENTS:
            raise ConfigurationError(f"unknown environment {self.env_name!r}")
        if self.episode_cap is not None and self.episode_cap < 1:
            raise ConfigurationError("episode_cap must be >= 1")
        return self


@dataclass
class ExperimentConfig:
    agent: AgentConfig = field(default_factory=AgentConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    mode: str = "single_process"
    num_actors: int = 1
    total_actor_steps: int = 10_000
    eval_period: int = 1000
    eval_episodes: int = 1
    logdir: str = "runs"
    checkpoint_period: int = 1000
    replay_transport: str = "inprocess"
    parameter_store: str = "memory"
    seed: int = 0

    def validate(self):
        self.agent.validate()
        self.env.validate()
        if self.mode not in ("single_process", "distributed"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.num_actors < 1:
            raise ConfigurationError("num_actors must be >= 1")
        if self.eval_period < 1 or self.checkpoint_period < 1:
            raise ConfigurationError("periods must be >= 1")
        if self.total_actor_steps < 0:
            raise ConfigurationError("total_actor_steps must be >= 0")
        if self.replay_transport not in ("inprocess", "socket"):
            raise ConfigurationError(f"unknown replay_transport {self.replay_transport!r}")
        if self.parameter_store not in ("memory", "redis"):
            raise ConfigurationError(f"unknown parameter_store {self.parameter_store!r}")
        if self.replay_transport == "socket" and self.mode != "distributed":
            raise ConfigurationError("replay_transport=socket needs mode=distributed")
        from environments import ENVIRONMENTS
        kind = ENVIRONMENTS[self.env.env_name]
        if self.agent.algorithm in CONTINUOUS_ALGORITHMS and kind != "continuous":
            raise ConfigurationError(f"{self.agent.algorithm} needs a continuous-action environment")
        if self.agent.algorithm in ("dqn", "dqfd", "r2d2", "r2d3", "impala", "mcts") and kind != "discrete":
            raise ConfigurationError(f"{self.agent.algorithm} needs a discrete-action environment")
        return self


def _coerce(value: str, hint: Any, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value.strip().lower() in ("", "none", "null"):
            return None
        hint = next(arg for arg in args if arg is not type(None))
        origin = typing.get_origin(hint)
        args = typing.get_args(hint)
    try:
        if origin is tuple:
            return tuple(int(part) for part in value.split(",") if part.strip())
        if hint is bool:
            lowered = value.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigurationError(f"invalid value {value!r} for {key}")


def _targets(config: ExperimentConfig):
    return [config, config.agent, config.env]


def apply_overrides(config: ExperimentConfig, overrides: Mapping[str, Any], source: str = "override"):
    """Set fields by flat key; a key present on several sections (seed) sets all of them"""
    for key, value in overrides.items():
        if value is None:
            continue
        matched = False
        for target in _targets(config):
            hints = typing.get_type_hints(type(target))
            if key in hints and key not in ("agent", "env"):
                coerced = _coerce(value, hints[key], key) if isinstance(value, str) else value
                setattr(target, key, coerced)
                matched = True
        if not matched:
            raise ConfigurationError(f"unknown configuration key {key!r} from {source}")
    return config


def parse_config_file(path: str) -> Dict[str, str]:
    values = {}
    with open(path, "r") as f:
        for number, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{number}: expected key=value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def environment_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    known = set()
    for cls in (ExperimentConfig, AgentConfig, EnvConfig):
        known.update(f.name for f in dataclasses.fields(cls))
    overrides = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key in known and key not in ("agent", "env"):
            overrides[key] = value
    return overrides


def load_config(path: Optional[str] = None, cli_overrides: Optional[Mapping[str, Any]] = None,
                environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    config = ExperimentConfig()
    if path:
        apply_overrides(config, parse_config_file(path), source=path)
    apply_overrides(config, environment_overrides(environ), source="environment")
    if cli_overrides:
        apply_overrides(config, cli_overrides, source="command line")
    return config.validate()


def config_items(config: ExperimentConfig) -> Dict[str, Any]:
    """Flat view used when logging the resolved configuration"""
    items = {}
    for target in _targets(config):
        for f in dataclasses.fields(target):
            if f.name not in ("agent", "env"):
                items[f.name] = getattr(target, f.name)
    return items
