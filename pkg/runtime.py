"""
Runtime
Single-process and distributed execution of one agent configuration, the
evaluator, offline training, dataset generation and the CSV run log.

Both modes build their components through agents.AgentBuilder and drive them
through core.run_episode and Learner.step.
"""

import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

import codec
from agents import AgentBuilder
from checkpoint import restore_checkpoint, save_checkpoint
from codec import Episode
from config import DEMO_ALGORITHMS, ExperimentConfig
from core import (Actor, Agent, BoundedActionSpec, Counter, Environment, EnvironmentLoop, FixedRatioSchedule,
                  RateLimitedSchedule, run_episode)
from datasets import FileDataset, episode_statistics, episodes_to_payloads, read_dataset, write_dataset
from environments import DeepSea, deep_sea_demonstrations, make_environment, record_episode
from errors import ClosedTableError, ConfigurationError, DivergenceError
from replay import CONSUMING_SAMPLERS, ReplayTable
from replay_server import ReplayClient, ReplayServer
from variable_source import ParameterServer

logger = logging.getLogger(__name__)

BASE_FIELDS = ["wall_ts", "actor_steps", "learner_steps", "learner_walltime_s", "eval_return", "realized_spi"]

LOSS_FIELDS: Dict[str, List[str]] = {
    "dqn": ["loss", "mean_abs_td"],
    "dqfd": ["loss", "mean_abs_td"],
    "r2d2": ["loss", "mean_abs_td", "loss_steps"],
    "r2d3": ["loss", "mean_abs_td", "loss_steps"],
    "impala": ["loss", "pg_loss", "value_loss", "entropy"],
    "ddpg": ["critic_loss", "policy_q", "action_clamped"],
    "d4pg": ["critic_loss", "policy_q", "action_clamped"],
    "mpo": ["critic_loss", "policy_loss", "kl", "eta", "alpha", "eta_clamped"],
    "dmpo": ["critic_loss", "policy_loss", "kl", "eta", "alpha", "eta_clamped"],
    "mcts": ["imitation_loss", "value_loss"],
    "bc": ["bc_loss"],
}

LOG_FILE = "log.csv"
CHECKPOINT_FILE = "checkpoint.ckpt"


def log_fields(algorithm: str) -> List[str]:
    return BASE_FIELDS + LOSS_FIELDS[algorithm]


def init_log(path: str, fields: Sequence[str]):
    """Create the log with its header row only"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    pd.DataFrame(columns=list(fields)).to_csv(path, index=False)


def log_append(path: str, record: Dict[str, float], fields: Sequence[str]):
    """Append one row; missing fields are left empty"""
    row = {name: record.get(name, np.nan) for name in fields}
    pd.DataFrame([row], columns=list(fields)).to_csv(path, mode="a", header=False, index=False)


def read_log(path: str) -> pd.DataFrame:
    return pd.read_csv(path)


@dataclass
class RunSummary:
    actor_steps: int = 0
    learner_steps: int = 0
    episodes: int = 0
    learner_walltime: float = 0.0
    realized_spi: float = 0.0
    records: List[Dict[str, float]] = field(default_factory=list)
    log_path: Optional[str] = None
    checkpoint_path: Optional[str] = None

    @property
    def eval_returns(self) -> List[float]:
        return [record["eval_return"] for record in self.records if not math.isnan(record["eval_return"])]


class RunLog:
    """Run records kept in memory and mirrored to CSV when a log directory is given"""

    def __init__(self, algorithm: str, logdir: Optional[str]):
        self.fields = log_fields(algorithm)
        self.records: List[Dict[str, float]] = []
        self.path = os.path.join(logdir, LOG_FILE) if logdir else None
        if self.path:
            init_log(self.path, self.fields)

    def append(self, record: Dict[str, float]):
        self.records.append(record)
        if self.path:
            log_append(self.path, record, self.fields)


def make_record(actor_steps: int, learner, eval_return: float, realized_spi: float,
                metrics: Optional[Dict[str, float]] = None) -> Dict[str, float]:
    record = dict(metrics or {})
    record.update(wall_ts=time.time(), actor_steps=actor_steps, learner_steps=learner.learner_steps,
                  learner_walltime_s=learner.clock.walltime, eval_return=eval_return, realized_spi=realized_spi)
    return record


def evaluate(environment: Environment, actor: Actor, episodes: int = 1) -> float:
    """Mean return of noise-free episodes; the evaluation actor never inserts into replay"""
    actor.update(wait=True)
    returns = [run_episode(environment, actor).episode_return for _ in range(episodes)]
    return float(np.mean(returns))


def evaluator_loop(environment: Environment, actor: Actor, counter: Counter, period: int,
                   should_stop: Callable[[], bool], on_record: Callable[[int, float], None],
                   poll_interval: float = 0.01):
    """Every `period` actor steps: pull the latest parameters and run one greedy episode"""
    next_milestone = period
    while not should_stop():
        steps = counter.get("actor_steps")
        if steps >= next_milestone:
            on_record(steps, evaluate(environment, actor))
            next_milestone = (steps // period + 1) * period
        else:
            time.sleep(poll_interval)


def demonstration_payloads(config: ExperimentConfig, builder: AgentBuilder) -> List[bytes]:
    """Demo file records, or generated demonstrations for the Deep Sea family"""
    agent = config.agent
    if agent.demo_file:
        _, payloads = read_dataset(agent.demo_file, builder.tag)
        logger.info(f"Loaded {len(payloads)} demonstration records from {agent.demo_file}")
        return payloads
    env = _environment(config, config.seed + 7)
    if not isinstance(env, DeepSea):
        raise ConfigurationError(f"{agent.algorithm} on {config.env.env_name} needs demo_file "
                                 f"(or demo_ratio=0)")
    episodes = deep_sea_demonstrations(env, seed=config.seed)
    state_dim = agent.recurrent_size if agent.algorithm == "r2d3" else 0
    payloads = episodes_to_payloads(episodes, builder.make_adder, state_dim)
    logger.info(f"Generated {len(episodes)} deep sea demonstrations ({len(payloads)} records)")
    return payloads


def make_demo_table(config: ExperimentConfig, builder: AgentBuilder) -> Optional[ReplayTable]:
    if config.agent.algorithm not in DEMO_ALGORITHMS or config.agent.demo_ratio <= 0:
        return None
    payloads = demonstration_payloads(config, builder)
    table = ReplayTable(builder.demo_table_config(len(payloads), seed=config.seed + 11))
    for payload in payloads:
        table.insert(payload)
    return table


def _environment(config: ExperimentConfig, seed: int) -> Environment:
    return make_environment(config.env.env_name, seed=seed, size=config.env.env_size,
                            episode_cap=config.env.episode_cap, mdp_seed=config.env.mdp_seed)


def _checkpoint_path(logdir: Optional[str]) -> Optional[str]:
    return os.path.join(logdir, CHECKPOINT_FILE) if logdir else None


def run_single_process(config: ExperimentConfig, logdir: Optional[str] = None) -> RunSummary:
    """Acting and learning interleaved in one loop at batch_size / samples_per_insert actor steps per update"""
    config.validate()
    environment = _environment(config, config.seed)
    eval_environment = _environment(config, config.seed + 1)
    builder = AgentBuilder(config, environment)
    table = ReplayTable(builder.make_table_config(seed=config.seed, rate_limited=False))
    dataset = builder.make_dataset(table, make_demo_table(config, builder))
    learner = builder.make_learner(dataset)
    actor = builder.make_actor(learner, environment, builder.make_adder(table), seed=config.seed)
    eval_actor = builder.make_actor(learner, eval_environment, seed=config.seed + 1, evaluation=True)
    if table.config.sampler in CONSUMING_SAMPLERS:
        schedule = RateLimitedSchedule(dataset.can_sample)
    else:
        schedule = FixedRatioSchedule(min_observations=config.agent.min_replay_size,
                                      observations_per_step=builder.samples_per_step(),
                                      can_sample=dataset.can_sample)
    agent = Agent(actor, learner, schedule)
    counter = Counter(actor_steps=0, episodes=0)
    log = RunLog(config.agent.algorithm, logdir)
    checkpoint_path = _checkpoint_path(logdir)
    logger.info(f"Single-process run: {builder.describe()}, {config.total_actor_steps} actor steps")

    next_eval = config.eval_period
    next_checkpoint = config.checkpoint_period
    try:
        while counter.get("actor_steps") < config.total_actor_steps:
            run_episode(environment, agent, counter)
            steps = counter.get("actor_steps")
            if steps >= next_eval:
                eval_return = evaluate(eval_environment, eval_actor, config.eval_episodes)
                log.append(make_record(steps, learner, eval_return, table.stats().current_ratio,
                                       agent.last_metrics))
                logger.info(f"actor_steps={steps} learner_steps={learner.learner_steps} eval_return={eval_return:.3f}")
                next_eval = (steps // config.eval_period + 1) * config.eval_period
            if checkpoint_path and learner.learner_steps >= next_checkpoint:
                save_checkpoint(checkpoint_path, learner, counter.get_counts())
                next_checkpoint = (learner.learner_steps // config.checkpoint_period + 1) * config.checkpoint_period
    except DivergenceError as e:
        logger.error(f"Run diverged at learner step {learner.learner_steps}: {e}")
        log.append(make_record(counter.get("actor_steps"), learner, float("nan"), table.stats().current_ratio,
                               agent.last_metrics))
        if checkpoint_path:
            save_checkpoint(checkpoint_path, learner, counter.get_counts())
        raise
    finally:
        table.close()

    if checkpoint_path and learner.learner_steps:
        save_checkpoint(checkpoint_path, learner, counter.get_counts())
    return RunSummary(actor_steps=counter.get("actor_steps"), learner_steps=learner.learner_steps,
                      episodes=counter.get("episodes"), learner_walltime=learner.clock.walltime,
                      realized_spi=table.stats().current_ratio, records=log.records, log_path=log.path,
                      checkpoint_path=checkpoint_path if learner.learner_steps else None)


class _Worker:
    """Thread wrapper that records failures and trips the shared stop signal"""

    def __init__(self, name: str, target: Callable[[], None], stop: threading.Event, failures: List[BaseException]):
        self.name = name
        self._target = target
        self._stop = stop
        self._failures = failures
        self.thread = threading.Thread(target=self._run, name=name, daemon=True)

    def _run(self):
        try:
            self._target()
        except ClosedTableError:
            if not self._stop.is_set():
                logger.error(f"Worker {self.name} lost its replay table")
                self._failures.append(ClosedTableError(f"replay closed under {self.name}"))
                self._stop.set()
        except Exception as e:
            logger.error(f"Error in worker {self.name}: {e}")
            self._failures.append(e)
            self._stop.set()

    def start(self):
        self.thread.start()
        logger.info(f"Worker {self.name} started")

    def join(self, timeout: Optional[float] = None):
        self.thread.join(timeout)


def run_distributed(config: ExperimentConfig, logdir: Optional[str] = None,
                    shutdown: Optional[threading.Event] = None) -> RunSummary:
    """Replay table as a shared service, one learner worker, N actor workers and the evaluator.

    Workers share only the table, the parameter store, the counter and the stop signal.
    """
    config.validate()
    stop = shutdown or threading.Event()
    failures: List[BaseException] = []
    environment = _environment(config, config.seed)
    builder = AgentBuilder(config, environment)
    table = ReplayTable(builder.make_table_config(seed=config.seed, rate_limited=True))
    if table.config.rate_limiter is None:
        logger.warning("No rate limiter configured; acting and learning run unthrottled")
    server = ReplayServer(table).start() if config.replay_transport == "socket" else None
    dataset = builder.make_dataset(table, make_demo_table(config, builder), timeout=0.5)
    learner = builder.make_learner(dataset)
    store = ParameterServer(config.parameter_store)
    store.publish_from(learner)
    counter = Counter(actor_steps=0, episodes=0, learner_steps=0)
    log = RunLog(config.agent.algorithm, logdir)
    checkpoint_path = _checkpoint_path(logdir)
    last_metrics: Dict[str, float] = {}
    budget_reached = threading.Event()

    def learner_work():
        nonlocal last_metrics
        next_checkpoint = config.checkpoint_period
        while not stop.is_set():
            try:
                last_metrics = learner.step()
            except TimeoutError:
                continue
            except ClosedTableError:
                if stop.is_set() or budget_reached.is_set():
                    return
                raise
            store.publish_from(learner)
            counter.increment(learner_steps=1)
            if checkpoint_path and learner.learner_steps >= next_checkpoint:
                save_checkpoint(checkpoint_path, learner, counter.get_counts())
                next_checkpoint = (learner.learner_steps // config.checkpoint_period + 1) * config.checkpoint_period

    def actor_work(index: int):
        seed = config.seed + 1000 * (index + 1)
        environment = _environment(config, seed)
        target = ReplayClient(server.address) if server else table
        actor = builder.make_actor(store, environment, builder.make_adder(target), seed=seed)
        loop = EnvironmentLoop(environment, actor, counter,
                               should_stop=lambda: stop.is_set() or budget_reached.is_set())
        try:
            for _ in loop.episodes():
                if counter.get("actor_steps") >= config.total_actor_steps:
                    budget_reached.set()
        except ClosedTableError:
            if not (stop.is_set() or budget_reached.is_set()):
                raise
        finally:
            if server:
                target.disconnect()

    workers = [_Worker("learner", learner_work, stop, failures)]
    workers += [_Worker(f"actor-{i}", lambda i=i: actor_work(i), stop, failures) for i in range(config.num_actors)]
    eval_environment = _environment(config, config.seed + 1)
    eval_actor = builder.make_actor(store, eval_environment, seed=config.seed + 1, evaluation=True)

    def on_record(steps: int, eval_return: float):
        log.append(make_record(steps, learner, eval_return, table.stats().current_ratio, last_metrics))
        logger.info(f"actor_steps={steps} learner_steps={learner.learner_steps} eval_return={eval_return:.3f}")

    logger.info(f"Distributed run: {builder.describe()}, {config.num_actors} actors, "
                f"{config.total_actor_steps} actor steps, transport={config.replay_transport}")
    if config.total_actor_steps > 0:
        for worker in workers:
            worker.start()
        try:
            evaluator_loop(eval_environment, eval_actor, counter, config.eval_period,
                           should_stop=lambda: stop.is_set() or budget_reached.is_set(), on_record=on_record)
        except Exception as e:
            logger.error(f"Error in evaluator: {e}")
            failures.append(e)
        budget_reached.set()
        stop.set()
    table.close()
    for worker in workers:
        if worker.thread.ident is not None:
            worker.join(timeout=5.0)
    if server:
        server.stop()
    if checkpoint_path and learner.learner_steps:
        save_checkpoint(checkpoint_path, learner, counter.get_counts())
    if failures:
        raise failures[0]
    stats = table.stats()
    if table.config.rate_limiter is None and stats.total_inserts:
        logger.warning(f"Unthrottled run realized {stats.current_ratio:.2f} sampled items per insert")
    return RunSummary(actor_steps=counter.get("actor_steps"), learner_steps=learner.learner_steps,
                      episodes=counter.get("episodes"), learner_walltime=learner.clock.walltime,
                      realized_spi=stats.current_ratio, records=log.records, log_path=log.path,
                      checkpoint_path=checkpoint_path if learner.learner_steps else None)


def run(config: ExperimentConfig, logdir: Optional[str] = None) -> RunSummary:
    if config.mode == "distributed":
        return run_distributed(config, logdir)
    return run_single_process(config, logdir)


def run_offline(config: ExperimentConfig, dataset_path: str, learner_steps: int,
                logdir: Optional[str] = None, evaluate_policy: bool = True) -> RunSummary:
    """Train from a fixed dataset file through the same learner step used online"""
    config.validate()
    environment = _environment(config, config.seed + 1)
    builder = AgentBuilder(config, environment)
    dataset = FileDataset.from_file(dataset_path, config.agent.batch_size, builder.tag, seed=config.seed)
    learner = builder.make_learner(dataset)
    eval_actor = builder.make_actor(learner, environment, seed=config.seed + 1, evaluation=True)
    log = RunLog(config.agent.algorithm, logdir)
    checkpoint_path = _checkpoint_path(logdir)
    metrics: Dict[str, float] = {}
    logger.info(f"Offline run: {builder.describe()} on {len(dataset)} records for {learner_steps} steps")
    for step in range(1, learner_steps + 1):
        metrics = learner.step()
        if step % config.eval_period == 0 or step == learner_steps:
            eval_return = evaluate(environment, eval_actor, config.eval_episodes) if evaluate_policy else float("nan")
            log.append(make_record(0, learner, eval_return, float("nan"), metrics))
            logger.info(f"learner_steps={step} eval_return={eval_return:.3f}")
        if checkpoint_path and step % config.checkpoint_period == 0:
            save_checkpoint(checkpoint_path, learner)
    if checkpoint_path and learner.learner_steps:
        save_checkpoint(checkpoint_path, learner)
    return RunSummary(learner_steps=learner.learner_steps, learner_walltime=learner.clock.walltime,
                      records=log.records, log_path=log.path,
                      checkpoint_path=checkpoint_path if learner.learner_steps else None)


def load_learner(config: ExperimentConfig, checkpoint: str, environment: Optional[Environment] = None):
    environment = environment or _environment(config, config.seed + 1)
    builder = AgentBuilder(config, environment)
    learner = builder.make_learner(None)
    restore_checkpoint(checkpoint, learner)
    return builder, learner


def evaluate_checkpoint(config: ExperimentConfig, checkpoint: str, episodes: int = 1) -> List[float]:
    environment = _environment(config, config.seed + 1)
    builder, learner = load_learner(config, checkpoint, environment)
    actor = builder.make_actor(learner, environment, seed=config.seed + 1, evaluation=True)
    actor.update(wait=True)
    return [run_episode(environment, actor).episode_return for _ in range(episodes)]


def record_with_actor(environment: Environment, actor: Actor) -> Episode:
    timestep = environment.reset()
    actor.observe_first(timestep)
    observations, actions, rewards = [timestep.observation], [], []
    while not timestep.last():
        action = actor.select_action(timestep.observation)
        timestep = environment.step(action)
        actor.observe(action, timestep)
        observations.append(timestep.observation)
        actions.append(np.asarray(action, dtype=np.float64))
        rewards.append(timestep.reward)
    return Episode(observations=np.stack(observations), actions=np.stack(actions), rewards=np.asarray(rewards),
                   truncated=timestep.truncated)


def _random_action(environment: Environment, rng: np.random.Generator):
    spec = environment.action_spec()
    if isinstance(spec, BoundedActionSpec):
        return rng.uniform(spec.low, spec.high)
    return int(rng.integers(spec.num_values))


def generate_episodes(config: ExperimentConfig, policy: str, episodes: int,
                      checkpoint: Optional[str] = None) -> List[Episode]:
    """Episodes from the oracle, a uniform-random policy, a 50/50 mix of both, or a checkpoint"""
    environment = _environment(config, config.seed)
    rng = np.random.default_rng(config.seed)
    if policy == "checkpoint":
        if not checkpoint:
            raise ConfigurationError("--policy checkpoint needs --checkpoint")
        builder, learner = load_learner(config, checkpoint, environment)
        actor = builder.make_actor(learner, environment, seed=config.seed, evaluation=True)
        return [record_with_actor(environment, actor) for _ in range(episodes)]
    if policy not in ("oracle", "random", "mixed"):
        raise ConfigurationError(f"unknown dataset policy {policy!r}")
    recorded = []
    for index in range(episodes):
        use_oracle = policy == "oracle" or (policy == "mixed" and index % 2 == 0)
        if use_oracle:
            recorded.append(record_episode(environment, lambda obs: environment.oracle_action()))
        else:
            recorded.append(record_episode(environment, lambda obs: _random_action(environment, rng)))
    return recorded


def make_dataset_file(config: ExperimentConfig, output: str, policy: str = "oracle", episodes: int = 10,
                      checkpoint: Optional[str] = None) -> pd.DataFrame:
    """Record episodes and write them in the adder payload format of config.agent.algorithm"""
    config.validate()
    environment = _environment(config, config.seed)
    builder = AgentBuilder(config, environment)
    recorded = generate_episodes(config, policy, episodes, checkpoint)
    if builder.tag == codec.EPISODE_TAG:
        payloads = [codec.encode(episode) for episode in recorded]
    else:
        state_dim = config.agent.recurrent_size if config.agent.algorithm in ("r2d2", "r2d3") else 0
        payloads = episodes_to_payloads(recorded, builder.make_adder, state_dim)
    write_dataset(output, builder.tag, payloads)
    stats = episode_statistics(recorded)
    logger.info(f"Dataset {output}: {len(recorded)} episodes, mean return {stats['episode_return'].mean():.3f}")
    return stats
