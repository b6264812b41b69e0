import threading

import numpy as np
import pytest

import learners
from agents import AgentBuilder
from config import load_config
from environments import make_environment
from errors import ConfigurationError
from replay import ReplayTable
from runtime import (evaluate, evaluate_checkpoint, generate_episodes, load_learner, log_fields, make_dataset_file,
                     read_log, run, run_distributed, run_offline, run_single_process)

SMALL = {"hidden_sizes": "16", "batch_size": 8, "samples_per_insert": 8.0, "min_replay_size": 16,
         "replay_capacity": 1000, "n_step": 2, "target_update_period": 20, "learning_rate": 0.01,
         "epsilon_decay_steps": 200, "recurrent_size": 8, "sequence_length": 6, "sequence_period": 3,
         "burn_in_length": 1, "mcts_num_simulations": 5, "mpo_num_samples": 4, "num_atoms": 11}


def make_config(**overrides):
    settings = dict(SMALL, algorithm="dqn", env_name="chain", env_size=3, total_actor_steps=300,
                    eval_period=100, checkpoint_period=50)
    settings.update(overrides)
    return load_config(cli_overrides=settings, environ={})


class TestSingleProcess:
    def test_run_logs_checkpoints_and_keeps_ratio(self, tmp_path):
        config = make_config()
        summary = run_single_process(config, str(tmp_path))
        assert summary.actor_steps >= 300
        assert len(summary.records) == 3
        assert [r["actor_steps"] // 100 for r in summary.records] == [1, 2, 3]
        assert 0 < summary.learner_steps <= summary.actor_steps - 15
        assert 6.0 < summary.realized_spi <= 8.5

        frame = read_log(summary.log_path)
        assert list(frame.columns) == log_fields("dqn")
        assert len(frame) == 3
        _, restored = load_learner(config, summary.checkpoint_path)
        assert restored.learner_steps == summary.learner_steps

        returns = evaluate_checkpoint(config, summary.checkpoint_path, episodes=2)
        assert len(returns) == 2

    def test_run_dispatches_on_mode(self):
        summary = run(make_config(total_actor_steps=60, eval_period=30))
        assert summary.log_path is None and summary.checkpoint_path is None
        assert summary.learner_steps > 0 and summary.records

    @pytest.mark.parametrize("overrides", [
        {"algorithm": "impala", "env_name": "tmaze", "env_size": 3},
        {"algorithm": "r2d2", "env_name": "tmaze", "env_size": 3},
        {"algorithm": "mcts", "env_name": "deep_sea", "env_size": 4},
        {"algorithm": "ddpg", "env_name": "point_mass", "episode_cap": 20},
        {"algorithm": "mpo", "env_name": "bandit"},
        {"algorithm": "dqfd", "env_name": "deep_sea", "env_size": 4, "demo_ratio": 0.25},
    ])
    def test_every_family_runs(self, overrides):
        config = make_config(total_actor_steps=120, eval_period=60, **overrides)
        summary = run_single_process(config)
        assert summary.actor_steps >= 120
        assert summary.learner_steps > 0
        assert len(summary.eval_returns) == 2

    def test_demonstrations_need_a_source(self):
        config = make_config(algorithm="dqfd", env_name="gridworld", env_size=None, demo_ratio=0.25)
        with pytest.raises(ConfigurationError):
            run_single_process(config)


class TestDistributed:
    @pytest.mark.parametrize("transport", ["inprocess", "socket"])
    def test_rate_limiter_holds_the_ratio(self, tmp_path, transport):
        config = make_config(mode="distributed", num_actors=2, total_actor_steps=400, replay_transport=transport)
        summary = run_distributed(config, str(tmp_path))
        assert abs(summary.realized_spi - 8.0) < 0.5
        assert 400 <= summary.actor_steps <= 400 + 2 * 30
        assert summary.learner_steps > 0
        assert list(read_log(summary.log_path).columns) == log_fields("dqn")
        _, restored = load_learner(config, summary.checkpoint_path)
        assert restored.learner_steps == summary.learner_steps

    def test_shutdown_signal_stops_every_worker(self):
        config = make_config(mode="distributed", num_actors=2, total_actor_steps=10 ** 9)
        shutdown = threading.Event()
        timer = threading.Timer(0.5, shutdown.set)
        timer.start()
        try:
            summary = run_distributed(config, shutdown=shutdown)
        finally:
            timer.cancel()
        assert 0 < summary.actor_steps < 10 ** 9
        assert summary.learner_steps > 0

    def test_first_failure_is_raised(self, monkeypatch):
        def broken(self, batch):
            raise RuntimeError("learner exploded")

        monkeypatch.setattr(learners.DQNLearner, "learn", broken)
        config = make_config(mode="distributed", num_actors=2, total_actor_steps=10 ** 6)
        with pytest.raises(RuntimeError, match="exploded"):
            run_distributed(config)


class TestOffline:
    def test_behaviour_cloning_from_a_dataset_file(self, tmp_path):
        config = make_config(algorithm="bc", env_name="gridworld", env_size=None, eval_period=20)
        path = str(tmp_path / "oracle.dat")
        stats = make_dataset_file(config, path, policy="oracle", episodes=5)
        assert len(stats) == 5
        assert (stats["episode_return"] == 1.0).all()

        summary = run_offline(config, path, learner_steps=50, logdir=str(tmp_path / "bc"))
        assert summary.learner_steps == 50
        assert [r["learner_steps"] for r in summary.records] == [20, 40, 50]
        assert all(r["actor_steps"] == 0 for r in summary.records)
        assert len(read_log(summary.log_path)) == 3

    def test_without_evaluation(self, tmp_path):
        config = make_config(algorithm="bc", env_name="chain", eval_period=10)
        path = str(tmp_path / "chain.dat")
        make_dataset_file(config, path, policy="mixed", episodes=4)
        summary = run_offline(config, path, learner_steps=10, evaluate_policy=False)
        assert len(summary.records) == 1
        assert summary.eval_returns == []


class TestGenerateEpisodes:
    def test_mixed_alternates_oracle_and_random(self):
        config = make_config()
        episodes = generate_episodes(config, "mixed", 6)
        for episode in episodes[::2]:
            assert float(np.sum(episode.rewards)) == 1.0
            assert np.all(episode.actions == 1)

    def test_random_policy_is_seeded(self):
        config = make_config()
        first = generate_episodes(config, "random", 3)
        second = generate_episodes(config, "random", 3)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.actions, b.actions)

    def test_checkpoint_policy(self, tmp_path):
        config = make_config(total_actor_steps=60, eval_period=60)
        summary = run_single_process(config, str(tmp_path))
        episodes = generate_episodes(config, "checkpoint", 2, checkpoint=summary.checkpoint_path)
        assert len(episodes) == 2
        assert all(len(e.actions) == len(e.rewards) for e in episodes)

    def test_errors(self):
        config = make_config()
        with pytest.raises(ConfigurationError):
            generate_episodes(config, "checkpoint", 1)
        with pytest.raises(ConfigurationError):
            generate_episodes(config, "expert", 1)


class TestRunContracts:
    def test_zero_budget(self, tmp_path):
        summary = run_single_process(make_config(total_actor_steps=0), str(tmp_path))
        assert (summary.actor_steps, summary.learner_steps, summary.records) == (0, 0, [])
        assert summary.checkpoint_path is None
        frame = read_log(summary.log_path)
        assert frame.empty and list(frame.columns) == log_fields("dqn")

    def test_distributed_zero_budget(self):
        summary = run_distributed(make_config(mode="distributed", total_actor_steps=0))
        assert (summary.actor_steps, summary.learner_steps) == (0, 0)

    def test_same_seed_same_records(self):
        def comparable(summary):
            return [{k: v for k, v in r.items() if k != "wall_ts" and "walltime" not in k} for r in summary.records]

        config = make_config(total_actor_steps=100, eval_period=50)
        first = run_single_process(config)
        second = run_single_process(make_config(total_actor_steps=100, eval_period=50))
        assert first.learner_steps == second.learner_steps
        assert comparable(first) == comparable(second)

    def test_evaluation_never_inserts(self):
        config = make_config()
        environment = make_environment("chain", seed=0, size=3)
        builder = AgentBuilder(config, environment)
        table = ReplayTable(builder.make_table_config(seed=0))
        learner = builder.make_learner(None)
        actor = builder.make_actor(learner, environment, builder.make_adder(table), seed=0, evaluation=True)
        returns = [evaluate(environment, actor, episodes=2) for _ in range(3)]
        assert len(table) == 0 and table.stats().total_inserts == 0
        assert returns[0] == returns[1] == returns[2]
