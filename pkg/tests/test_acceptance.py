"""End-to-end learning runs at desk scale; deselect with -m 'not slow'"""

import numpy as np
import pytest

from config import load_config
from environments import make_environment, value_iteration
from runtime import (evaluate_checkpoint, generate_episodes, load_learner, make_dataset_file, run_distributed,
                     run_offline, run_single_process)

pytestmark = pytest.mark.slow


def make_config(**overrides):
    settings = {"hidden_sizes": "32", "batch_size": 16, "samples_per_insert": 8.0, "min_replay_size": 64,
                "replay_capacity": 10000, "learning_rate": 0.005, "eval_episodes": 5}
    settings.update(overrides)
    return load_config(cli_overrides=settings, environ={})


def random_mdp_config(**overrides):
    settings = dict(algorithm="dqn", env_name="random_mdp", env_size=20, gamma=0.9, n_step=1, batch_size=32,
                    min_replay_size=200, epsilon_decay_steps=5000, epsilon_end=0.1, target_update_period=100,
                    learning_rate=0.002, hidden_sizes="64")
    settings.update(overrides)
    return make_config(**settings)


def oracle_return(config, episodes=20):
    return float(np.mean([np.sum(e.rewards) for e in generate_episodes(config, "oracle", episodes)]))


def first_milestone(summary, target):
    reached = [r["actor_steps"] for r in summary.records if r["eval_return"] >= target]
    return reached[0] if reached else float("inf")


def test_dqn_solves_the_chain(tmp_path):
    config = make_config(algorithm="dqn", env_name="chain", env_size=3, total_actor_steps=3000, eval_period=500,
                         epsilon_decay_steps=1500, target_update_period=50)
    summary = run_single_process(config, str(tmp_path))
    assert summary.eval_returns[-1] == pytest.approx(1.0)


def test_behaviour_cloning_recovers_the_gridworld_oracle(tmp_path):
    config = make_config(algorithm="bc", env_name="gridworld", eval_period=500, batch_size=32)
    path = str(tmp_path / "oracle.dat")
    make_dataset_file(config, path, policy="oracle", episodes=35)
    summary = run_offline(config, path, learner_steps=1500, logdir=str(tmp_path / "bc"))
    returns = evaluate_checkpoint(config, summary.checkpoint_path, episodes=3)
    assert returns == [1.0, 1.0, 1.0]


def test_mpo_prefers_the_better_arm(tmp_path):
    config = make_config(algorithm="mpo", env_name="bandit", total_actor_steps=1500, eval_period=500,
                         min_replay_size=32, mpo_num_samples=8)
    summary = run_single_process(config, str(tmp_path))
    returns = evaluate_checkpoint(config, summary.checkpoint_path, episodes=5)
    assert returns == pytest.approx([0.8] * 5)


def test_single_process_and_distributed_curves_agree():
    period = 10_000
    curves = {}
    for mode in ("single_process", "distributed"):
        by_milestone = {}
        for seed in range(3):
            config = random_mdp_config(mode=mode, num_actors=4, seed=seed, total_actor_steps=2 * period,
                                       eval_period=period, eval_episodes=10)
            run_mode = run_single_process if mode == "single_process" else run_distributed
            for record in run_mode(config).records:
                by_milestone.setdefault(int(record["actor_steps"]) // period, []).append(record["eval_return"])
        curves[mode] = {k: float(np.mean(v)) for k, v in by_milestone.items()}
    optimum = oracle_return(random_mdp_config())
    shared = sorted(set(curves["single_process"]) & set(curves["distributed"]))
    assert shared
    for milestone in shared:
        assert abs(curves["single_process"][milestone] - curves["distributed"][milestone]) <= 0.1 * optimum


def test_dqn_greedy_policy_matches_value_iteration(tmp_path):
    agreements = []
    for mdp_seed in range(5):
        config = random_mdp_config(mdp_seed=mdp_seed, samples_per_insert=32.0, total_actor_steps=20_000,
                                   eval_period=20_000, epsilon_decay_steps=10_000)
        summary = run_single_process(config, str(tmp_path / f"mdp{mdp_seed}"))
        _, learner = load_learner(config, summary.checkpoint_path)
        mdp = make_environment("random_mdp", size=20, mdp_seed=mdp_seed).mdp
        _, _, optimal = value_iteration(mdp)
        values, _ = learner.network.forward(learner.params, np.eye(mdp.num_states))
        agreements.append(float(np.mean(np.argmax(values, axis=1) == optimal)))
    assert sum(a >= 0.95 for a in agreements) >= 4, agreements


def test_recurrent_agent_remembers_the_tmaze_cue(tmp_path):
    common = dict(env_name="tmaze", env_size=10, total_actor_steps=100_000, eval_period=10_000,
                  eval_episodes=20, epsilon_decay_steps=20_000, min_replay_size=100)
    solved = 0
    for seed in range(3):
        config = make_config(algorithm="r2d2", seed=seed, recurrent_size=32, sequence_length=12,
                             sequence_period=6, burn_in_length=2, learning_rate=0.002, **common)
        summary = run_single_process(config)
        solved += max(summary.eval_returns) >= 0.9
    assert solved >= 2

    config = make_config(algorithm="dqn", **common)
    summary = run_single_process(config, str(tmp_path / "dqn"))
    assert np.mean(evaluate_checkpoint(config, summary.checkpoint_path, episodes=100)) <= 0.3


def test_search_with_a_perfect_simulator_solves_deep_sea(tmp_path):
    config = make_config(algorithm="mcts", env_name="deep_sea", env_size=10, total_actor_steps=1000,
                         eval_period=500, batch_size=8, min_replay_size=8, mcts_num_simulations=300,
                         mcts_max_depth=20)
    summary = run_single_process(config, str(tmp_path))
    returns = evaluate_checkpoint(config, summary.checkpoint_path, episodes=100)
    assert sum(r > 0.5 for r in returns) >= 90


def test_one_demonstration_solves_deep_sea_where_dqn_fails(tmp_path):
    common = dict(env_name="deep_sea", env_size=10, total_actor_steps=10_000, eval_period=2500,
                  epsilon_decay_steps=2000, target_update_period=100, min_replay_size=100)
    config = make_config(algorithm="dqfd", demo_ratio=0.25, **common)
    demos = run_single_process(config, str(tmp_path / "dqfd"))
    assert evaluate_checkpoint(config, demos.checkpoint_path, episodes=1)[0] == pytest.approx(0.99)

    config = make_config(algorithm="dqn", **common)
    plain = run_single_process(config, str(tmp_path / "dqn"))
    assert evaluate_checkpoint(config, plain.checkpoint_path, episodes=1)[0] < 0.5


def test_distributional_critic_approaches_the_bang_bang_controller(tmp_path):
    optimum = oracle_return(make_config(algorithm="d4pg", env_name="point_mass"), episodes=10)
    solved = 0
    for seed in range(3):
        config = make_config(algorithm="d4pg", env_name="point_mass", seed=seed, hidden_sizes="64",
                             total_actor_steps=100_000, eval_period=20_000, min_replay_size=1000,
                             learning_rate=0.001, num_atoms=51, v_min=0.0, v_max=100.0)
        summary = run_single_process(config, str(tmp_path / f"seed{seed}"))
        solved += np.mean(evaluate_checkpoint(config, summary.checkpoint_path, episodes=10)) >= 0.9 * optimum
    assert solved >= 2


def test_offline_dqn_beats_its_mixed_dataset(tmp_path):
    config = make_config(algorithm="dqn", env_name="gridworld", batch_size=32, eval_period=1000,
                         target_update_period=100, learning_rate=0.002)
    path = str(tmp_path / "mixed.dat")
    stats = make_dataset_file(config, path, policy="mixed", episodes=100)
    summary = run_offline(config, path, learner_steps=3000, logdir=str(tmp_path / "dqn"))
    returns = evaluate_checkpoint(config, summary.checkpoint_path, episodes=10)
    assert np.mean(returns) >= stats["episode_return"].mean()


def test_higher_replay_ratio_reaches_the_milestone_sooner():
    faster = 0
    for seed in range(3):
        steps = {}
        for spi in (2.0, 32.0):
            config = random_mdp_config(seed=seed, samples_per_insert=spi, total_actor_steps=10_000,
                                       eval_period=1000, eval_episodes=5)
            target = 0.9 * oracle_return(config)
            steps[spi] = first_milestone(run_single_process(config), target)
        faster += steps[32.0] < steps[2.0]
    assert faster >= 2
