import numpy as np
import pytest

from environments import BanditSimulator, DeepSeaSimulator
from search import SearchTree, exhaustive_value, mcts_search


def uniform_prior(num_actions):
    return lambda observation: np.full(num_actions, 1.0 / num_actions)


def zero_value(observation):
    return 0.0


class TestMctsSearch:
    def test_bandit_q_values_are_exact(self):
        simulator = BanditSimulator(np.array([0.2, 0.8]))
        result = mcts_search("root", simulator, uniform_prior(2), zero_value, num_simulations=20)
        np.testing.assert_allclose(result.q_values, [0.2, 0.8])
        assert result.visit_counts.sum() == 20
        assert result.visit_counts[1] > result.visit_counts[0]
        assert result.action == 1
        np.testing.assert_allclose(result.search_policy.sum(), 1.0)
        expected_root = np.sum(result.visit_counts * result.q_values) / 20
        assert result.root_value == pytest.approx(expected_root)

    def test_low_temperature_sharpens_policy(self):
        simulator = BanditSimulator(np.array([0.2, 0.8]))
        result = mcts_search("root", simulator, uniform_prior(2), zero_value, num_simulations=10,
                             temperature=0.01)
        assert result.search_policy[1] > 0.999

    def test_finds_deep_sea_treasure(self):
        simulator = DeepSeaSimulator(3)
        result = mcts_search((0, 0), simulator, uniform_prior(2), zero_value, num_simulations=200)
        assert result.action == 1
        assert result.q_values[1] > 0.5

    def test_transpositions_share_nodes(self):
        simulator = DeepSeaSimulator(3)
        result = mcts_search((0, 0), simulator, uniform_prior(2), zero_value, num_simulations=200)
        # rows 0..2 hold 1 + 2 + 3 distinct positions; an unshared tree would need 7 nodes
        assert result.tree_size <= 6

    def test_value_function_used_at_depth_limit(self):
        simulator = DeepSeaSimulator(4)
        result = mcts_search((0, 0), simulator, uniform_prior(2), lambda obs: 5.0, num_simulations=10, max_depth=1)
        # the bootstrapped first child outscores the unvisited one (Q = 0) for the whole budget
        np.testing.assert_array_equal(result.visit_counts, [10, 0])
        np.testing.assert_allclose(result.q_values, [5.0, 0.0])
        assert result.action == 0

    def test_optimistic_init_tries_every_root_action(self):
        simulator = DeepSeaSimulator(4)
        result = mcts_search((0, 0), simulator, uniform_prior(2), lambda obs: 5.0, num_simulations=10, max_depth=1,
                             unvisited_value=10.0)
        assert np.all(result.visit_counts > 0)
        # reported Q of a tried action is its mean backup, never the optimistic score
        assert result.q_values.max() <= 5.0

    def test_optimistic_init_follows_a_scrambled_mapping(self):
        mapping = np.ones((4, 4), dtype=np.int64)
        mapping[0, 0] = mapping[1, 1] = mapping[3, 3] = 0
        simulator = DeepSeaSimulator(4, mapping)
        result = mcts_search((0, 0), simulator, uniform_prior(2), zero_value, num_simulations=200,
                             unvisited_value=1.0)
        assert result.action == simulator.right_action((0, 0)) == 0
        assert result.q_values[0] > result.q_values[1]

    def test_prior_steers_first_visit(self):
        simulator = BanditSimulator(np.array([0.0, 0.0, 0.0]))
        result = mcts_search("root", simulator, lambda obs: np.array([0.1, 0.1, 0.8]), zero_value,
                             num_simulations=1)
        np.testing.assert_array_equal(result.visit_counts, [0, 0, 1])

    def test_invalid_arguments(self):
        simulator = BanditSimulator(np.array([0.0, 1.0]))
        with pytest.raises(ValueError):
            mcts_search("root", simulator, uniform_prior(2), zero_value, num_simulations=0)
        with pytest.raises(ValueError):
            mcts_search("root", simulator, uniform_prior(2), zero_value, num_simulations=1, max_depth=0)
        with pytest.raises(ValueError):
            mcts_search("root", simulator, uniform_prior(3), zero_value, num_simulations=1)


class TestSearchTree:
    def test_edges_are_cached(self):
        calls = []

        class CountingSimulator(BanditSimulator):
            def step(self, state, action):
                calls.append(action)
                return super().step(state, action)

        tree = SearchTree(CountingSimulator(np.array([1.0])), uniform_prior(1), zero_value)
        node = tree.expand("root")
        for _ in range(5):
            tree.simulate("root", max_depth=3)
        assert calls == [0]
        assert node.visit_counts[0] == 5 and node.total_visits == 6
        np.testing.assert_allclose(node.q_values, [1.0])


def test_exhaustive_value():
    simulator = DeepSeaSimulator(3)
    assert exhaustive_value((0, 0), simulator, depth=3) == pytest.approx(0.99)
    assert exhaustive_value((0, 0), simulator, depth=2) == 0.0
    assert exhaustive_value((0, 0), simulator, depth=0) == 0.0
