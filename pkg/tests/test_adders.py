import numpy as np
import pytest

import codec
from adders import AdderConfig, EpisodeAdder, NStepTransitionAdder, SequenceAdder
from core import restart, termination, transition, truncation
from errors import ProtocolError
from replay import ReplayTable, TableConfig


def random_episode(rng, length, truncated=False, obs_dim=2):
    observations = rng.normal(size=(length + 1, obs_dim))
    actions = rng.integers(0, 3, size=length)
    rewards = rng.normal(size=length)
    return observations, actions, rewards, truncated


def feed(adder, episode, states=None):
    observations, actions, rewards, truncated = episode
    emitted = []
    first_args = () if states is None else (states[0],)
    adder.add_first(restart(observations[0]), *first_args)
    length = len(rewards)
    for t in range(length):
        if t == length - 1:
            step = (truncation if truncated else termination)(rewards[t], observations[t + 1])
        else:
            step = transition(rewards[t], observations[t + 1])
        args = () if states is None else (states[t + 1],)
        emitted.extend(adder.add(actions[t], step, *args))
    return emitted


def brute_force_nstep(episode, n, gamma):
    observations, actions, rewards, truncated = episode
    length = len(rewards)
    expected = []
    for t in range(length):
        end = min(t + n, length)
        reward = sum(gamma ** (i - t) * rewards[i] for i in range(t, end))
        reaches_end = end == length
        discount = 0.0 if (reaches_end and not truncated) else gamma ** (end - t)
        expected.append((observations[t], actions[t], reward, discount, observations[end], end - t))
    return expected


class TestNStepTransitionAdder:
    @pytest.mark.parametrize("n", [1, 3, 5])
    @pytest.mark.parametrize("gamma", [0.0, 0.5, 0.99])
    def test_matches_brute_force(self, n, gamma):
        rng = np.random.default_rng(n * 100 + int(gamma * 100))
        adder = NStepTransitionAdder(n, gamma)
        for _ in range(1000):
            episode = random_episode(rng, int(rng.integers(1, 12)), truncated=bool(rng.random() < 0.3))
            emitted = feed(adder, episode)
            expected = brute_force_nstep(episode, n, gamma)
            assert len(emitted) == len(episode[2])
            for item, (obs, action, reward, discount, next_obs, n_actual) in zip(emitted, expected):
                np.testing.assert_array_equal(item.observation, obs)
                assert float(item.action) == action
                assert abs(item.reward - reward) <= 1e-9
                assert abs(item.discount - discount) <= 1e-9
                np.testing.assert_array_equal(item.next_observation, next_obs)
                assert item.n_actual == n_actual

    def test_truncated_ending_keeps_bootstrap(self):
        adder = NStepTransitionAdder(2, 0.9)
        episode = (np.zeros((3, 1)), np.array([0, 1]), np.array([1.0, 1.0]), True)
        last = feed(adder, episode)[-1]
        assert last.discount == pytest.approx(0.9)

    def test_inserts_into_table(self):
        table = ReplayTable(TableConfig(capacity=100))
        adder = NStepTransitionAdder(3, 0.9, table=table, priority_fn=lambda item: 2.0)
        feed(adder, random_episode(np.random.default_rng(0), 7))
        assert len(table) == 7
        assert set(table.priorities().values()) == {2.0}
        assert adder.num_emitted == 7
        codec.decode(table.sample(1).payloads[0], codec.TRANSITION_TAG)

    def test_protocol(self):
        adder = NStepTransitionAdder(1, 0.9)
        with pytest.raises(ProtocolError):
            adder.add(0, transition(0.0, np.zeros(1)))
        with pytest.raises(ProtocolError):
            adder.add_first(transition(0.0, np.zeros(1)))
        adder.add_first(restart(np.zeros(1)))
        with pytest.raises(ProtocolError):
            adder.add(0, restart(np.zeros(1)))

    def test_episode_end_requires_new_first(self):
        adder = NStepTransitionAdder(1, 0.9)
        feed(adder, random_episode(np.random.default_rng(1), 2))
        with pytest.raises(ProtocolError):
            adder.add(0, transition(0.0, np.zeros(2)))


class TestSequenceAdder:
    def test_overlapping_slices_and_padding(self):
        rng = np.random.default_rng(0)
        adder = SequenceAdder(sequence_length=4, period=2, burn_in_length=1, state_dim=3)
        episode = random_episode(rng, 7)
        states = rng.normal(size=(8, 3))
        slices = feed(adder, episode, states)
        # starts 0, 2 are full; start 4 covers steps 4..6 and is padded
        assert [s.mask.sum() for s in slices] == [4, 4, 3]
        observations, actions, rewards, _ = episode
        for start, item in zip([0, 2, 4], slices):
            valid = int(item.mask.sum())
            np.testing.assert_array_equal(item.rewards[:valid], rewards[start:start + valid])
            np.testing.assert_array_equal(item.actions[:valid], actions[start:start + valid])
            np.testing.assert_array_equal(item.observations[:valid + 1], observations[start:start + valid + 1])
            np.testing.assert_array_equal(item.start_state, states[start])
            assert item.burn_in_length == 1
        assert slices[0].is_episode_start and not slices[1].is_episode_start
        assert slices[-1].discounts[2] == 0.0
        assert np.all(slices[-1].rewards[3:] == 0.0)

    def test_short_episode_emits_one_padded_slice(self):
        adder = SequenceAdder(sequence_length=5, period=5, state_dim=0)
        slices = feed(adder, random_episode(np.random.default_rng(2), 2))
        assert len(slices) == 1
        assert slices[0].mask.tolist() == [1, 1, 0, 0, 0]

    def test_no_slice_crosses_episodes(self):
        rng = np.random.default_rng(3)
        adder = SequenceAdder(sequence_length=3, period=3, state_dim=0)
        first = feed(adder, random_episode(rng, 4))
        second = feed(adder, random_episode(rng, 3))
        assert len(first) == 2 and len(second) == 1
        assert second[0].is_episode_start

    def test_exact_multiple_has_no_tail(self):
        adder = SequenceAdder(sequence_length=3, period=3, state_dim=0)
        slices = feed(adder, random_episode(np.random.default_rng(4), 6))
        assert len(slices) == 2
        assert all(s.mask.sum() == 3 for s in slices)

    def test_log_probs_from_extras(self):
        adder = SequenceAdder(sequence_length=2, period=2, state_dim=0)
        adder.add_first(restart(np.zeros(1)))
        adder.add(0, transition(1.0, np.zeros(1)), None, extras={"log_prob": -0.5})
        (item,) = adder.add(1, termination(1.0, np.zeros(1)), None, extras={"log_prob": -1.5})
        np.testing.assert_array_equal(item.behavior_log_probs, [-0.5, -1.5])

    def test_state_dimension_checked(self):
        adder = SequenceAdder(sequence_length=2, period=1, state_dim=2)
        with pytest.raises(ValueError):
            adder.add_first(restart(np.zeros(1)), np.zeros(3))

    def test_config_bounds(self):
        with pytest.raises(ValueError):
            SequenceAdder(sequence_length=4, period=5)
        with pytest.raises(ValueError):
            SequenceAdder(sequence_length=4, period=2, burn_in_length=4)
        with pytest.raises(ValueError):
            AdderConfig(n=0)


class TestEpisodeAdder:
    def test_whole_episode(self):
        episode = random_episode(np.random.default_rng(5), 4)
        (item,) = feed(EpisodeAdder(), episode)
        np.testing.assert_array_equal(item.observations, episode[0])
        np.testing.assert_array_equal(item.rewards, episode[2])
        assert not item.truncated

    def test_max_length_truncates_and_drops_remainder(self):
        adder = EpisodeAdder(max_length=3)
        emitted = feed(adder, random_episode(np.random.default_rng(6), 5))
        assert len(emitted) == 1
        assert emitted[0].truncated and emitted[0].length == 3
        emitted = feed(adder, random_episode(np.random.default_rng(7), 2))
        assert len(emitted) == 1 and emitted[0].length == 2

    def test_search_policies_recorded(self):
        adder = EpisodeAdder()
        adder.add_first(restart(np.zeros(1)))
        adder.add(0, transition(0.0, np.zeros(1)), extras={"search_policy": [0.9, 0.1]})
        (item,) = adder.add(1, termination(1.0, np.zeros(1)), extras={"search_policy": [0.2, 0.8]})
        np.testing.assert_array_equal(item.search_policies, [[0.9, 0.1], [0.2, 0.8]])
