"""
Learners
Each learner owns its parameters and optimizers, consumes batches from a
dataset, and publishes immutable parameter snapshots for actors.
"""

import json
import logging
import threading
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from codec import Episode, SequenceSlice, Transition
from core import Learner, LearnerClock, ParameterSnapshot
from datasets import Batch
from errors import DivergenceError
from kernels import (bc_continuous_loss, bc_loss, categorical_ce_loss, categorical_target, discounted_return,
                     double_q_target, dpg_gradient, dual_step, expected_value, impala_policy_gradient,
                     mcts_imitation_loss, mpo_gaussian_policy_loss, mpo_policy_loss, r2d2_priority, td_loss, vtrace)
from neural import (DenseNet, Head, Optimizer, Params, RecurrentNet, copy_params, log_softmax, scalar, softmax,
                    update_target)

logger = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0


def prefixed(prefix: str, params: Params) -> Params:
    return {f"{prefix}/{name}": value for name, value in params.items()}


def unprefixed(prefix: str, params: Params) -> Params:
    start = len(prefix) + 1
    return {name[start:]: value for name, value in params.items() if name.startswith(prefix + "/")}


def stack_transitions(items: Sequence[Transition]) -> Dict[str, np.ndarray]:
    return {
        "observation": np.stack([t.observation for t in items]),
        "action": np.stack([np.asarray(t.action, dtype=np.float64).reshape(-1) for t in items]),
        "reward": np.array([t.reward for t in items]),
        "discount": np.array([t.discount for t in items]),
        "next_observation": np.stack([t.next_observation for t in items]),
    }


def rng_state_array(rng: np.random.Generator) -> np.ndarray:
    return np.frombuffer(json.dumps(rng.bit_generator.state).encode("utf-8"), dtype=np.uint8).copy()


def restore_rng(rng: np.random.Generator, state: np.ndarray):
    rng.bit_generator.state = json.loads(bytes(np.asarray(state, dtype=np.uint8)).decode("utf-8"))


class BaseLearner(Learner):
    """Shared bookkeeping: step counting, walltime, snapshot publication and state dicts.

    Subclasses list their parameter dicts in `param_attrs`, optimizers in
    `optimizer_attrs` and scalar state in `scalar_attrs`, and implement `_learn`.
    """

    param_attrs: Tuple[str, ...] = ("params", "target_params")
    optimizer_attrs: Tuple[str, ...] = ("optimizer",)
    scalar_attrs: Tuple[str, ...] = ()

    def __init__(self, dataset, seed: int = 0):
        self._dataset = dataset
        self._rng = np.random.default_rng(seed)
        self.learner_steps = 0
        self.clock = LearnerClock()
        self._lock = threading.Lock()
        self._version = 0
        self._snapshot: Optional[ParameterSnapshot] = None

    def published_params(self) -> Params:
        return self.params

    def _publish(self):
        with self._lock:
            self._snapshot = ParameterSnapshot.from_params(self._version, self.published_params())

    def get_snapshot(self) -> Optional[ParameterSnapshot]:
        with self._lock:
            return self._snapshot

    @property
    def version(self) -> int:
        return self._version

    @property
    def dataset(self):
        return self._dataset

    def step(self) -> Dict[str, float]:
        return self.learn(self._dataset.sample())

    def learn(self, batch: Batch) -> Dict[str, float]:
        before = self.published_params()
        metrics, priorities = self._learn(batch)
        if not all(np.isfinite(value) for value in metrics.values()):
            raise DivergenceError(f"non-finite learner metrics at step {self.learner_steps}: {metrics}")
        if priorities is not None and self._dataset is not None:
            self._dataset.update_priorities(batch, priorities)
        self.learner_steps += 1
        self.clock.tick()
        after = self.published_params()
        if any(not np.array_equal(before[name], after[name]) for name in after):
            self._version += 1
            self._publish()
        metrics.update(learner_steps=float(self.learner_steps), learner_walltime=self.clock.walltime,
                       version=float(self._version))
        return metrics

    def _learn(self, batch: Batch) -> Tuple[Dict[str, float], Optional[np.ndarray]]:
        raise NotImplementedError

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for attr in self.param_attrs:
            state.update(prefixed(attr, getattr(self, attr)))
        for attr in self.optimizer_attrs:
            state.update(getattr(self, attr).state_dict(prefix=attr))
        for attr in self.scalar_attrs:
            state[attr] = np.array(getattr(self, attr), dtype=np.float64)
        state["learner_steps"] = np.array(self.learner_steps, dtype=np.int64)
        state["version"] = np.array(self._version, dtype=np.int64)
        state["learner_walltime"] = np.array(self.clock.walltime, dtype=np.float64)
        state["rng"] = rng_state_array(self._rng)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for attr in self.param_attrs:
            current = getattr(self, attr)
            restored = unprefixed(attr, state)
            if set(restored) != set(current):
                raise ValueError(f"checkpoint tensors for {attr} do not match the learner")
            setattr(self, attr, {name: np.array(restored[name], dtype=np.float64) for name in current})
        for attr in self.optimizer_attrs:
            getattr(self, attr).load_state_dict(state, prefix=attr)
        for attr in self.scalar_attrs:
            setattr(self, attr, float(scalar(state[attr])))
        self.learner_steps = int(scalar(state["learner_steps"]))
        self._version = int(scalar(state["version"]))
        self.clock.walltime = float(scalar(state["learner_walltime"]))
        self.clock.resume()
        restore_rng(self._rng, state["rng"])
        self._publish()


class DQNLearner(BaseLearner):
    """Double Q-learning on n-step transitions with prioritized-replay importance weights"""

    def __init__(self, network: DenseNet, dataset, optimizer: Optimizer, importance_exponent: float = 0.4,
                 target_update_mode: str = "periodic", target_update_period: int = 100, polyak_tau: float = 0.005,
                 seed: int = 0, params: Optional[Params] = None):
        super().__init__(dataset, seed)
        self.network = network
        self.optimizer = optimizer
        self.importance_exponent = importance_exponent
        self.target_update_mode = target_update_mode
        self.target_update_period = target_update_period
        self.polyak_tau = polyak_tau
        self.params = params if params is not None else network.init(self._rng)
        self.target_params = copy_params(self.params)
        self._publish()

    def _learn(self, batch: Batch):
        data = stack_transitions(batch.items)
        actions = data["action"][:, 0].astype(np.int64)
        index = np.arange(len(actions))
        q, tape = self.network.forward(self.params, data["observation"])
        online_next, _ = self.network.forward(self.params, data["next_observation"])
        target_next, _ = self.network.forward(self.target_params, data["next_observation"])
        y, _ = double_q_target(data["reward"], data["discount"], online_next, target_next)
        weights = batch.importance_weights(self.importance_exponent) if self.importance_exponent else None
        loss, dq, delta = td_loss(y, q[index, actions], weights)
        grad_q = np.zeros_like(q)
        grad_q[index, actions] = dq
        grads, _ = self.network.backward(self.params, tape, grad_outputs=grad_q)
        self.params = self.optimizer.step(self.params, grads)
        self.target_params = update_target(self.params, self.target_params, self.target_update_mode,
                                           self.learner_steps + 1, self.target_update_period, self.polyak_tau)
        return {"loss": loss, "mean_abs_td": float(np.mean(np.abs(delta)))}, np.abs(delta)

    def q_values(self, observations: np.ndarray) -> np.ndarray:
        q, _ = self.network.forward(self.params, observations)
        return q


class R2D2Learner(BaseLearner):
    """Recurrent double Q-learning over stored sequences with burn-in"""

    def __init__(self, network: RecurrentNet, dataset, optimizer: Optimizer, gamma: float = 0.99,
                 importance_exponent: float = 0.4, priority_eta: float = 0.9, use_stored_state: bool = True,
                 target_update_mode: str = "periodic", target_update_period: int = 100, polyak_tau: float = 0.005,
                 seed: int = 0, params: Optional[Params] = None):
        super().__init__(dataset, seed)
        self.network = network
        self.optimizer = optimizer
        self.gamma = gamma
        self.importance_exponent = importance_exponent
        self.priority_eta = priority_eta
        self.use_stored_state = use_stored_state
        self.target_update_mode = target_update_mode
        self.target_update_period = target_update_period
        self.polyak_tau = polyak_tau
        self.params = params if params is not None else network.init(self._rng)
        self.target_params = copy_params(self.params)
        self._publish()

    def _burn_in(self, params: Params, initial_state: np.ndarray, observations: np.ndarray) -> np.ndarray:
        core, _ = RecurrentNet.split(params)
        states, _ = self.network.cell.unroll(core, initial_state, observations)
        return states[-1]

    def sequence_loss(self, batch: Batch, use_stored_state: Optional[bool] = None):
        """Returns (loss, grads, per-step deltas (steps, B), loss mask (steps, B))"""
        use_stored_state = self.use_stored_state if use_stored_state is None else use_stored_state
        slices: List[SequenceSlice] = batch.items
        batch_size = len(slices)
        length = slices[0].length
        burn_in = slices[0].burn_in_length
        observations = np.stack([s.observations for s in slices], axis=1)
        actions = np.stack([np.asarray(s.actions).reshape(length, -1)[:, 0] for s in slices], axis=1).astype(np.int64)
        rewards = np.stack([s.rewards for s in slices], axis=1)
        discounts = np.stack([s.discounts for s in slices], axis=1)
        mask = np.stack([s.mask for s in slices], axis=1)
        if use_stored_state:
            initial = np.stack([s.start_state for s in slices])
        else:
            initial = self.network.cell.initial_state(batch_size)
        if burn_in:
            online_state = self._burn_in(self.params, initial, observations[:burn_in])
            target_state = self._burn_in(self.target_params, initial, observations[:burn_in])
        else:
            online_state = target_state = initial
        q_online, _, tapes = self.network.unroll(self.params, online_state, observations[burn_in:])
        q_target, _, _ = self.network.unroll(self.target_params, target_state, observations[burn_in:])
        steps = length - burn_in
        num_actions = q_online.shape[-1]
        step_actions = actions[burn_in:]
        t_index, b_index = np.meshgrid(np.arange(steps), np.arange(batch_size), indexing="ij")
        chosen = q_online[:steps][t_index, b_index, step_actions]
        y, _ = double_q_target(rewards[burn_in:].reshape(-1), self.gamma * discounts[burn_in:].reshape(-1),
                               q_online[1:steps + 1].reshape(-1, num_actions),
                               q_target[1:steps + 1].reshape(-1, num_actions))
        loss_mask = mask[burn_in:] > 0
        valid = loss_mask.reshape(-1)
        deltas = np.zeros((steps, batch_size))
        grads = {name: np.zeros_like(value) for name, value in self.params.items()}
        if not np.any(valid):
            return 0.0, grads, deltas, loss_mask
        weights = None
        if self.importance_exponent:
            weights = np.broadcast_to(batch.importance_weights(self.importance_exponent), (steps, batch_size))
            weights = weights.reshape(-1)[valid]
        loss, dq, delta = td_loss(y[valid], chosen.reshape(-1)[valid], weights)
        flat_deltas = np.zeros(steps * batch_size)
        flat_deltas[valid] = delta
        deltas = flat_deltas.reshape(steps, batch_size)
        flat_grad = np.zeros(steps * batch_size)
        flat_grad[valid] = dq
        grad_q = np.zeros_like(q_online)
        grad_q[t_index, b_index, step_actions] = flat_grad.reshape(steps, batch_size)
        grads = self.network.backward(self.params, tapes, grad_q)
        return loss, grads, deltas, loss_mask

    def _learn(self, batch: Batch):
        loss, grads, deltas, loss_mask = self.sequence_loss(batch)
        self.params = self.optimizer.step(self.params, grads)
        self.target_params = update_target(self.params, self.target_params, self.target_update_mode,
                                           self.learner_steps + 1, self.target_update_period, self.polyak_tau)
        priorities = np.array([
            r2d2_priority(deltas[:, i], loss_mask[:, i], self.priority_eta) if loss_mask[:, i].any() else 0.0
            for i in range(deltas.shape[1])])
        return {"loss": loss, "loss_steps": float(loss_mask.sum()),
                "mean_abs_td": float(np.abs(deltas[loss_mask]).mean()) if loss_mask.any() else 0.0}, priorities


class ImpalaLearner(BaseLearner):
    """V-trace actor-critic on a shared trunk whose last output column is the state value"""

    param_attrs = ("params",)

    def __init__(self, network: DenseNet, dataset, optimizer: Optimizer, gamma: float = 0.99,
                 entropy_coeff: float = 0.01, baseline_cost: float = 0.5, rho_clip: float = 1.0,
                 c_clip: float = 1.0, seed: int = 0, params: Optional[Params] = None):
        super().__init__(dataset, seed)
        self.network = network
        self.num_actions = network.layer_sizes[-1] - 1
        self.optimizer = optimizer
        self.gamma = gamma
        self.entropy_coeff = entropy_coeff
        self.baseline_cost = baseline_cost
        self.rho_clip = rho_clip
        self.c_clip = c_clip
        self.params = params if params is not None else network.init(self._rng)
        self._publish()

    def _learn(self, batch: Batch):
        slices: List[SequenceSlice] = batch.items
        batch_size = len(slices)
        grads = {name: np.zeros_like(value) for name, value in self.params.items()}
        totals = {"pg_loss": 0.0, "entropy": 0.0, "value_loss": 0.0, "mean_rho": 0.0}
        num_actions = self.num_actions
        for piece in slices:
            steps = int(round(piece.mask.sum()))
            if steps == 0:
                continue
            outputs, tape = self.network.forward(self.params, piece.observations[:steps + 1])
            logits = outputs[:steps, :num_actions]
            values = outputs[:, num_actions]
            actions = np.asarray(piece.actions).reshape(piece.length, -1)[:steps, 0].astype(np.int64)
            target_log_probs = log_softmax(logits)[np.arange(steps), actions]
            discounts = self.gamma * piece.discounts[:steps]
            rewards = piece.rewards[:steps]
            trace = vtrace(values, rewards, discounts, piece.behavior_log_probs[:steps], target_log_probs,
                           self.rho_clip, self.c_clip)
            v_next = np.append(trace.v_targets[1:], values[steps])
            pg = impala_policy_gradient(logits, actions, rewards, discounts, v_next, values[:steps],
                                        self.entropy_coeff, importance_weights=trace.rhos)
            value_loss, dv, _ = td_loss(trace.v_targets, values[:steps])
            grad_out = np.zeros_like(outputs)
            grad_out[:steps, :num_actions] = pg.d_logits
            grad_out[:steps, num_actions] = self.baseline_cost * dv
            piece_grads, _ = self.network.backward(self.params, tape, grad_logits=grad_out / batch_size)
            for name in grads:
                grads[name] += piece_grads[name]
            totals["pg_loss"] += pg.pg_loss / batch_size
            totals["entropy"] += pg.entropy / batch_size
            totals["value_loss"] += value_loss / batch_size
            totals["mean_rho"] += float(np.mean(trace.rhos)) / batch_size
        self.params = self.optimizer.step(self.params, grads)
        totals["loss"] = (totals["pg_loss"] - self.entropy_coeff * totals["entropy"]
                          + self.baseline_cost * totals["value_loss"])
        return totals, None

    def policy(self, observations: np.ndarray) -> np.ndarray:
        outputs, _ = self.network.forward(self.params, observations)
        return softmax(outputs[:, :self.num_actions])


def _critic_inputs(observations: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.concatenate([observations, actions], axis=-1)


class D4PGLearner(BaseLearner):
    """Deterministic policy gradient with a scalar (DDPG) or categorical (D4PG) critic.

    A critic with a single atom is the scalar critic, so both modes share one code path.
    """

    param_attrs = ("policy_params", "critic_params", "target_policy_params", "target_critic_params")
    optimizer_attrs = ("policy_optimizer", "critic_optimizer")

    def __init__(self, policy: DenseNet, critic: DenseNet, dataset, policy_optimizer: Optimizer,
                 critic_optimizer: Optimizer, support: Optional[np.ndarray] = None,
                 target_update_mode: str = "polyak", target_update_period: int = 100, polyak_tau: float = 0.005,
                 seed: int = 0):
        super().__init__(dataset, seed)
        if policy.head != Head.TANH_SCALED:
            raise ValueError("the deterministic policy needs a tanh-scaled head")
        self.policy = policy
        self.critic = critic
        self.distributional = critic.head == Head.CATEGORICAL
        if self.distributional and (support is None or len(support) != critic.num_atoms):
            raise ValueError("a categorical critic needs a support matching its atoms")
        self.support = support
        self.policy_optimizer = policy_optimizer
        self.critic_optimizer = critic_optimizer
        self.target_update_mode = target_update_mode
        self.target_update_period = target_update_period
        self.polyak_tau = polyak_tau
        self.policy_params = policy.init(self._rng)
        self.critic_params = critic.init(self._rng)
        self.target_policy_params = copy_params(self.policy_params)
        self.target_critic_params = copy_params(self.critic_params)
        self.obs_dim = policy.input_size
        self._publish()

    def published_params(self) -> Params:
        return self.policy_params

    def critic_value(self, params: Params, observations: np.ndarray, actions: np.ndarray):
        outputs, tape = self.critic.forward(params, _critic_inputs(observations, actions))
        if self.distributional:
            return expected_value(outputs[:, 0, :], self.support), outputs, tape
        return outputs[:, 0], outputs, tape

    def _critic_step(self, data: Dict[str, np.ndarray]):
        next_actions, _ = self.policy.forward(self.target_policy_params, data["next_observation"])
        _, next_outputs, _ = self.critic_value(self.target_critic_params, data["next_observation"], next_actions)
        _, outputs, tape = self.critic_value(self.critic_params, data["observation"], data["action"])
        if self.distributional:
            target = categorical_target(data["reward"], data["discount"], next_outputs[:, 0, :], self.support)
            loss, d_logits = categorical_ce_loss(target, tape.logits)
            grads, _ = self.critic.backward(self.critic_params, tape, grad_logits=d_logits)
        else:
            y = data["reward"] + data["discount"] * next_outputs[:, 0]
            loss, dq, _ = td_loss(y, outputs[:, 0])
            grads, _ = self.critic.backward(self.critic_params, tape, grad_outputs=dq[:, None])
        return loss, grads

    def action_gradient(self, critic_params: Params, observations: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """grad_a E[Z(o, a)] per sample"""
        values, outputs, tape = self.critic_value(critic_params, observations, actions)
        if self.distributional:
            grad_out = np.zeros_like(outputs)
            grad_out[:, 0, :] = self.support
        else:
            grad_out = np.ones_like(outputs)
        _, grad_inputs = self.critic.backward(critic_params, tape, grad_outputs=grad_out)
        return grad_inputs[:, self.obs_dim:]

    def _learn(self, batch: Batch):
        data = stack_transitions(batch.items)
        critic_loss, critic_grads = self._critic_step(data)
        actions, policy_tape = self.policy.forward(self.policy_params, data["observation"])
        clamped = np.clip(actions, self.policy.low, self.policy.high)
        num_clamped = float(np.sum(clamped != actions))
        dq_da = dpg_gradient(clamped, self.action_gradient(self.critic_params, data["observation"], clamped))
        batch_size = len(actions)
        policy_grads, _ = self.policy.backward(self.policy_params, policy_tape, grad_outputs=-dq_da / batch_size)
        q_mean = float(np.mean(self.critic_value(self.critic_params, data["observation"], clamped)[0]))
        self.critic_params = self.critic_optimizer.step(self.critic_params, critic_grads)
        self.policy_params = self.policy_optimizer.step(self.policy_params, policy_grads)
        step = self.learner_steps + 1
        self.target_policy_params = update_target(self.policy_params, self.target_policy_params,
                                                  self.target_update_mode, step, self.target_update_period,
                                                  self.polyak_tau)
        self.target_critic_params = update_target(self.critic_params, self.target_critic_params,
                                                  self.target_update_mode, step, self.target_update_period,
                                                  self.polyak_tau)
        return {"critic_loss": critic_loss, "policy_q": q_mean, "action_clamped": num_clamped}, None


class MPOLearner(BaseLearner):
    """MPO with an expected-value or categorical (DMPO) critic.

    Discrete actions weight the full action set; continuous actions use a
    diagonal Gaussian policy (mean, log_std outputs) and M sampled candidates.
    """

    param_attrs = ("policy_params", "critic_params", "target_policy_params", "target_critic_params")
    optimizer_attrs = ("policy_optimizer", "critic_optimizer")
    scalar_attrs = ("eta", "alpha")

    def __init__(self, policy: DenseNet, critic: DenseNet, dataset, policy_optimizer: Optimizer,
                 critic_optimizer: Optimizer, continuous: bool = False, support: Optional[np.ndarray] = None,
                 action_low: Optional[np.ndarray] = None, action_high: Optional[np.ndarray] = None,
                 epsilon: float = 0.01, epsilon_eta: float = 0.1, init_eta: float = 1.0, init_alpha: float = 1.0,
                 dual_learning_rate: float = 0.01, num_samples: int = 20, target_update_mode: str = "periodic",
                 target_update_period: int = 100, polyak_tau: float = 0.005, seed: int = 0):
        super().__init__(dataset, seed)
        if num_samples < 2:
            raise ValueError("MPO needs at least 2 candidate actions")
        self.policy = policy
        self.critic = critic
        self.continuous = continuous
        self.distributional = critic.head == Head.CATEGORICAL
        if self.distributional and (support is None or len(support) != critic.num_atoms):
            raise ValueError("a categorical critic needs a support matching its atoms")
        self.support = support
        self.action_low = None if action_low is None else np.asarray(action_low, dtype=np.float64)
        self.action_high = None if action_high is None else np.asarray(action_high, dtype=np.float64)
        if continuous and (self.action_low is None or self.action_high is None):
            raise ValueError("continuous MPO needs action bounds")
        self.policy_optimizer = policy_optimizer
        self.critic_optimizer = critic_optimizer
        self.epsilon = epsilon
        self.epsilon_eta = epsilon_eta
        self.eta = init_eta
        self.alpha = init_alpha
        self.dual_learning_rate = dual_learning_rate
        self.num_samples = num_samples
        self.target_update_mode = target_update_mode
        self.target_update_period = target_update_period
        self.polyak_tau = polyak_tau
        self.policy_params = policy.init(self._rng)
        self.critic_params = critic.init(self._rng)
        self.target_policy_params = copy_params(self.policy_params)
        self.target_critic_params = copy_params(self.critic_params)
        self._publish()

    def published_params(self) -> Params:
        return self.policy_params

    # -- policy heads -------------------------------------------------------------

    def gaussian(self, params: Params, observations: np.ndarray):
        outputs, tape = self.policy.forward(params, observations)
        dim = outputs.shape[1] // 2
        raw_log_std = outputs[:, dim:]
        return outputs[:, :dim], np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX), raw_log_std, tape

    def _sample_actions(self, params: Params, observations: np.ndarray) -> np.ndarray:
        mean, log_std, _, _ = self.gaussian(params, observations)
        noise = self._rng.standard_normal((len(mean), self.num_samples, mean.shape[1]))
        samples = mean[:, None, :] + np.exp(log_std)[:, None, :] * noise
        return np.clip(samples, self.action_low, self.action_high)

    # -- critic helpers ---------------------------------------------------------

    def _critic_outputs(self, params: Params, observations: np.ndarray, actions: Optional[np.ndarray] = None):
        inputs = observations if actions is None else _critic_inputs(observations, actions)
        return self.critic.forward(params, inputs)

    def _expected(self, outputs: np.ndarray) -> np.ndarray:
        return expected_value(outputs, self.support) if self.distributional else outputs

    def _candidate_values(self, params: Params, observations: np.ndarray, samples: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Q (B, M) and, when distributional, atom probabilities (B, M, K) for sampled actions"""
        batch_size, num_samples, action_dim = samples.shape
        repeated = np.repeat(observations, num_samples, axis=0)
        outputs, _ = self._critic_outputs(params, repeated, samples.reshape(-1, action_dim))
        if self.distributional:
            probs = outputs[:, 0, :].reshape(batch_size, num_samples, -1)
            return expected_value(probs, self.support), probs
        return outputs[:, 0].reshape(batch_size, num_samples), None

    def _critic_step(self, data: Dict[str, np.ndarray]):
        rewards, discounts = data["reward"], data["discount"]
        next_obs = data["next_observation"]
        batch_size = len(rewards)
        index = np.arange(batch_size)
        if self.continuous:
            next_samples = self._sample_actions(self.target_policy_params, next_obs)
            next_q, next_probs = self._candidate_values(self.target_critic_params, next_obs, next_samples)
            outputs, tape = self._critic_outputs(self.critic_params, data["observation"], data["action"])
            if self.distributional:
                target = categorical_target(rewards, discounts, next_probs.mean(axis=1), self.support)
                loss, d_logits = categorical_ce_loss(target, tape.logits)
                grads, _ = self.critic.backward(self.critic_params, tape, grad_logits=d_logits)
            else:
                y = rewards + discounts * next_q.mean(axis=1)
                loss, dq, _ = td_loss(y, outputs[:, 0])
                grads, _ = self.critic.backward(self.critic_params, tape, grad_outputs=dq[:, None])
            return loss, grads
        actions = data["action"][:, 0].astype(np.int64)
        target_logits, _ = self.policy.forward(self.target_policy_params, next_obs)
        next_pi = softmax(target_logits)
        next_outputs, _ = self._critic_outputs(self.target_critic_params, next_obs)
        outputs, tape = self._critic_outputs(self.critic_params, data["observation"])
        if self.distributional:
            mixture = np.einsum("ba,bak->bk", next_pi, next_outputs)
            target = categorical_target(rewards, discounts, mixture, self.support)
            num_actions, num_atoms = outputs.shape[1], outputs.shape[2]
            logits = tape.logits.reshape(batch_size, num_actions, num_atoms)
            loss, d_chosen = categorical_ce_loss(target, logits[index, actions])
            d_logits = np.zeros_like(logits)
            d_logits[index, actions] = d_chosen
            grads, _ = self.critic.backward(self.critic_params, tape, grad_logits=d_logits.reshape(batch_size, -1))
        else:
            y = rewards + discounts * np.sum(next_pi * next_outputs, axis=1)
            loss, dq, _ = td_loss(y, outputs[index, actions])
            grad_q = np.zeros_like(outputs)
            grad_q[index, actions] = dq
            grads, _ = self.critic.backward(self.critic_params, tape, grad_outputs=grad_q)
        return loss, grads

    def _policy_step(self, data: Dict[str, np.ndarray]):
        observations = data["observation"]
        if self.continuous:
            samples = self._sample_actions(self.target_policy_params, observations)
            q, _ = self._candidate_values(self.target_critic_params, observations, samples)
            target_mean, target_log_std, _, _ = self.gaussian(self.target_policy_params, observations)
            mean, log_std, raw_log_std, tape = self.gaussian(self.policy_params, observations)
            terms = mpo_gaussian_policy_loss(samples, q, mean, log_std, target_mean, target_log_std,
                                             self.eta, self.alpha, self.epsilon, self.epsilon_eta)
            d_mean, d_log_std = terms.d_policy
            inside = (raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX)
            grad_logits = np.concatenate([d_mean, d_log_std * inside], axis=1)
        else:
            q_outputs, _ = self._critic_outputs(self.target_critic_params, observations)
            q = self._expected(q_outputs)
            target_logits, _ = self.policy.forward(self.target_policy_params, observations)
            _, tape = self.policy.forward(self.policy_params, observations)
            terms = mpo_policy_loss(q, softmax(target_logits), tape.logits, self.eta, self.alpha,
                                    self.epsilon, self.epsilon_eta)
            grad_logits = terms.d_policy[0]
        grads, _ = self.policy.backward(self.policy_params, tape, grad_logits=grad_logits)
        return terms, grads

    def _learn(self, batch: Batch):
        data = stack_transitions(batch.items)
        critic_loss, critic_grads = self._critic_step(data)
        terms, policy_grads = self._policy_step(data)
        self.critic_params = self.critic_optimizer.step(self.critic_params, critic_grads)
        self.policy_params = self.policy_optimizer.step(self.policy_params, policy_grads)
        self.eta, self.alpha, eta_clamped = dual_step(self.eta, self.alpha, terms.temperature_grad,
                                                      terms.alpha_grad, self.dual_learning_rate)
        if eta_clamped:
            logger.warning(f"MPO temperature clamped at step {self.learner_steps}")
        step = self.learner_steps + 1
        self.target_policy_params = update_target(self.policy_params, self.target_policy_params,
                                                  self.target_update_mode, step, self.target_update_period,
                                                  self.polyak_tau)
        self.target_critic_params = update_target(self.critic_params, self.target_critic_params,
                                                  self.target_update_mode, step, self.target_update_period,
                                                  self.polyak_tau)
        return {"critic_loss": critic_loss, "policy_loss": terms.policy_loss, "kl": terms.kl,
                "eta": self.eta, "alpha": self.alpha, "eta_clamped": float(eta_clamped)}, None


class MCTSLearner(BaseLearner):
    """Policy imitation of search policies plus value regression on episode returns"""

    param_attrs = ("params",)

    def __init__(self, policy: DenseNet, value: DenseNet, dataset, optimizer: Optimizer, gamma: float = 1.0,
                 value_target: str = "mc", n_step: int = 10, seed: int = 0):
        super().__init__(dataset, seed)
        if value_target not in ("mc", "n-step"):
            raise ValueError(f"unknown value target {value_target!r}")
        self.policy = policy
        self.value = value
        self.optimizer = optimizer
        self.gamma = gamma
        self.value_target = value_target
        self.n_step = n_step
        self.params = {**prefixed("policy", policy.init(self._rng)), **prefixed("value", value.init(self._rng))}
        self._publish()

    def value_of(self, observations: np.ndarray) -> np.ndarray:
        values, _ = self.value.forward(unprefixed("value", self.params), observations)
        return values[:, 0]

    def returns(self, episode: Episode) -> np.ndarray:
        length = episode.length
        tail = float(self.value_of(episode.observations[-1:])[0]) if episode.truncated else 0.0
        if self.value_target == "mc":
            return discounted_return(episode.rewards, self.gamma, tail)
        values = self.value_of(episode.observations)
        targets = np.zeros(length)
        for t in range(length):
            k = min(self.n_step, length - t)
            targets[t] = sum(self.gamma ** i * episode.rewards[t + i] for i in range(k))
            if t + k < length:
                targets[t] += self.gamma ** k * values[t + k]
            else:
                targets[t] += self.gamma ** k * tail
        return targets

    def _learn(self, batch: Batch):
        episodes: List[Episode] = batch.items
        for episode in episodes:
            if episode.search_policies.shape[0] != episode.length:
                raise ValueError("episodes for search learning must carry a search policy per step")
        observations = np.concatenate([e.observations[:-1] for e in episodes])
        search_policies = np.concatenate([e.search_policies for e in episodes])
        targets = np.concatenate([self.returns(e) for e in episodes])
        policy_params = unprefixed("policy", self.params)
        value_params = unprefixed("value", self.params)
        _, policy_tape = self.policy.forward(policy_params, observations)
        imitation_loss, d_logits = mcts_imitation_loss(policy_tape.logits, search_policies)
        policy_grads, _ = self.policy.backward(policy_params, policy_tape, grad_logits=d_logits)
        values, value_tape = self.value.forward(value_params, observations)
        value_loss, dv, _ = td_loss(targets, values[:, 0])
        value_grads, _ = self.value.backward(value_params, value_tape, grad_outputs=dv[:, None])
        grads = {**prefixed("policy", policy_grads), **prefixed("value", value_grads)}
        self.params = self.optimizer.step(self.params, grads)
        return {"imitation_loss": imitation_loss, "value_loss": value_loss}, None


class BCLearner(BaseLearner):
    """Behaviour cloning: NLL for discrete actions, squared error for continuous ones"""

    param_attrs = ("params",)

    def __init__(self, network: DenseNet, dataset, optimizer: Optimizer, seed: int = 0):
        super().__init__(dataset, seed)
        self.network = network
        self.continuous = network.head == Head.TANH_SCALED
        self.optimizer = optimizer
        self.params = network.init(self._rng)
        self._publish()

    def _learn(self, batch: Batch):
        data = stack_transitions(batch.items)
        outputs, tape = self.network.forward(self.params, data["observation"])
        if self.continuous:
            loss, grad = bc_continuous_loss(outputs, data["action"])
            grads, _ = self.network.backward(self.params, tape, grad_outputs=grad)
        else:
            loss, d_logits = bc_loss(tape.logits, data["action"][:, 0].astype(np.int64))
            grads, _ = self.network.backward(self.params, tape, grad_logits=d_logits)
        self.params = self.optimizer.step(self.params, grads)
        return {"bc_loss": loss}, None

    def act(self, observations: np.ndarray) -> np.ndarray:
        outputs, tape = self.network.forward(self.params, observations)
        return outputs if self.continuous else np.argmax(tape.logits, axis=1)
