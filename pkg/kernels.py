"""
Learning Kernels
Pure numerical targets, losses and corrections shared by the learners. Every
function is free of side effects; gradients are returned explicitly.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from errors import DivergenceError
from neural import log_softmax, softmax

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

ETA_MIN = 1e-6
ALPHA_MAX = 1e6


def discounted_return(rewards: np.ndarray, gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    """R_t = r_t + gamma * R_{t+1} evaluated backwards for every t"""
    rewards = np.asarray(rewards, dtype=np.float64)
    returns = np.zeros_like(rewards)
    running = bootstrap
    for t in reversed(range(len(rewards))):
        running = rewards[t] + gamma * running
        returns[t] = running
    return returns


def double_q_target(rewards: np.ndarray, discounts: np.ndarray, online_q_next: np.ndarray,
                    target_q_next: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """y = r + discount * Q_target(o', argmax_a Q_online(o', a)); returns (y, bootstrap actions)"""
    online_q_next = np.atleast_2d(online_q_next)
    target_q_next = np.atleast_2d(target_q_next)
    if online_q_next.shape != target_q_next.shape:
        raise ValueError("online and target Q-values differ in shape")
    actions = np.argmax(online_q_next, axis=1)
    bootstrap = target_q_next[np.arange(len(actions)), actions]
    y = np.asarray(rewards, dtype=np.float64) + np.asarray(discounts, dtype=np.float64) * bootstrap
    return y, actions


def nstep_double_q_target(rewards: np.ndarray, gamma: float, discount_flags: np.ndarray,
                          online_q_next: np.ndarray, target_q_next: np.ndarray) -> np.ndarray:
    """rewards (B, n); discount_flags (B,) is 0 where the window hit a terminal step"""
    rewards = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    n = rewards.shape[1]
    accumulated = rewards @ (gamma ** np.arange(n))
    discounts = (gamma ** n) * np.asarray(discount_flags, dtype=np.float64)
    y, _ = double_q_target(accumulated, discounts, online_q_next, target_q_next)
    return y


def td_loss(y: ArrayLike, q: ArrayLike, weights: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean weighted squared TD error; returns (loss, dloss/dq, delta = y - q)"""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    if y.shape != q.shape:
        raise ValueError(f"target shape {y.shape} != prediction shape {q.shape}")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    delta = y - q
    batch = len(y)
    loss = float(np.sum(w * delta ** 2) / batch)
    grad = -2.0 * w * delta / batch
    if not np.isfinite(loss):
        raise DivergenceError("non-finite TD loss")
    return loss, grad, delta


@dataclass
class VTraceOutput:
    v_targets: np.ndarray
    pg_advantages: np.ndarray
    rhos: np.ndarray
    cs: np.ndarray


def vtrace(values: np.ndarray, rewards: np.ndarray, discounts: ArrayLike, behavior_log_probs: np.ndarray,
           target_log_probs: np.ndarray, rho_clip: float = 1.0, c_clip: float = 1.0) -> VTraceOutput:
    """values has one more leading entry than rewards (the bootstrap V(o_{t+n}))"""
    values = np.asarray(values, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    steps = len(rewards)
    if len(values) != steps + 1:
        raise ValueError("values must hold one bootstrap entry beyond the rewards")
    if rho_clip <= 0 or c_clip <= 0:
        raise ValueError("clipping thresholds must be positive")
    discounts = np.broadcast_to(np.asarray(discounts, dtype=np.float64), rewards.shape)
    log_ratio = np.asarray(target_log_probs, dtype=np.float64) - np.asarray(behavior_log_probs, dtype=np.float64)
    ratios = np.exp(log_ratio)
    if not np.all(np.isfinite(ratios)):
        raise DivergenceError("non-finite importance ratios")
    rhos = np.minimum(rho_clip, ratios)
    cs = np.minimum(c_clip, ratios)
    v_targets = np.zeros_like(values)
    v_targets[steps] = values[steps]
    for t in reversed(range(steps)):
        delta = rhos[t] * (rewards[t] + discounts[t] * values[t + 1] - values[t])
        v_targets[t] = values[t] + delta + discounts[t] * cs[t] * (v_targets[t + 1] - values[t + 1])
    pg_advantages = rewards + discounts * v_targets[1:] - values[:-1]
    return VTraceOutput(v_targets=v_targets[:-1], pg_advantages=pg_advantages, rhos=rhos, cs=cs)


@dataclass
class PolicyGradientTerms:
    pg_loss: float
    entropy_bonus: float
    entropy: float
    d_logits: np.ndarray


def impala_policy_gradient(logits: np.ndarray, actions: np.ndarray, rewards: np.ndarray, discounts: ArrayLike,
                           v_next: np.ndarray, values: np.ndarray, entropy_coeff: float = 0.0,
                           importance_weights: Optional[np.ndarray] = None) -> PolicyGradientTerms:
    """Entropy-regularised policy gradient; minimise pg_loss - entropy_bonus.

    The advantage r + discount * v_next - V is a constant; d_logits is the
    gradient of (pg_loss - entropy_bonus) with respect to the policy logits.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    batch, num_actions = logits.shape
    log_pi = log_softmax(logits)
    pi = np.exp(log_pi)
    chosen = pi[np.arange(batch), actions]
    if np.any(chosen <= 0.0):
        raise ValueError("chosen action has zero probability")
    advantages = (np.asarray(rewards, dtype=np.float64) + np.asarray(discounts, dtype=np.float64)
                  * np.asarray(v_next, dtype=np.float64) - np.asarray(values, dtype=np.float64))
    weights = np.ones(batch) if importance_weights is None else np.asarray(importance_weights, dtype=np.float64)
    scaled = weights * advantages
    pg_loss = float(-np.mean(scaled * log_pi[np.arange(batch), actions]))
    entropy_per_state = -np.sum(pi * log_pi, axis=1)
    entropy = float(np.mean(entropy_per_state))
    one_hot = np.eye(num_actions)[actions]
    d_pg = -scaled[:, None] * (one_hot - pi) / batch
    d_entropy = entropy_coeff * pi * (log_pi + entropy_per_state[:, None]) / batch
    return PolicyGradientTerms(pg_loss=pg_loss, entropy_bonus=entropy_coeff * entropy, entropy=entropy,
                               d_logits=d_pg + d_entropy)


def dpg_gradient(policy_actions: np.ndarray, critic_action_grad: np.ndarray) -> np.ndarray:
    """Ascent direction for the policy output: grad_a Q(o, a) at a = pi(o)"""
    policy_actions = np.asarray(policy_actions, dtype=np.float64)
    critic_action_grad = np.asarray(critic_action_grad, dtype=np.float64)
    if policy_actions.shape != critic_action_grad.shape:
        raise ValueError("critic gradient does not match the policy action shape")
    return critic_action_grad.copy()


def categorical_support(v_min: float, v_max: float, num_atoms: int) -> np.ndarray:
    if num_atoms < 2 or v_min >= v_max:
        raise ValueError("categorical support needs >= 2 atoms and v_min < v_max")
    return np.linspace(v_min, v_max, num_atoms)


def categorical_project(target_atoms: np.ndarray, probabilities: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Project mass at `target_atoms` onto the evenly spaced `support` by linear splitting"""
    target_atoms = np.atleast_2d(np.asarray(target_atoms, dtype=np.float64))
    probabilities = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    support = np.asarray(support, dtype=np.float64)
    num_atoms = len(support)
    v_min, v_max = support[0], support[-1]
    spacing = (v_max - v_min) / (num_atoms - 1)
    clamped = np.clip(target_atoms, v_min, v_max)
    position = (clamped - v_min) / spacing
    nearest = np.round(position)
    position = np.where(np.abs(position - nearest) < 1e-9, nearest, position)
    lower = np.floor(position).astype(np.int64)
    upper = np.ceil(position).astype(np.int64)
    same = lower == upper
    lower_mass = np.where(same, probabilities, probabilities * (upper - position))
    upper_mass = np.where(same, 0.0, probabilities * (position - lower))
    projected = np.zeros((len(probabilities), num_atoms))
    rows = np.repeat(np.arange(len(probabilities))[:, None], target_atoms.shape[1], axis=1)
    np.add.at(projected, (rows, lower), lower_mass)
    np.add.at(projected, (rows, upper), upper_mass)
    return projected


def categorical_target(rewards: np.ndarray, discounts: np.ndarray, probabilities: np.ndarray,
                       support: np.ndarray) -> np.ndarray:
    """Projected distribution of r + discount * Z"""
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1, 1)
    discounts = np.asarray(discounts, dtype=np.float64).reshape(-1, 1)
    return categorical_project(rewards + discounts * support[None, :], probabilities, support)


def categorical_ce_loss(target: np.ndarray, logits: np.ndarray) -> Tuple[float, np.ndarray]:
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    log_p = log_softmax(logits)
    batch = len(logits)
    loss = float(-np.sum(target * log_p) / batch)
    return loss, (np.exp(log_p) - target) / batch


def expected_value(probabilities: np.ndarray, support: np.ndarray) -> np.ndarray:
    return np.asarray(probabilities, dtype=np.float64) @ np.asarray(support, dtype=np.float64)


def mpo_weights(q_values: np.ndarray, eta: float) -> np.ndarray:
    if eta <= 0:
        raise ValueError(f"temperature must be positive, got {eta}")
    return softmax(np.atleast_2d(np.asarray(q_values, dtype=np.float64)) / eta, axis=1)


def temperature_dual(q_values: np.ndarray, eta: float, epsilon_eta: float = 0.1) -> Tuple[float, float]:
    """g(eta) = eta * eps + eta * mean_states log mean_candidates exp(Q / eta); returns (g, dg/deta)"""
    if eta <= 0:
        raise ValueError(f"temperature must be positive, got {eta}")
    q = np.atleast_2d(np.asarray(q_values, dtype=np.float64))
    scaled = q / eta
    peak = np.max(scaled, axis=1, keepdims=True)
    log_mean_exp = (peak[:, 0] + np.log(np.mean(np.exp(scaled - peak), axis=1)))
    weights = softmax(scaled, axis=1)
    loss = float(eta * epsilon_eta + eta * np.mean(log_mean_exp))
    grad = float(epsilon_eta + np.mean(log_mean_exp - np.sum(weights * scaled, axis=1)))
    return loss, grad


def categorical_kl(p: np.ndarray, q_logits: np.ndarray) -> np.ndarray:
    """KL(p || softmax(q_logits)) per row"""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    log_q = log_softmax(np.atleast_2d(q_logits))
    safe_log_p = np.log(np.where(p > 0, p, 1.0))
    return np.sum(np.where(p > 0, p * (safe_log_p - log_q), 0.0), axis=1)


@dataclass
class MpoTerms:
    weights: np.ndarray
    policy_loss: float
    kl: float
    kl_penalty: float
    d_policy: Tuple[np.ndarray, ...]
    temperature_loss: float
    temperature_grad: float
    alpha_loss: float
    alpha_grad: float


def mpo_policy_loss(q_values: np.ndarray, target_probs: np.ndarray, online_logits: np.ndarray, eta: float,
                    alpha: float, epsilon: float = 0.01, epsilon_eta: float = 0.1) -> MpoTerms:
    """Discrete-action MPO over the full action set.

    Policy objective: -sum_a w_a log pi(a) + alpha * KL(pi_target || pi).
    d_policy holds the gradient w.r.t. the online logits.
    """
    weights = mpo_weights(q_values, eta)
    logits = np.atleast_2d(np.asarray(online_logits, dtype=np.float64))
    target_probs = np.atleast_2d(np.asarray(target_probs, dtype=np.float64))
    batch = len(logits)
    log_pi = log_softmax(logits)
    pi = np.exp(log_pi)
    policy_loss = float(-np.sum(weights * log_pi) / batch)
    kl = float(np.mean(categorical_kl(target_probs, logits)))
    d_logits = ((pi - weights) + alpha * (pi - target_probs)) / batch
    temperature_loss, temperature_grad = temperature_dual(q_values, eta, epsilon_eta)
    return MpoTerms(weights=weights, policy_loss=policy_loss, kl=kl, kl_penalty=alpha * kl,
                    d_policy=(d_logits,), temperature_loss=temperature_loss,
                    temperature_grad=temperature_grad, alpha_loss=alpha * (epsilon - kl),
                    alpha_grad=epsilon - kl)


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    std = np.exp(log_std)
    z = (actions - mean) / std
    return np.sum(-0.5 * z ** 2 - log_std - 0.5 * np.log(2.0 * np.pi), axis=-1)


def gaussian_kl(mean_p: np.ndarray, log_std_p: np.ndarray, mean_q: np.ndarray, log_std_q: np.ndarray) -> np.ndarray:
    """KL(N_p || N_q) for diagonal Gaussians, per row"""
    var_p = np.exp(2.0 * log_std_p)
    var_q = np.exp(2.0 * log_std_q)
    return np.sum(log_std_q - log_std_p + (var_p + (mean_p - mean_q) ** 2) / (2.0 * var_q) - 0.5, axis=-1)


def mpo_gaussian_policy_loss(sampled_actions: np.ndarray, q_values: np.ndarray, mean: np.ndarray,
                             log_std: np.ndarray, target_mean: np.ndarray, target_log_std: np.ndarray,
                             eta: float, alpha: float, epsilon: float = 0.01,
                             epsilon_eta: float = 0.1) -> MpoTerms:
    """Continuous MPO: sampled_actions (B, M, D) drawn from the target policy, q_values (B, M).

    d_policy holds (d mean, d log_std) of the policy objective.
    """
    weights = mpo_weights(q_values, eta)
    batch = len(mean)
    mean_b = mean[:, None, :]
    var = np.exp(2.0 * log_std)[:, None, :]
    diff = sampled_actions - mean_b
    log_probs = gaussian_log_prob(sampled_actions, mean_b, log_std[:, None, :])
    policy_loss = float(-np.sum(weights * log_probs) / batch)
    d_mean = -np.sum(weights[:, :, None] * diff / var, axis=1) / batch
    d_log_std = -np.sum(weights[:, :, None] * (diff ** 2 / var - 1.0), axis=1) / batch
    kl_rows = gaussian_kl(target_mean, target_log_std, mean, log_std)
    kl = float(np.mean(kl_rows))
    var_online = np.exp(2.0 * log_std)
    var_target = np.exp(2.0 * target_log_std)
    d_mean += alpha * (mean - target_mean) / var_online / batch
    d_log_std += alpha * (1.0 - (var_target + (target_mean - mean) ** 2) / var_online) / batch
    temperature_loss, temperature_grad = temperature_dual(q_values, eta, epsilon_eta)
    return MpoTerms(weights=weights, policy_loss=policy_loss, kl=kl, kl_penalty=alpha * kl,
                    d_policy=(d_mean, d_log_std), temperature_loss=temperature_loss,
                    temperature_grad=temperature_grad, alpha_loss=alpha * (epsilon - kl),
                    alpha_grad=epsilon - kl)


def dual_step(eta: float, alpha: float, temperature_grad: float, alpha_grad: float,
              learning_rate: float) -> Tuple[float, float, bool]:
    """Gradient step on both duals with projection; returns (eta, alpha, eta_clamped)"""
    eta = eta - learning_rate * temperature_grad
    clamped = eta < ETA_MIN
    if clamped:
        eta = ETA_MIN
    alpha = float(np.clip(alpha - learning_rate * alpha_grad, 0.0, ALPHA_MAX))
    return float(eta), alpha, clamped


def mcts_imitation_loss(policy_logits: np.ndarray, search_policy: np.ndarray,
                        floor: float = 1e-6) -> Tuple[float, np.ndarray]:
    """Mean KL(pi_theta || pi_search) and its gradient w.r.t. the policy logits"""
    logits = np.atleast_2d(np.asarray(policy_logits, dtype=np.float64))
    target = np.atleast_2d(np.asarray(search_policy, dtype=np.float64))
    if floor > 0:
        target = (target + floor) / np.sum(target + floor, axis=1, keepdims=True)
    log_p = log_softmax(logits)
    p = np.exp(log_p)
    if np.any((target <= 0.0) & (p > 0.0)):
        raise ValueError("search policy has zero mass where the network policy is positive")
    log_q = np.log(target)
    per_state = np.sum(p * (log_p - log_q), axis=1)
    batch = len(logits)
    grad = p * (log_p - log_q - per_state[:, None]) / batch
    return float(np.mean(per_state)), grad


def r2d2_priority(td_errors: np.ndarray, mask: Optional[np.ndarray] = None, eta: float = 0.9) -> float:
    if not 0.0 <= eta <= 1.0:
        raise ValueError("priority mix must lie in [0, 1]")
    errors = np.abs(np.asarray(td_errors, dtype=np.float64))
    if mask is not None:
        errors = errors[np.asarray(mask) > 0]
    if errors.size == 0:
        raise ValueError("every step of the sequence is masked")
    return float(eta * np.max(errors) + (1.0 - eta) * np.mean(errors))


def bc_loss(policy_logits: np.ndarray, demo_actions: np.ndarray) -> Tuple[float, np.ndarray]:
    """Negative log-likelihood of demonstrated discrete actions"""
    logits = np.atleast_2d(np.asarray(policy_logits, dtype=np.float64))
    actions = np.asarray(demo_actions, dtype=np.int64).reshape(-1)
    batch, num_actions = logits.shape
    log_p = log_softmax(logits)
    loss = float(-np.mean(log_p[np.arange(batch), actions]))
    return loss, (np.exp(log_p) - np.eye(num_actions)[actions]) / batch


def bc_continuous_loss(predicted: np.ndarray, demo_actions: np.ndarray) -> Tuple[float, np.ndarray]:
    predicted = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    demo = np.atleast_2d(np.asarray(demo_actions, dtype=np.float64))
    diff = predicted - demo
    batch = len(predicted)
    return float(np.sum(diff ** 2) / batch), 2.0 * diff / batch
