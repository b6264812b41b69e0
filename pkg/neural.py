"""
Neural
Dense networks, a gated recurrent cell, optimizers and target-network updates,
all with hand-derived backpropagation in 64-bit numpy.
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DivergenceError

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


class Activation(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"


class Head(str, enum.Enum):
    LINEAR = "linear"
    SOFTMAX = "softmax"
    CATEGORICAL = "categorical"
    TANH_SCALED = "tanh_scaled"
    DUELING = "dueling"


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _activate(kind: Activation, x: np.ndarray) -> np.ndarray:
    if kind == Activation.RELU:
        return np.maximum(x, 0.0)
    if kind == Activation.TANH:
        return np.tanh(x)
    return x


def _activation_grad(kind: Activation, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if kind == Activation.RELU:
        return (pre > 0.0).astype(np.float64)
    if kind == Activation.TANH:
        return 1.0 - post ** 2
    return np.ones_like(pre)


def check_finite(name: str, *arrays: np.ndarray):
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise DivergenceError(f"non-finite values in {name}")


def scalar(value) -> float | int:
    """Python number from a restored 0-d or single-element array"""
    return np.asarray(value).reshape(-1)[0].item()


@dataclass
class Tape:
    """Intermediates cached by a forward pass"""
    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    activations: List[np.ndarray] = field(default_factory=list)
    logits: Optional[np.ndarray] = None
    outputs: Optional[np.ndarray] = None


class DenseNet:
    """Multi-layer perceptron: `layer_sizes` runs from input width to final linear width.

    Heads:
      LINEAR       outputs = logits
      SOFTMAX      outputs = softmax(logits)
      CATEGORICAL  logits reshaped (B, num_actions, num_atoms), softmax over atoms
      TANH_SCALED  outputs = low + (high - low) * (tanh(logits) + 1) / 2
      DUELING      logits[:, 0] is the state value, logits[:, 1:] the advantages
    """

    def __init__(self, layer_sizes: Sequence[int], activation: Activation = Activation.RELU,
                 head: Head = Head.LINEAR, num_atoms: Optional[int] = None,
                 action_low: Optional[Sequence[float]] = None, action_high: Optional[Sequence[float]] = None):
        if len(layer_sizes) < 2 or any(size < 1 for size in layer_sizes):
            raise ValueError(f"invalid layer sizes {layer_sizes}")
        self.layer_sizes = list(layer_sizes)
        self.activation = Activation(activation)
        self.head = Head(head)
        self.num_layers = len(layer_sizes) - 1
        self.num_atoms = num_atoms
        if self.head == Head.CATEGORICAL:
            if not num_atoms or layer_sizes[-1] % num_atoms:
                raise ValueError("categorical head needs num_atoms dividing the output width")
            self.num_actions = layer_sizes[-1] // num_atoms
        elif self.head == Head.DUELING:
            if layer_sizes[-1] < 2:
                raise ValueError("dueling head needs a value column plus at least one advantage")
            self.num_actions = layer_sizes[-1] - 1
        else:
            self.num_actions = layer_sizes[-1]
        if self.head == Head.TANH_SCALED:
            if action_low is None or action_high is None:
                raise ValueError("tanh-scaled head needs action bounds")
            self.low = np.asarray(action_low, dtype=np.float64)
            self.high = np.asarray(action_high, dtype=np.float64)
            if self.low.shape != (layer_sizes[-1],):
                raise ValueError("action bounds must match the output width")

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    def init(self, rng: np.random.Generator) -> Params:
        params = {}
        for i in range(self.num_layers):
            fan_in, fan_out = self.layer_sizes[i], self.layer_sizes[i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            params[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params[f"b{i}"] = np.zeros(fan_out)
        return params

    def forward(self, params: Params, inputs: np.ndarray) -> Tuple[np.ndarray, Tape]:
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.input_size:
            raise ValueError(f"input width {x.shape[-1]} != {self.input_size}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite network input")
        tape = Tape()
        for i in range(self.num_layers):
            tape.inputs.append(x)
            pre = x @ params[f"w{i}"] + params[f"b{i}"]
            last = i == self.num_layers - 1
            post = pre if last else _activate(self.activation, pre)
            tape.pre_activations.append(pre)
            tape.activations.append(post)
            x = post
        tape.logits = x
        tape.outputs = self._apply_head(x)
        check_finite("network outputs", tape.outputs)
        return tape.outputs, tape

    def _apply_head(self, logits: np.ndarray) -> np.ndarray:
        if self.head == Head.SOFTMAX:
            return softmax(logits)
        if self.head == Head.CATEGORICAL:
            return softmax(logits.reshape(len(logits), self.num_actions, self.num_atoms))
        if self.head == Head.TANH_SCALED:
            return self.low + (self.high - self.low) * (np.tanh(logits) + 1.0) / 2.0
        if self.head == Head.DUELING:
            value, advantages = logits[:, :1], logits[:, 1:]
            return value + advantages - advantages.mean(axis=1, keepdims=True)
        return logits

    def head_backward(self, tape: Tape, grad_outputs: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the final linear outputs given a gradient w.r.t. head outputs"""
        out = tape.outputs
        g = np.asarray(grad_outputs, dtype=np.float64)
        if g.shape != out.shape:
            raise ValueError(f"output gradient shape {g.shape} != {out.shape}")
        if self.head in (Head.SOFTMAX, Head.CATEGORICAL):
            dz = out * (g - np.sum(out * g, axis=-1, keepdims=True))
            return dz.reshape(tape.logits.shape)
        if self.head == Head.TANH_SCALED:
            t = np.tanh(tape.logits)
            return g * (self.high - self.low) / 2.0 * (1.0 - t ** 2)
        if self.head == Head.DUELING:
            dv = np.sum(g, axis=1, keepdims=True)
            da = g - g.mean(axis=1, keepdims=True)
            return np.concatenate([dv, da], axis=1)
        return g

    def backward(self, params: Params, tape: Tape, grad_outputs: Optional[np.ndarray] = None,
                 grad_logits: Optional[np.ndarray] = None) -> Tuple[Params, np.ndarray]:
        """Returns (parameter gradients, input gradient); pass exactly one of the two gradients"""
        if (grad_outputs is None) == (grad_logits is None):
            raise ValueError("pass exactly one of grad_outputs or grad_logits")
        if grad_logits is None:
            delta = self.head_backward(tape, grad_outputs)
        else:
            delta = np.asarray(grad_logits, dtype=np.float64).reshape(tape.logits.shape)
        grads = {}
        for i in reversed(range(self.num_layers)):
            if i != self.num_layers - 1:
                delta = delta * _activation_grad(self.activation, tape.pre_activations[i], tape.activations[i])
            grads[f"w{i}"] = tape.inputs[i].T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            delta = delta @ params[f"w{i}"].T
        return {name: grads[name] for name in params}, delta


@dataclass
class RnnTape:
    inputs: np.ndarray
    states: np.ndarray
    z: np.ndarray
    r: np.ndarray
    n: np.ndarray


class GRUCell:
    """Gated recurrent cell.

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    n = tanh(x Wh + (r * h) Uh + bh), h' = (1 - z) * h + z * n
    """

    GATES = ("z", "r", "h")

    def __init__(self, input_size: int, hidden_size: int):
        if input_size < 1 or hidden_size < 1:
            raise ValueError("cell sizes must be >= 1")
        self.input_size = input_size
        self.hidden_size = hidden_size

    def init(self, rng: np.random.Generator) -> Params:
        params = {}
        bound_x = 1.0 / np.sqrt(self.input_size)
        bound_h = 1.0 / np.sqrt(self.hidden_size)
        for gate in self.GATES:
            params[f"w{gate}"] = rng.uniform(-bound_x, bound_x, size=(self.input_size, self.hidden_size))
            params[f"u{gate}"] = rng.uniform(-bound_h, bound_h, size=(self.hidden_size, self.hidden_size))
            params[f"b{gate}"] = np.zeros(self.hidden_size)
        return params

    def initial_state(self, batch_size: int = 1) -> np.ndarray:
        return np.zeros((batch_size, self.hidden_size))

    def step(self, params: Params, state: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        states, _ = self.unroll(params, state, np.asarray(inputs, dtype=np.float64)[None])
        return states[0]

    def unroll(self, params: Params, initial_state: np.ndarray, inputs: np.ndarray) -> Tuple[np.ndarray, RnnTape]:
        """inputs (T, B, I), initial_state (B, H) -> states h_1..h_T as (T, B, H)"""
        xs = np.asarray(inputs, dtype=np.float64)
        if xs.ndim == 2:
            xs = xs[:, None, :]
        if len(xs) == 0:
            raise ValueError("cannot unroll an empty sequence")
        if xs.shape[-1] != self.input_size:
            raise ValueError(f"input width {xs.shape[-1]} != {self.input_size}")
        h = np.asarray(initial_state, dtype=np.float64).reshape(xs.shape[1], self.hidden_size)
        steps = len(xs)
        states = np.zeros((steps + 1,) + h.shape)
        zs, rs, ns = (np.zeros((steps,) + h.shape) for _ in range(3))
        states[0] = h
        for t in range(steps):
            x = xs[t]
            z = sigmoid(x @ params["wz"] + h @ params["uz"] + params["bz"])
            r = sigmoid(x @ params["wr"] + h @ params["ur"] + params["br"])
            n = np.tanh(x @ params["wh"] + (r * h) @ params["uh"] + params["bh"])
            h = (1.0 - z) * h + z * n
            zs[t], rs[t], ns[t], states[t + 1] = z, r, n, h
        check_finite("recurrent states", states)
        return states[1:], RnnTape(inputs=xs, states=states, z=zs, r=rs, n=ns)

    def backward(self, params: Params, tape: RnnTape, grad_states: np.ndarray,
                 grad_final: Optional[np.ndarray] = None) -> Tuple[Params, np.ndarray, np.ndarray]:
        """Backpropagation through time; returns (param grads, input grads, initial-state grad)"""
        grad_states = np.asarray(grad_states, dtype=np.float64)
        if grad_states.shape != tape.states[1:].shape:
            raise ValueError(f"state gradient shape {grad_states.shape} != {tape.states[1:].shape}")
        grads = {name: np.zeros_like(value) for name, value in params.items()}
        grad_inputs = np.zeros_like(tape.inputs)
        dh_next = np.zeros_like(tape.states[0]) if grad_final is None else np.array(grad_final, dtype=np.float64)
        for t in reversed(range(len(tape.inputs))):
            x, h = tape.inputs[t], tape.states[t]
            z, r, n = tape.z[t], tape.r[t], tape.n[t]
            dh_out = grad_states[t] + dh_next
            dn = dh_out * z
            dz = dh_out * (n - h)
            dh = dh_out * (1.0 - z)
            da_h = dn * (1.0 - n ** 2)
            grads["wh"] += x.T @ da_h
            grads["uh"] += (r * h).T @ da_h
            grads["bh"] += da_h.sum(axis=0)
            d_rh = da_h @ params["uh"].T
            dr = d_rh * h
            dh += d_rh * r
            dx = da_h @ params["wh"].T
            da_z = dz * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
            for gate, da in (("z", da_z), ("r", da_r)):
                grads[f"w{gate}"] += x.T @ da
                grads[f"u{gate}"] += h.T @ da
                grads[f"b{gate}"] += da.sum(axis=0)
                dh += da @ params[f"u{gate}"].T
                dx += da @ params[f"w{gate}"].T
            grad_inputs[t] = dx
            dh_next = dh
        return grads, grad_inputs, dh_next


def rnn_unroll(cell: GRUCell, params: Params, initial_state: np.ndarray, inputs: np.ndarray):
    return cell.unroll(params, initial_state, inputs)


class RecurrentNet:
    """GRU core followed by a dense head; parameters prefixed 'core/' and 'head/'"""

    def __init__(self, cell: GRUCell, head: DenseNet):
        if head.input_size != cell.hidden_size:
            raise ValueError("head input width must equal the cell hidden size")
        self.cell = cell
        self.head = head

    def init(self, rng: np.random.Generator) -> Params:
        params = {f"core/{k}": v for k, v in self.cell.init(rng).items()}
        params.update({f"head/{k}": v for k, v in self.head.init(rng).items()})
        return params

    @staticmethod
    def split(params: Params) -> Tuple[Params, Params]:
        core = {k[len("core/"):]: v for k, v in params.items() if k.startswith("core/")}
        head = {k[len("head/"):]: v for k, v in params.items() if k.startswith("head/")}
        return core, head

    def step(self, params: Params, state: np.ndarray, observation: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        core, head = self.split(params)
        new_state = self.cell.step(core, state, np.asarray(observation, dtype=np.float64).reshape(1, -1))
        outputs, _ = self.head.forward(head, new_state)
        return outputs[0], new_state

    def unroll(self, params: Params, initial_state: np.ndarray, inputs: np.ndarray):
        """inputs (T, B, I) -> outputs (T, B, A), final state, tapes"""
        core, head = self.split(params)
        states, rnn_tape = self.cell.unroll(core, initial_state, inputs)
        steps, batch = states.shape[:2]
        outputs, head_tape = self.head.forward(head, states.reshape(steps * batch, -1))
        return outputs.reshape((steps, batch) + outputs.shape[1:]), states[-1], (rnn_tape, head_tape)

    def backward(self, params: Params, tapes, grad_outputs: np.ndarray) -> Params:
        core, head = self.split(params)
        rnn_tape, head_tape = tapes
        steps, batch = grad_outputs.shape[:2]
        head_grads, grad_states = self.head.backward(
            head, head_tape, grad_outputs=grad_outputs.reshape((steps * batch,) + grad_outputs.shape[2:]))
        core_grads, _, _ = self.cell.backward(core, rnn_tape, grad_states.reshape(steps, batch, -1))
        grads = {f"core/{k}": v for k, v in core_grads.items()}
        grads.update({f"head/{k}": v for k, v in head_grads.items()})
        return grads


class Optimizer:
    """Adam with bias correction; `kind='sgd'` gives plain gradient descent"""

    def __init__(self, learning_rate: float = 1e-3, kind: str = "adam", beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        self.kind = kind
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m: Params = {}
        self.v: Params = {}

    def step(self, params: Params, grads: Params) -> Params:
        for name, grad in grads.items():
            if name not in params or params[name].shape != np.shape(grad):
                raise ValueError(f"gradient {name} does not match parameters")
        check_finite("gradients", *grads.values())
        self.step_count += 1
        updated = dict(params)
        for name, grad in grads.items():
            if self.kind == "sgd":
                updated[name] = params[name] - self.learning_rate * grad
                continue
            m = self.m.get(name, np.zeros_like(grad))
            v = self.v.get(name, np.zeros_like(grad))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad ** 2
            self.m[name], self.v[name] = m, v
            m_hat = m / (1.0 - self.beta1 ** self.step_count)
            v_hat = v / (1.0 - self.beta2 ** self.step_count)
            updated[name] = params[name] - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
        check_finite("parameters", *updated.values())
        return updated

    def state_dict(self, prefix: str = "opt") -> Dict[str, np.ndarray]:
        state = {f"{prefix}/step": np.array(self.step_count, dtype=np.int64)}
        for name in sorted(self.m):
            state[f"{prefix}/m/{name}"] = self.m[name]
            state[f"{prefix}/v/{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "opt"):
        self.step_count = int(scalar(state[f"{prefix}/step"]))
        self.m = {k[len(prefix) + 3:]: np.array(v, dtype=np.float64) for k, v in state.items()
                  if k.startswith(f"{prefix}/m/")}
        self.v = {k[len(prefix) + 3:]: np.array(v, dtype=np.float64) for k, v in state.items()
                  if k.startswith(f"{prefix}/v/")}


def update_target(online: Params, target: Params, mode: str = "periodic", learner_step: int = 0,
                  period: int = 100, tau: float = 0.005) -> Params:
    if mode == "periodic":
        if period < 1:
            raise ValueError("target period must be >= 1")
        if learner_step % period == 0:
            return {name: np.array(value, copy=True) for name, value in online.items()}
        return target
    if mode == "polyak":
        if not 0.0 <= tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        return {name: tau * online[name] + (1.0 - tau) * target[name] for name in online}
    raise ValueError(f"unknown target update mode {mode!r}")


def copy_params(params: Params) -> Params:
    return {name: np.array(value, copy=True) for name, value in params.items()}
