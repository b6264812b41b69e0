"""
Monte Carlo tree search over a perfect simulator, with nodes keyed by state
so transpositions share statistics.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, Optional, Protocol, Tuple

import numpy as np

from neural import softmax

logger = logging.getLogger(__name__)


class Simulator(Protocol):
    num_actions: int

    def step(self, state: Hashable, action: int) -> Tuple[Hashable, float, bool]:
        """Deterministic transition: (next_state, reward, terminal)"""

    def observation(self, state: Hashable) -> np.ndarray:
        ...


@dataclass
class SearchNode:
    prior: np.ndarray
    visit_counts: np.ndarray
    value_sums: np.ndarray
    total_visits: int = 1
    edges: Dict[int, Tuple[Hashable, float, bool]] = field(default_factory=dict)

    @property
    def q_values(self) -> np.ndarray:
        q = np.zeros_like(self.value_sums)
        visited = self.visit_counts > 0
        q[visited] = self.value_sums[visited] / self.visit_counts[visited]
        return q


@dataclass
class SearchResult:
    visit_counts: np.ndarray
    q_values: np.ndarray
    search_policy: np.ndarray
    root_value: float
    tree_size: int

    @property
    def action(self) -> int:
        return int(np.argmax(self.search_policy))


class SearchTree:
    """Node store; N(o) = sum_a N(o, a) + 1"""

    def __init__(self, simulator: Simulator, policy_fn: Callable[[np.ndarray], np.ndarray],
                 value_fn: Callable[[np.ndarray], float], uct_c: float = 1.0, gamma: float = 1.0,
                 unvisited_value: float = 0.0):
        self.simulator = simulator
        self.policy_fn = policy_fn
        self.value_fn = value_fn
        self.uct_c = uct_c
        self.gamma = gamma
        self.unvisited_value = unvisited_value
        self.nodes: Dict[Hashable, SearchNode] = {}

    def expand(self, state: Hashable) -> SearchNode:
        prior = np.asarray(self.policy_fn(self.simulator.observation(state)), dtype=np.float64)
        if prior.shape != (self.simulator.num_actions,):
            raise ValueError(f"prior shape {prior.shape} does not match {self.simulator.num_actions} actions")
        node = SearchNode(prior=prior, visit_counts=np.zeros(len(prior)), value_sums=np.zeros(len(prior)))
        self.nodes[state] = node
        return node

    def select(self, node: SearchNode) -> int:
        # unvisited actions are scored at unvisited_value; reported q_values keep 0 for them
        q = np.where(node.visit_counts > 0, node.q_values, self.unvisited_value)
        scores = q + self.uct_c * np.sqrt(node.total_visits) / (node.visit_counts + 1.0) * node.prior
        return int(np.argmax(scores))

    def edge(self, node: SearchNode, state: Hashable, action: int) -> Tuple[Hashable, float, bool]:
        if action not in node.edges:
            node.edges[action] = self.simulator.step(state, action)
        return node.edges[action]

    def simulate(self, root: Hashable, max_depth: int):
        path = []
        state = root
        node = self.nodes[root]
        leaf_value = 0.0
        for depth in range(1, max_depth + 1):
            action = self.select(node)
            next_state, reward, terminal = self.edge(node, state, action)
            path.append((node, action, reward))
            if terminal:
                leaf_value = 0.0
                break
            observation = self.simulator.observation(next_state)
            if depth == max_depth:
                leaf_value = float(self.value_fn(observation))
                break
            if next_state not in self.nodes:
                self.expand(next_state)
                leaf_value = float(self.value_fn(observation))
                break
            state = next_state
            node = self.nodes[state]
        value = leaf_value
        for node, action, reward in reversed(path):
            value = reward + self.gamma * value
            node.value_sums[action] += value
            node.visit_counts[action] += 1
            node.total_visits += 1


def mcts_search(root_state: Hashable, simulator: Simulator, policy_fn: Callable[[np.ndarray], np.ndarray],
                value_fn: Callable[[np.ndarray], float], num_simulations: int, max_depth: int = 50,
                uct_c: float = 1.0, gamma: float = 1.0, temperature: float = 1.0,
                unvisited_value: float = 0.0) -> SearchResult:
    if num_simulations < 1:
        raise ValueError("num_simulations must be >= 1")
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    tree = SearchTree(simulator, policy_fn, value_fn, uct_c=uct_c, gamma=gamma, unvisited_value=unvisited_value)
    root = tree.expand(root_state)
    for _ in range(num_simulations):
        tree.simulate(root_state, max_depth)
    q_values = root.q_values
    visits = root.visit_counts.copy()
    root_value = float(np.sum(visits * q_values) / max(np.sum(visits), 1.0))
    return SearchResult(visit_counts=visits, q_values=q_values,
                        search_policy=softmax(q_values / temperature), root_value=root_value,
                        tree_size=len(tree.nodes))


def exhaustive_value(state: Hashable, simulator: Simulator, depth: int, gamma: float = 1.0) -> float:
    """Optimal depth-limited return by brute-force expansion (leaf value 0)"""
    if depth == 0:
        return 0.0
    best = -np.inf
    for action in range(simulator.num_actions):
        next_state, reward, terminal = simulator.step(state, action)
        value = reward if terminal else reward + gamma * exhaustive_value(next_state, simulator, depth - 1, gamma)
        best = max(best, value)
    return float(best)
