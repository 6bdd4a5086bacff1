"""Sampling-based planners over :mod:`vqmpt.env2d` worlds.

``vqmpt_plan`` is the modified RRT whose CONNECT step checks the whole
segment to a sample instead of extending by a fixed range; the sampling
distribution is injected through a :class:`SamplerHandle`, so the same code
is the uniform-RRT baseline when handed a uniform sampler. ``rrt_star_plan``
is a standard anytime RRT* used both as a baseline and to generate
demonstrations.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env2d import DEFAULT_DELTA, ProblemInstance, World, is_edge_valid, is_state_valid, sample_uniform
from .exceptions import DomainError, PreconditionError


class Tree:
    """Vertices with parent links, stored in a growable array."""

    def __init__(self, root, capacity: int = 256):
        self._nodes = np.empty((capacity, 2))
        self._nodes[0] = root
        self.parent = [-1]
        self.cost = [0.0]

    def __len__(self) -> int:
        return len(self.parent)

    @property
    def nodes(self) -> np.ndarray:
        return self._nodes[: len(self)]

    def add(self, q, parent: int, cost: float = 0.0) -> int:
        n = len(self)
        if n == len(self._nodes):
            grown = np.empty((2 * n, 2))
            grown[:n] = self._nodes
            self._nodes = grown
        self._nodes[n] = q
        self.parent.append(parent)
        self.cost.append(cost)
        return n

    def path_to(self, index: int) -> np.ndarray:
        chain = []
        while index != -1:
            chain.append(index)
            index = self.parent[index]
        return self.nodes[chain[::-1]].copy()


@dataclass
class PlannerResult:
    success: bool
    path: np.ndarray | None
    vertices: int
    samples_drawn: int
    wall_time: float
    tree: Tree | None = field(default=None, repr=False, compare=False)

    @property
    def path_length(self) -> float | None:
        return None if self.path is None else path_length(self.path)


@dataclass
class SamplerHandle:
    """A named sampling distribution; ``draw(rng)`` returns one 2-vector."""

    kind: str
    draw: Callable[[np.random.Generator], np.ndarray]


def uniform_sampler(world: World) -> SamplerHandle:
    return SamplerHandle("uniform", lambda rng: sample_uniform(world, rng))


def nearest(tree: Tree, q) -> int:
    """Index of the Euclidean-nearest vertex; ties go to the lowest index."""
    if len(tree) == 0:
        raise ValueError("nearest() on an empty tree")
    d2 = np.sum((tree.nodes - np.asarray(q, dtype=np.float64)) ** 2, axis=1)
    return int(np.argmin(d2))


def connect(world: World, q_a, q_b, delta: float = DEFAULT_DELTA) -> bool:
    """Whole-segment validity between two states (no bounded extension)."""
    return is_edge_valid(world, q_a, q_b, delta)


def path_length(path) -> float:
    path = np.asarray(path, dtype=np.float64)
    if len(path) < 2:
        raise ValueError("a path needs at least two waypoints")
    return float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))


def termination_met(candidate, reference, epsilon: float) -> bool:
    """True iff length(candidate) <= (1 + epsilon) * length(reference)."""
    if epsilon < 0:
        raise DomainError(f"epsilon must be non-negative, got {epsilon}")
    cand = candidate if np.isscalar(candidate) else path_length(candidate)
    ref = reference if np.isscalar(reference) else path_length(reference)
    return cand <= (1.0 + epsilon) * ref


def simplify(world: World, path, delta: float = DEFAULT_DELTA, rng: np.random.Generator | None = None,
             passes: int | None = None) -> np.ndarray:
    """Random shortcutting: replace the subpath between waypoints i < j by
    the direct edge whenever that edge is valid."""
    path = np.asarray(path, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(0)
    if passes is None:
        passes = 2 * len(path)
    for _ in range(passes):
        n = len(path)
        if n <= 2:
            break
        i = int(rng.integers(0, n - 2))
        j = int(rng.integers(i + 2, n))
        if connect(world, path[i], path[j], delta):
            path = np.concatenate([path[: i + 1], path[j:]])
    return path


def vqmpt_plan(problem: ProblemInstance, sampler: SamplerHandle, K: int = 500, b: float = 0.9,
               delta: float = DEFAULT_DELTA, rng: np.random.Generator | None = None,
               sampler_rng: np.random.Generator | None = None, simplify_path: bool = True,
               time_limit: float | None = None) -> PlannerResult:
    """Modified RRT over an injected sampler.

    Each of the ``K`` iterations draws one sample, connects it to its nearest
    vertex if the full edge is valid, and with probability ``1 - b`` tries to
    connect the vertex nearest the goal straight to the goal. Samples outside
    the workspace are discarded but still counted.
    """
    t0 = time.perf_counter()
    world = problem.world
    qs = np.asarray(problem.start, dtype=np.float64)
    qg = np.asarray(problem.goal, dtype=np.float64)
    if not is_state_valid(world, qs):
        raise PreconditionError(f"start state {qs.tolist()} is not valid")
    if rng is None:
        rng = np.random.default_rng(0)
    if sampler_rng is None:
        sampler_rng = rng
    tree = Tree(qs)
    drawn = 0
    goal_index = None
    for _ in range(K):
        if time_limit is not None and time.perf_counter() - t0 > time_limit:
            break
        q_rand = np.asarray(sampler.draw(sampler_rng), dtype=np.float64)
        drawn += 1
        in_bounds = bool(np.all((q_rand >= 0) & (q_rand <= world.side)))
        if in_bounds:
            near = nearest(tree, q_rand)
            if connect(world, tree.nodes[near], q_rand, delta):
                idx = tree.add(q_rand, near)
                if np.linalg.norm(q_rand - qg) <= problem.goal_radius:
                    goal_index = idx
        if goal_index is None and rng.random() > b:
            near_goal = nearest(tree, qg)
            if connect(world, tree.nodes[near_goal], qg, delta):
                goal_index = tree.add(qg, near_goal)
        if goal_index is not None:
            break
    if goal_index is None:
        return PlannerResult(False, None, len(tree), drawn, time.perf_counter() - t0, tree)
    path = tree.path_to(goal_index)
    if not np.array_equal(path[-1], qg) and connect(world, path[-1], qg, delta):
        path = np.vstack([path, qg])
        tree.add(qg, goal_index)
    if simplify_path:
        path = simplify(world, path, delta, rng)
    return PlannerResult(True, path, len(tree), drawn, time.perf_counter() - t0, tree)


def rrt_plan(problem: ProblemInstance, K: int = 500, b: float = 0.9, delta: float = DEFAULT_DELTA,
             rng: np.random.Generator | None = None, **kwargs) -> PlannerResult:
    """Baseline: the same planner fed uniform samples."""
    return vqmpt_plan(problem, uniform_sampler(problem.world), K, b, delta, rng, **kwargs)


def rrt_star_plan(problem: ProblemInstance, eta: float | None = None, max_time: float = 5.0,
                  delta: float = DEFAULT_DELTA, rng: np.random.Generator | None = None,
                  max_iterations: int = 20_000, goal_bias: float = 0.05,
                  reference_length: float | None = None, epsilon: float = 0.1) -> PlannerResult:
    """Anytime RRT* with rewiring.

    Stops at ``max_time`` seconds or ``max_iterations``, whichever comes
    first, or as soon as the best path is within ``(1 + epsilon)`` of
    ``reference_length`` when one is given. Returns the best path found.
    """
    t0 = time.perf_counter()
    world = problem.world
    side = world.side
    eta = 0.1 * side if eta is None else eta
    gamma = 2.0 * side
    qs = np.asarray(problem.start, dtype=np.float64)
    qg = np.asarray(problem.goal, dtype=np.float64)
    if not is_state_valid(world, qs):
        raise PreconditionError(f"start state {qs.tolist()} is not valid")
    if rng is None:
        rng = np.random.default_rng(0)
    tree = Tree(qs, capacity=1024)
    children: list[set] = [set()]
    goal_nodes: list[int] = []
    drawn = 0
    best = math.inf
    best_index = None

    def propagate(index: int, delta_cost: float) -> None:
        stack = list(children[index])
        while stack:
            c = stack.pop()
            tree.cost[c] += delta_cost
            stack.extend(children[c])

    def goal_cost() -> tuple[float, int | None]:
        if not goal_nodes:
            return math.inf, None
        costs = [tree.cost[i] for i in goal_nodes]
        k = int(np.argmin(costs))
        return costs[k], goal_nodes[k]

    iteration = 0
    while iteration < max_iterations and time.perf_counter() - t0 < max_time:
        iteration += 1
        q_rand = qg.copy() if rng.random() < goal_bias else sample_uniform(world, rng)
        drawn += 1
        nodes = tree.nodes
        d2 = np.sum((nodes - q_rand) ** 2, axis=1)
        i_near = int(np.argmin(d2))
        dist = math.sqrt(d2[i_near])
        if dist == 0.0:
            continue
        q_new = q_rand if dist <= eta else nodes[i_near] + (q_rand - nodes[i_near]) * (eta / dist)
        if not is_edge_valid(world, nodes[i_near], q_new, delta):
            continue
        n = len(tree)
        radius = gamma * math.sqrt(math.log(n + 1) / (n + 1))
        dn = np.sqrt(np.sum((nodes - q_new) ** 2, axis=1))
        near = np.flatnonzero(dn <= radius)
        costs = np.asarray(tree.cost)
        parent, parent_cost = i_near, costs[i_near] + dn[i_near]
        for j in near[np.argsort(costs[near] + dn[near], kind="stable")]:
            c = costs[j] + dn[j]
            if c >= parent_cost:
                break
            if is_edge_valid(world, nodes[j], q_new, delta):
                parent, parent_cost = int(j), c
                break
        new = tree.add(q_new, parent, parent_cost)
        children.append(set())
        children[parent].add(new)
        nodes = tree.nodes
        for j in near:
            j = int(j)
            if j == parent:
                continue
            c = parent_cost + dn[j]
            if c + 1e-12 < tree.cost[j] and is_edge_valid(world, q_new, nodes[j], delta):
                old = tree.parent[j]
                children[old].discard(j)
                children[new].add(j)
                tree.parent[j] = new
                diff = c - tree.cost[j]
                tree.cost[j] = c
                propagate(j, diff)
        if np.linalg.norm(q_new - qg) <= problem.goal_radius:
            goal_nodes.append(new)
        best, best_index = goal_cost()
        if (reference_length is not None and best_index is not None
                and termination_met(best, reference_length, epsilon)):
            break
    if best_index is None:
        return PlannerResult(False, None, len(tree), drawn, time.perf_counter() - t0, tree)
    path = tree.path_to(best_index)
    return PlannerResult(True, path, len(tree), drawn, time.perf_counter() - t0, tree)


def write_path_csv(path, waypoints) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y"])
        for x, y in np.asarray(waypoints, dtype=np.float64):
            writer.writerow([f"{x:.9g}", f"{y:.9g}"])


def read_path_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["x"]), float(r["y"])] for r in rows])
