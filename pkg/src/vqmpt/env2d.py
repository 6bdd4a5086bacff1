"""2D point-robot worlds: obstacles, costmaps, validity checks and samplers.

The workspace is the closed square ``[0, S]^2``. Obstacles are closed
axis-aligned rectangles ``(x, y, w, h)`` and closed discs ``(cx, cy, r)``;
a state on an obstacle boundary counts as colliding.

All randomness goes through ``numpy.random.Generator`` backed by PCG64, so a
seed fully determines every generated world and problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import GenerationError, InfeasibleProblemError

DEFAULT_SIDE = 1.0
DEFAULT_RESOLUTION = 64
DEFAULT_DELTA = 0.01
DEFAULT_OBSTACLE_COUNT = (5, 9)
DEFAULT_SIZE_RANGE = (0.05, 0.25)
MIN_FREE_FRACTION = 0.3
MIN_SEPARATION = 0.4
_FREE_GRID = 200


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator; the one RNG algorithm used for all datasets."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True, eq=False)
class World:
    side: float
    rects: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    circles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "rects", np.asarray(self.rects, dtype=np.float64).reshape(-1, 4))
        object.__setattr__(self, "circles", np.asarray(self.circles, dtype=np.float64).reshape(-1, 3))
        self.rects.setflags(write=False)
        self.circles.setflags(write=False)
        object.__setattr__(self, "_rect_list", [(x, y, x + w, y + h) for x, y, w, h in self.rects.tolist()])
        object.__setattr__(self, "_circle_list", [tuple(c) for c in self.circles.tolist()])

    @property
    def obstacle_count(self) -> int:
        return len(self.rects) + len(self.circles)

    def __eq__(self, other):
        return (isinstance(other, World) and self.side == other.side
                and np.array_equal(self.rects, other.rects)
                and np.array_equal(self.circles, other.circles))

    def free_fraction(self, grid: int = _FREE_GRID) -> float:
        centers = (np.arange(grid) + 0.5) * (self.side / grid)
        xs, ys = np.meshgrid(centers, centers)
        pts = np.column_stack([xs.ravel(), ys.ravel()])
        return float(np.mean(~in_obstacles(self, pts)))


@dataclass(frozen=True, eq=False)
class Costmap:
    """Occupancy grid; ``cells[row, col]`` covers y-row ``row`` and x-column ``col``."""

    cells: np.ndarray
    side: float

    @property
    def resolution(self) -> int:
        return self.cells.shape[0]

    @property
    def cell_size(self) -> float:
        return self.side / self.resolution

    def to_pgm(self) -> bytes:
        """Binary PGM (P5, maxval 255): occupied 0, free 255, top row = largest y."""
        img = np.where(self.cells[::-1] > 0, 0, 255).astype(np.uint8)
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
        return header + img.tobytes()

    def write_pgm(self, path) -> None:
        Path(path).write_bytes(self.to_pgm())


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    world: World
    start: np.ndarray
    goal: np.ndarray
    goal_radius: float


def in_obstacles(world: World, points) -> np.ndarray:
    """Boolean mask: which of ``points`` (..., 2) lie in some closed obstacle."""
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[..., 0:1], pts[..., 1:2]
    hit = np.zeros(pts.shape[:-1], dtype=bool)
    if len(world.rects):
        r = world.rects
        inside = ((x >= r[:, 0]) & (x <= r[:, 0] + r[:, 2])
                  & (y >= r[:, 1]) & (y <= r[:, 1] + r[:, 3]))
        hit |= inside.any(axis=-1)
    if len(world.circles):
        c = world.circles
        inside = (x - c[:, 0]) ** 2 + (y - c[:, 1]) ** 2 <= c[:, 2] ** 2
        hit |= inside.any(axis=-1)
    return hit


def states_valid(world: World, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    in_bounds = np.all((pts >= 0.0) & (pts <= world.side), axis=-1) & np.all(np.isfinite(pts), axis=-1)
    return in_bounds & ~in_obstacles(world, pts)


def is_state_valid(world: World, q) -> bool:
    return bool(states_valid(world, np.asarray(q, dtype=np.float64)[None])[0])


def segment_hits_obstacle(world: World, a, b) -> bool:
    """Exact test: does the closed segment a-b touch any obstacle?

    Scalar loops: obstacle counts are small enough that per-call numpy
    overhead would dominate.
    """
    ax, ay = float(a[0]), float(a[1])
    dx, dy = float(b[0]) - ax, float(b[1]) - ay
    dd = dx * dx + dy * dy
    for cx, cy, r in world._circle_list:
        t = 0.0 if dd == 0.0 else min(max(((cx - ax) * dx + (cy - ay) * dy) / dd, 0.0), 1.0)
        ex, ey = ax + t * dx - cx, ay + t * dy - cy
        if ex * ex + ey * ey <= r * r:
            return True
    for x0, y0, x1, y1 in world._rect_list:
        lo, hi = 0.0, 1.0
        if dx == 0.0:
            if ax < x0 or ax > x1:
                continue
        else:
            t1, t2 = (x0 - ax) / dx, (x1 - ax) / dx
            if t1 > t2:
                t1, t2 = t2, t1
            lo, hi = max(lo, t1), min(hi, t2)
        if dy == 0.0:
            if ay < y0 or ay > y1:
                continue
        else:
            t1, t2 = (y0 - ay) / dy, (y1 - ay) / dy
            if t1 > t2:
                t1, t2 = t2, t1
            lo, hi = max(lo, t1), min(hi, t2)
        if lo <= hi:
            return True
    return False


def edge_points(a, b, delta: float) -> np.ndarray:
    """States along a-b at spacing <= delta, both endpoints included."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = max(int(math.ceil(float(np.linalg.norm(b - a)) / delta)), 1) + 1
    alpha = np.linspace(0.0, 1.0, n)[:, None]
    return (1.0 - alpha) * a + alpha * b


def is_edge_valid(world: World, a, b, delta: float = DEFAULT_DELTA, exact: bool = True) -> bool:
    """Interpolated states at spacing <= delta must all be valid.

    With ``exact`` the segment is additionally tested analytically against
    every obstacle, so thin obstacle slivers between two samples cannot be
    skipped. The result is then independent of ``delta``.
    """
    if delta <= 0:
        raise ValueError("edge resolution delta must be positive")
    if exact:
        # every interpolated state lies on the segment, so the analytic test
        # subsumes them; only the (convex) workspace bound needs the endpoints
        s = world.side
        if not (0.0 <= a[0] <= s and 0.0 <= a[1] <= s and 0.0 <= b[0] <= s and 0.0 <= b[1] <= s):
            return False
        return not segment_hits_obstacle(world, a, b)
    return bool(np.all(states_valid(world, edge_points(a, b, delta))))


def sample_uniform(world: World, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, world.side, size=2)


def _draw_obstacles(rng, count_range, side, size_range):
    lo, hi = count_range
    count = int(rng.integers(lo, hi + 1))
    smin, smax = size_range[0] * side, size_range[1] * side
    rects, circles = [], []
    for _ in range(count):
        cx, cy = rng.uniform(0.0, side, size=2)
        if rng.random() < 0.5:
            w, h = rng.uniform(smin, smax, size=2)
            rects.append((cx - w / 2, cy - h / 2, w, h))
        else:
            circles.append((cx, cy, rng.uniform(smin, smax) / 2))
    return rects, circles


def generate_world(seed: int, obstacle_count_range=DEFAULT_OBSTACLE_COUNT, side: float = DEFAULT_SIDE,
                   size_range=DEFAULT_SIZE_RANGE, max_attempts: int = 100) -> World:
    """Random obstacle field, redrawn until at least 30% of the area is free."""
    if side <= 0:
        raise ValueError("workspace side must be positive")
    rng = make_rng(seed)
    for _ in range(max_attempts):
        rects, circles = _draw_obstacles(rng, obstacle_count_range, side, size_range)
        world = World(side, np.array(rects), np.array(circles), seed=seed)
        if world.free_fraction() >= MIN_FREE_FRACTION:
            return world
    raise GenerationError(f"no world with free fraction >= {MIN_FREE_FRACTION} after {max_attempts} attempts")


def render_costmap(world: World, resolution: int = DEFAULT_RESOLUTION) -> Costmap:
    """Cell is occupied iff its center lies inside some obstacle."""
    if resolution < 8:
        raise ValueError("costmap resolution must be at least 8")
    cs = world.side / resolution
    centers = (np.arange(resolution) + 0.5) * cs
    xs, ys = np.meshgrid(centers, centers)
    occ = in_obstacles(world, np.stack([xs, ys], axis=-1))
    return Costmap(occ.astype(np.uint8), world.side)


def random_problem(world: World, rng: np.random.Generator, goal_radius: float | None = None,
                   min_separation: float = MIN_SEPARATION, max_rejections: int = 1000) -> ProblemInstance:
    """Rejection-sample a valid start/goal pair at least ``min_separation * S`` apart."""
    if goal_radius is None:
        goal_radius = 0.02 * world.side
    for _ in range(max_rejections):
        qs = sample_uniform(world, rng)
        qg = sample_uniform(world, rng)
        if (np.linalg.norm(qg - qs) >= min_separation * world.side
                and is_state_valid(world, qs) and is_state_valid(world, qg)):
            return ProblemInstance(world, qs, qg, goal_radius)
    raise InfeasibleProblemError(f"no valid start/goal pair after {max_rejections} draws")


def straight_line_blocked(problem: ProblemInstance, delta: float = DEFAULT_DELTA) -> bool:
    return not is_edge_valid(problem.world, problem.start, problem.goal, delta)
