"""Independent geometric oracles shared by the test modules.

These deliberately avoid the package's own collision code: segment tests go
through shapely's exact predicates.
"""

import numpy as np
import shapely
from shapely.geometry import LineString, Point, box


def shapes(world):
    rects = [box(x, y, x + w, y + h) for x, y, w, h in world.rects]
    circles = [(Point(cx, cy), r) for cx, cy, r in world.circles]
    return rects, circles


def point_in_obstacle(world, q):
    x, y = q
    for rx, ry, w, h in world.rects:
        if rx <= x <= rx + w and ry <= y <= ry + h:
            return True
    for cx, cy, r in world.circles:
        if (x - cx) ** 2 + (y - cy) ** 2 <= r * r:
            return True
    return False


def segment_valid(world, a, b):
    """Exact: closed segment stays in the workspace and touches no closed obstacle."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    for q in (a, b):
        if not (0 <= q[0] <= world.side and 0 <= q[1] <= world.side):
            return False
    geom = Point(*a) if np.array_equal(a, b) else LineString([a, b])
    rects, circles = shapes(world)
    if any(shapely.intersects(geom, r) for r in rects):
        return False
    return not any(geom.distance(c) <= r for c, r in circles)


def path_valid(world, path):
    path = np.asarray(path, float)
    return all(segment_valid(world, path[i], path[i + 1]) for i in range(len(path) - 1))


def distance_to_boundary(world, q):
    p = Point(*q)
    d = [r.exterior.distance(p) for r in shapes(world)[0]]
    d += [abs(np.hypot(q[0] - cx, q[1] - cy) - r) for cx, cy, r in world.circles]
    return min(d) if d else np.inf
