"""Dataset generation, training orchestration and the binary container format.

Container layout (all integers little-endian)::

    magic        8 bytes    b"VQMPTCK1" (checkpoints) or b"VQMPTDS1" (datasets)
    version      u32
    json_len     u32, then json_len bytes of UTF-8 JSON (config / metadata)
    n_arrays     u32
    shape table  per array: u16 name_len, name, 2-byte dtype code, u8 ndim, ndim * u64 dims
    payload      raw little-endian array bytes, in table order

Dtype codes: f4, f8, i4, i8, u1.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ar_stage2 import PlanningQuery, VQStage2, dedup_indices
from .env2d import (
    DEFAULT_RESOLUTION,
    World,
    edge_points,
    generate_world,
    is_state_valid,
    make_rng,
    random_problem,
    render_costmap,
)
from .exceptions import (
    CheckpointError,
    ConfigurationError,
    FormatError,
    GenerationError,
    ShapeMismatchError,
    TruncationError,
    VersionError,
)
from .planners import rrt_star_plan, simplify
from .vq_stage1 import VQStage1

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VQMPTCK1"
DATASET_MAGIC = b"VQMPTDS1"
FORMAT_VERSION = 1

STAGE1_SPACING = 0.05
STAGE1_JITTER = 0.02
DEMO_SPACING = 0.05
# iteration-bound so datasets stay a pure function of the seed; the time cap
# is only a safety net
DEMO_ITERATIONS = 1500
DEMO_MAX_TIME = 60.0

_DTYPES = {"f4": "<f4", "f8": "<f8", "i4": "<i4", "i8": "<i8", "u1": "u1"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


# -- container ---------------------------------------------------------------

def write_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    body = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [magic, struct.pack("<II", FORMAT_VERSION, len(body)), body, struct.pack("<I", len(arrays))]
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype)
        if code is None:
            raise ConfigurationError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + code.encode("ascii") + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(out + payload))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(f"file ends inside {what} (need {n} bytes at offset {self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a container, validating magic, version and the shape table."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    r = _Reader(data)
    found = r.take(len(magic), "magic")
    if found != magic:
        raise FormatError(f"bad magic {found!r}, expected {magic!r}")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}")
    (json_len,) = r.unpack("<I", "header length")
    try:
        meta = json.loads(r.take(json_len, "JSON header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt JSON header: {exc}") from exc
    if not isinstance(meta, dict):
        raise FormatError("JSON header must be an object")
    (count,) = r.unpack("<I", "array count")
    table = []
    for _ in range(count):
        (name_len,) = r.unpack("<H", "shape table")
        try:
            name = r.take(name_len, "shape table").decode("utf-8")
            code = r.take(2, "shape table").decode("ascii")
        except UnicodeDecodeError as exc:
            raise FormatError(f"corrupt shape table: {exc}") from exc
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code!r} for array {name!r}")
        (ndim,) = r.unpack("<B", "shape table")
        shape = r.unpack(f"<{ndim}Q", "shape table")
        table.append((name, np.dtype(_DTYPES[code]), shape))
    need = sum(math.prod(shape) * dt.itemsize for _, dt, shape in table)
    have = len(data) - r.pos
    if have < need:
        raise TruncationError(f"payload holds {have} bytes, shape table declares {need}")
    if have > need:
        raise ShapeMismatchError(f"payload holds {have} bytes, shape table declares only {need}")
    arrays = {}
    for name, dt, shape in table:
        n = math.prod(shape) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(n, name), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return meta, arrays


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    write_container(path, CHECKPOINT_MAGIC, checkpoint.config, checkpoint.arrays)


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = read_container(path, CHECKPOINT_MAGIC)
    return Checkpoint(meta, arrays)


# -- model <-> checkpoint ------------------------------------------------------

def _hyperparams(model) -> dict:
    return {k: v for k, v in model.get_params(deep=False).items() if k != "stage1"}


def _load_params(params: dict, arrays: dict, prefix: str = "") -> None:
    for name, t in params.items():
        key = prefix + name
        if key not in arrays:
            raise ShapeMismatchError(f"checkpoint lacks parameter {key!r}")
        if arrays[key].shape != t.shape:
            raise ShapeMismatchError(f"{key}: checkpoint shape {arrays[key].shape}, model expects {t.shape}")
        t.data = arrays[key].astype(t.dtype)


def stage1_checkpoint(model: VQStage1) -> Checkpoint:
    config = {"kind": "stage1", "hyperparams": _hyperparams(model),
              "history": getattr(model, "history_", [])}
    return Checkpoint(config, {k: t.data for k, t in model.params_.items()})


def stage1_from_checkpoint(ckpt: Checkpoint, prefix: str = "", config: dict | None = None) -> VQStage1:
    config = ckpt.config if config is None else config
    if config.get("kind") not in ("stage1", "stage2"):
        raise FormatError(f"checkpoint kind {config.get('kind')!r} holds no stage 1 model")
    hp = config["hyperparams"] if config.get("kind") == "stage1" else config["stage1"]
    try:
        model = VQStage1(**hp)
    except TypeError as exc:
        raise FormatError(f"unknown stage 1 hyperparameters: {exc}") from exc
    model.params_ = model._init_params(make_rng(0))
    _load_params(model.params_, ckpt.arrays, prefix)
    model.history_ = config.get("history", []) if config.get("kind") == "stage1" else []
    return model


def stage2_checkpoint(model: VQStage2) -> Checkpoint:
    config = {"kind": "stage2", "hyperparams": _hyperparams(model), "stage1": _hyperparams(model.stage1),
              "history": getattr(model, "history_", [])}
    arrays = {f"stage1/{k}": t.data for k, t in model.stage1.params_.items()}
    arrays.update({k: t.data for k, t in model.params_.items()})
    return Checkpoint(config, arrays)


def stage2_from_checkpoint(ckpt: Checkpoint) -> VQStage2:
    if ckpt.config.get("kind") != "stage2":
        raise FormatError(f"expected a stage 2 checkpoint, got kind {ckpt.config.get('kind')!r}")
    stage1 = stage1_from_checkpoint(ckpt, "stage1/")
    try:
        model = VQStage2(stage1=stage1, **ckpt.config["hyperparams"])
    except TypeError as exc:
        raise FormatError(f"unknown stage 2 hyperparameters: {exc}") from exc
    model.params_ = model.init_params()
    _load_params(model.params_, ckpt.arrays)
    model.history_ = ckpt.config.get("history", [])
    return model


def load_model(path):
    """Stage 1 or stage 2 model from a checkpoint file."""
    ckpt = load_checkpoint(path)
    kind = ckpt.config.get("kind")
    try:
        if kind == "stage1":
            return stage1_from_checkpoint(ckpt)
        if kind == "stage2":
            return stage2_from_checkpoint(ckpt)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"checkpoint config is malformed: {exc!r}") from exc
    raise FormatError(f"unknown checkpoint kind {kind!r}")


# -- stage 1 data ------------------------------------------------------------

def interpolate(a, b, spacing: float) -> np.ndarray:
    """Waypoints from a to b at spacing <= ``spacing``, endpoints included."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    n = max(int(math.ceil(float(np.linalg.norm(b - a)) / spacing)), 1) + 1
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1.0 - t) * a + t * b


def gen_stage1_dataset(count: int, seed: int, side: float = 1.0, spacing: float = STAGE1_SPACING,
                       jitter: float = STAGE1_JITTER) -> list[np.ndarray]:
    """Jittered straight-line trajectories between random points of the empty workspace."""
    if count < 1:
        raise ConfigurationError("count must be at least 1")
    rng = make_rng(seed)
    world = World(side)
    out = []
    for _ in range(count):
        qs, qg = rng.uniform(0.0, side, size=(2, 2))
        traj = interpolate(qs, qg, spacing * side)
        if jitter > 0:
            traj = np.clip(traj + rng.normal(0.0, jitter * side, size=traj.shape), 0.0, side)
        assert is_state_valid(world, traj[0])
        out.append(traj)
    return out


def coverage_fraction(trajs, side: float = 1.0, grid: int = 16) -> float:
    """Fraction of a grid x grid partition of the workspace holding a waypoint."""
    pts = np.concatenate([np.asarray(t) for t in trajs])
    cells = np.minimum((pts / side * grid).astype(int), grid - 1)
    return len({(int(i), int(j)) for i, j in cells}) / grid ** 2


# -- stage 2 data ------------------------------------------------------------

@dataclass(eq=False)
class Stage2Record:
    world_seed: int
    world: World
    cells: np.ndarray
    start: np.ndarray
    goal: np.ndarray
    demo: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def query(self) -> PlanningQuery:
        return PlanningQuery(self.cells, self.start, self.goal, self.world.side)


def gen_stage2_dataset(env_count: int, trajs_per_env: int, seed: int, rrt_star_iterations: int = DEMO_ITERATIONS,
                       rrt_star_time: float = DEMO_MAX_TIME, resolution: int = DEFAULT_RESOLUTION,
                       progress=None) -> list[Stage2Record]:
    """Random worlds with RRT* demonstrations, simplified by shortcutting.

    Each environment gets up to ``5 * trajs_per_env`` planning attempts; an
    environment with no success is logged and skipped.
    """
    if env_count < 1 or trajs_per_env < 1:
        raise ConfigurationError("env_count and trajs_per_env must be at least 1")
    world_seeds = make_rng(seed).integers(0, 2**31 - 1, size=env_count)
    records: list[Stage2Record] = []
    for e, ws in enumerate(world_seeds.tolist()):
        try:
            world = generate_world(ws)
        except GenerationError:
            logger.warning("environment %d (seed %d): world generation failed, skipped", e, ws)
            continue
        cells = render_costmap(world, resolution).cells
        rng = make_rng([seed, e])
        got = 0
        for _ in range(5 * trajs_per_env):
            if got == trajs_per_env:
                break
            try:
                problem = random_problem(world, rng)
            except GenerationError:
                break
            res = rrt_star_plan(problem, max_time=rrt_star_time, max_iterations=rrt_star_iterations, rng=rng)
            if not res.success:
                logger.info("environment %d: demo planning failed, skipped", e)
                continue
            demo = simplify(world, res.path, rng=rng)
            records.append(Stage2Record(ws, world, cells, problem.start, problem.goal, demo))
            got += 1
        if got == 0:
            logger.warning("environment %d (seed %d): no successful demo, skipped", e, ws)
        if progress is not None:
            progress(e + 1, env_count)
    return records


def resample_path(path, spacing: float) -> np.ndarray:
    """Waypoints along a polyline at spacing <= ``spacing`` (vertices kept)."""
    path = np.asarray(path, dtype=np.float64)
    if len(path) == 1:
        return path.copy()
    segs = [edge_points(a, b, spacing)[:-1] for a, b in zip(path[:-1], path[1:])]
    return np.concatenate(segs + [path[-1:]])


def label_records(records: list[Stage2Record], stage1: VQStage1, n_h_max: int = 12,
                  spacing: float = DEMO_SPACING) -> None:
    """Attach ground-truth index sequences computed with a frozen stage 1."""
    for rec in records:
        dense = resample_path(rec.demo, spacing * rec.world.side)
        rec.indices = dedup_indices(stage1.transduce(dense).indices, stage1.n_codes, n_h_max)


def _concat(parts, dtype, width=None):
    if parts:
        return np.concatenate([np.asarray(p, dtype=dtype).reshape(-1, *([width] if width else [])) for p in parts])
    return np.zeros((0, width) if width else (0,), dtype=dtype)


def save_stage1_dataset(path, trajs: list[np.ndarray], meta: dict | None = None) -> None:
    info = {"kind": "stage1", **(meta or {})}
    arrays = {"lengths": np.array([len(t) for t in trajs], dtype=np.int64),
              "points": _concat(trajs, np.float64, 2)}
    write_container(path, DATASET_MAGIC, info, arrays)


def save_stage2_dataset(path, records: list[Stage2Record], meta: dict | None = None) -> None:
    info = {"kind": "stage2", "side": records[0].world.side if records else 1.0, **(meta or {})}
    arrays = {
        "world_seeds": np.array([r.world_seed for r in records], dtype=np.int64),
        "rect_counts": np.array([len(r.world.rects) for r in records], dtype=np.int64),
        "rects": _concat([r.world.rects for r in records], np.float64, 4),
        "circle_counts": np.array([len(r.world.circles) for r in records], dtype=np.int64),
        "circles": _concat([r.world.circles for r in records], np.float64, 3),
        "cells": (np.stack([r.cells for r in records]).astype(np.uint8) if records
                  else np.zeros((0, 0, 0), dtype=np.uint8)),
        "starts": _concat([r.start for r in records], np.float64, 2),
        "goals": _concat([r.goal for r in records], np.float64, 2),
        "demo_lengths": np.array([len(r.demo) for r in records], dtype=np.int64),
        "demos": _concat([r.demo for r in records], np.float64, 2),
        "index_lengths": np.array([len(r.indices) for r in records], dtype=np.int64),
        "indices": _concat([r.indices for r in records], np.int64),
    }
    write_container(path, DATASET_MAGIC, info, arrays)


def _split(flat: np.ndarray, lengths: np.ndarray) -> list[np.ndarray]:
    if lengths.sum() != len(flat) or np.any(lengths < 0):
        raise ShapeMismatchError("record lengths disagree with the stored arrays")
    return np.split(flat, np.cumsum(lengths)[:-1]) if len(lengths) else []


def _require(arrays: dict, names) -> None:
    missing = [n for n in names if n not in arrays]
    if missing:
        raise ShapeMismatchError(f"dataset lacks arrays {missing}")


def load_dataset(path):
    """(kind, payload): a list of trajectories for stage 1, records for stage 2."""
    meta, arrays = read_container(path, DATASET_MAGIC)
    try:
        return _decode_dataset(meta, arrays)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"dataset content is malformed: {exc!r}") from exc


def _decode_dataset(meta: dict, arrays: dict):
    kind = meta.get("kind")
    if kind == "stage1":
        _require(arrays, ("lengths", "points"))
        return "stage1", _split(arrays["points"], arrays["lengths"])
    if kind == "stage2":
        names = ("world_seeds", "rect_counts", "rects", "circle_counts", "circles", "cells", "starts", "goals",
                 "demo_lengths", "demos", "index_lengths", "indices")
        _require(arrays, names)
        n = len(arrays["world_seeds"])
        if any(len(arrays[k]) != n for k in ("rect_counts", "circle_counts", "cells", "starts", "goals",
                                              "demo_lengths", "index_lengths")):
            raise ShapeMismatchError("per-record arrays have inconsistent lengths")
        rects = _split(arrays["rects"], arrays["rect_counts"])
        circles = _split(arrays["circles"], arrays["circle_counts"])
        demos = _split(arrays["demos"], arrays["demo_lengths"])
        indices = _split(arrays["indices"], arrays["index_lengths"])
        side = float(meta.get("side", 1.0))
        records = [Stage2Record(int(arrays["world_seeds"][i]), World(side, rects[i], circles[i],
                                                                     seed=int(arrays["world_seeds"][i])),
                                arrays["cells"][i], arrays["starts"][i], arrays["goals"][i], demos[i], indices[i])
                   for i in range(n)]
        return "stage2", records
    raise FormatError(f"unknown dataset kind {kind!r}")


# -- symmetry augmentation -------------------------------------------------------

# (swap x/y, flip x, flip y), applied in that order; the 8 symmetries of the square.
DIHEDRAL = tuple((t, fx, fy) for t in (False, True) for fx in (False, True) for fy in (False, True))


def _map_points(pts: np.ndarray, side: float, swap: bool, flip_x: bool, flip_y: bool) -> np.ndarray:
    pts = np.array(pts, dtype=np.float64)
    if swap:
        pts = pts[..., ::-1].copy()
    if flip_x:
        pts[..., 0] = side - pts[..., 0]
    if flip_y:
        pts[..., 1] = side - pts[..., 1]
    return pts


def transform_world(world: World, swap: bool, flip_x: bool, flip_y: bool) -> World:
    S = world.side
    rects = world.rects.copy()
    if swap:
        rects = rects[:, [1, 0, 3, 2]]
    if flip_x:
        rects[:, 0] = S - rects[:, 0] - rects[:, 2]
    if flip_y:
        rects[:, 1] = S - rects[:, 1] - rects[:, 3]
    circles = world.circles.copy()
    circles[:, :2] = _map_points(circles[:, :2], S, swap, flip_x, flip_y)
    return World(S, rects, circles, world.seed)


def transform_record(rec: Stage2Record, swap: bool, flip_x: bool, flip_y: bool) -> Stage2Record:
    """The same record seen through one symmetry of the square; labels are cleared.

    Cell (row, col) is sampled at the centre (col, row), so the grid maps exactly.
    """
    cells = rec.cells.T if swap else rec.cells
    if flip_x:
        cells = cells[:, ::-1]
    if flip_y:
        cells = cells[::-1, :]
    S = rec.world.side
    return Stage2Record(rec.world_seed, transform_world(rec.world, swap, flip_x, flip_y),
                        np.ascontiguousarray(cells),
                        _map_points(rec.start, S, swap, flip_x, flip_y),
                        _map_points(rec.goal, S, swap, flip_x, flip_y),
                        _map_points(rec.demo, S, swap, flip_x, flip_y))


def augment_records(records: list[Stage2Record]) -> list[Stage2Record]:
    """All 8 symmetric copies of every record, the identity first."""
    return [transform_record(r, *t) for r in records for t in DIHEDRAL]


# -- training orchestration -----------------------------------------------------

def train_stage1(trajs, callback=None, **hyperparams) -> VQStage1:
    return VQStage1(**hyperparams).fit(trajs, callback=callback)


def train_stage2(records: list[Stage2Record], stage1: VQStage1, callback=None, augment: bool = False,
                 **hyperparams) -> VQStage2:
    """Label demos with the frozen stage 1, then fit stage 2.

    With ``augment`` the held-out split is drawn first and only the training
    part is expanded by the symmetries of the square, so no transformed copy
    of a held-out record is trained on.
    """
    model = VQStage2(stage1=stage1, **hyperparams)
    if not augment:
        label_records(records, stage1, model.n_h_max)
        return model.fit([r.query() for r in records], [r.indices for r in records], callback=callback)
    order = make_rng([model.random_state or 0, 17]).permutation(len(records))
    n_val = int(round(model.holdout_fraction * len(records))) if len(records) > 1 else 0
    val = [records[i] for i in order[:n_val]]
    train = augment_records([records[i] for i in order[n_val:]])
    label_records(val, stage1, model.n_h_max)
    label_records(train, stage1, model.n_h_max)
    X_val = [r.query() for r in val] or None
    y_val = [r.indices for r in val] or None
    return model.fit([r.query() for r in train], [r.indices for r in train], X_val, y_val, callback=callback)
