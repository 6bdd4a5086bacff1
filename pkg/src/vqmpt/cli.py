"""Command-line interface: data generation, training, planning and evaluation.

Exit codes: 0 success, 1 planning failure, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .ar_stage2 import PlanningQuery, VQStage2, build_gmm
from .env2d import (
    ProblemInstance,
    generate_world,
    is_state_valid,
    make_rng,
    random_problem,
    render_costmap,
    straight_line_blocked,
)
from .exceptions import CheckpointError, EmptyPredictionError, VQMPTError
from .pipeline import (
    gen_stage1_dataset,
    gen_stage2_dataset,
    load_dataset,
    load_model,
    save_checkpoint,
    save_stage1_dataset,
    save_stage2_dataset,
    stage1_checkpoint,
    stage2_checkpoint,
    train_stage2,
)
from .planners import SamplerHandle, rrt_star_plan, termination_met, uniform_sampler, vqmpt_plan, write_path_csv
from .vq_stage1 import VQStage1

logger = logging.getLogger("vqmpt")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
LOSS_LOG_HEADER = "# vqmpt loss log v1"
EVAL_HEADER = "# vqmpt eval rows v1"
EVAL_COLUMNS = ["problem_id", "planner", "success", "time", "vertices", "path_length", "samples"]
PLANNERS = ("vqmpt", "rrt", "rrt-star")


class UsageError(Exception):
    """Bad flag values; reported with exit code 2."""


def _point(text: str) -> np.ndarray:
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y but got {text!r}") from None
    return np.array([x, y])


def _load(path, expected=None):
    """Load a checkpoint; any problem with it is a configuration error."""
    try:
        model = load_model(path)
    except CheckpointError as exc:
        raise UsageError(f"cannot use model {path}: {exc}") from exc
    if expected is not None and not isinstance(model, expected):
        raise UsageError(f"model {path} is not a {expected.__name__} checkpoint")
    return model


# -- gen-data ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    if args.stage == 1:
        trajs = gen_stage1_dataset(args.count, args.seed)
        save_stage1_dataset(args.out, trajs, {"seed": args.seed})
        print(f"wrote {len(trajs)} trajectories to {args.out}")
    else:
        if args.trajs_per_env < 1:
            raise UsageError("--trajs-per-env must be at least 1")
        records = gen_stage2_dataset(args.count, args.trajs_per_env, args.seed,
                                     rrt_star_iterations=args.rrt_star_iterations)
        save_stage2_dataset(args.out, records, {"seed": args.seed})
        print(f"wrote {len(records)} demonstrations to {args.out}")
    return EXIT_OK


# -- train ------------------------------------------------------------------

def _write_loss_log(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"{LOSS_LOG_HEADER} vqmpt {__version__}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in rows:
            writer.writerow([r[c] if isinstance(r[c], int) else repr(float(r[c])) for c in columns])


def cmd_train(args) -> int:
    if args.epochs < 0:
        raise UsageError("--epochs must be non-negative")
    try:
        kind, data = load_dataset(args.data)
    except CheckpointError as exc:
        raise UsageError(f"cannot use dataset {args.data}: {exc}") from exc
    if kind != f"stage{args.stage}":
        raise UsageError(f"{args.data} is a {kind} dataset, expected stage{args.stage}")
    common = dict(epochs=args.epochs, random_state=args.seed, batch_size=args.batch_size,
                  warmup_steps=args.warmup_steps)
    log_path = args.log or f"{args.out}.csv"
    if args.stage == 1:
        model = VQStage1(d_model=args.d_model, n_codes=args.n_codes, n_heads=args.n_heads, n_layers=args.n_layers,
                         beta=args.beta, lam=args.lam, **common)
        model.fit(data)
        save_checkpoint(args.out, stage1_checkpoint(model))
        _write_loss_log(log_path, model.step_log_, ["epoch", "step", "loss", "lr", "code_usage"])
    else:
        if not args.stage1:
            raise UsageError("stage 2 training needs --stage1 CHECKPOINT")
        stage1 = _load(args.stage1, VQStage1)
        if stage1.d_model != args.d_model:
            raise UsageError(f"stage 1 checkpoint has d_model={stage1.d_model}, requested {args.d_model}")
        model = train_stage2(data, stage1, augment=args.augment, d_model=args.d_model, n_heads=args.n_heads,
                             n_ar_layers=args.n_layers, beam_width=args.beam, n_h_max=args.n_h_max, **common)
        save_checkpoint(args.out, stage2_checkpoint(model))
        _write_loss_log(log_path, model.step_log_, ["epoch", "step", "loss", "lr"])
    print(f"wrote {args.out} and {log_path}")
    return EXIT_OK


# -- planning -----------------------------------------------------------------

def _vqmpt_sampler(model: VQStage2, problem: ProblemInstance, beam: int | None) -> SamplerHandle:
    query = PlanningQuery(render_costmap(problem.world).cells, problem.start, problem.goal, problem.world.side)
    seq, _ = model.beam_search(query, width=beam)
    try:
        gmm = build_gmm(model.stage1, seq)
    except EmptyPredictionError:
        logger.warning("prediction holds only the goal class; falling back to uniform sampling")
        return uniform_sampler(problem.world)
    return SamplerHandle("gmm", gmm.sample)


def run_planner(name: str, problem: ProblemInstance, seed: int, model=None, K: int = 500, b: float = 0.9,
                beam: int | None = None, cutoff: float | None = None, reference_length: float | None = None,
                epsilon: float = 0.1, rrt_star_iterations: int = 20_000):
    """(result, wall time) for one planner. vqmpt time includes model inference."""
    rng = make_rng(seed)
    t0 = time.perf_counter()
    if name == "vqmpt":
        sampler = _vqmpt_sampler(model, problem, beam)
        remaining = None if cutoff is None else max(cutoff - (time.perf_counter() - t0), 0.0)
        res = vqmpt_plan(problem, sampler, K=K, b=b, rng=rng, time_limit=remaining)
    elif name == "rrt":
        res = vqmpt_plan(problem, uniform_sampler(problem.world), K=K, b=b, rng=rng, time_limit=cutoff)
    elif name == "rrt-star":
        res = rrt_star_plan(problem, max_time=cutoff if cutoff is not None else 5.0, rng=rng,
                            max_iterations=rrt_star_iterations, reference_length=reference_length, epsilon=epsilon)
    else:
        raise UsageError(f"unknown planner {name!r}")
    return res, time.perf_counter() - t0


def _result_record(name, problem, res, elapsed) -> dict:
    return {"planner": name, "success": bool(res.success), "time": elapsed, "vertices": int(res.vertices),
            "samples": int(res.samples_drawn), "path_length": res.path_length if res.success else None,
            "start": problem.start.tolist(), "goal": problem.goal.tolist(),
            "path": None if res.path is None else np.asarray(res.path).tolist()}


def cmd_plan(args) -> int:
    world = generate_world(args.world_seed)
    problem = ProblemInstance(world, args.start, args.goal, args.goal_radius * world.side)
    for label, q in (("start", args.start), ("goal", args.goal)):
        if not is_state_valid(world, q):
            raise UsageError(f"{label} {q.tolist()} is not a valid state in world {args.world_seed}")
    model = None
    if args.planner == "vqmpt":
        if not args.model:
            raise UsageError("the vqmpt planner needs --model")
        model = _load(args.model, VQStage2)
    res, elapsed = run_planner(args.planner, problem, args.seed, model, args.K, args.b, args.beam,
                               cutoff=args.cutoff)
    record = _result_record(args.planner, problem, res, elapsed)
    record["world_seed"] = args.world_seed
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if res.success:
        write_path_csv(out.with_suffix(".csv"), res.path)
    out.with_suffix(".json").write_text(json.dumps(record, indent=2))
    print(json.dumps({k: record[k] for k in ("planner", "success", "time", "vertices", "path_length")}))
    return EXIT_OK if res.success else EXIT_FAIL


# -- problems ------------------------------------------------------------------

def make_problems(count: int, seed: int, blocked_only: bool = False) -> list[dict]:
    """Seeded problem set; each entry is reproducible from its world seed."""
    rng = make_rng(seed)
    out = []
    while len(out) < count:
        ws = int(rng.integers(0, 2**31 - 1))
        world = generate_world(ws)
        p = random_problem(world, make_rng([seed, ws]))
        if blocked_only and not straight_line_blocked(p):
            continue
        out.append({"id": len(out), "world_seed": ws, "start": p.start.tolist(), "goal": p.goal.tolist(),
                    "goal_radius": p.goal_radius})
    return out


def load_problems(path) -> list[dict]:
    try:
        items = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(items, list) or not all(isinstance(i, dict) for i in items):
        raise UsageError(f"{path} must hold a list of problem objects")
    for i, it in enumerate(items):
        missing = {"world_seed", "start", "goal"} - set(it)
        if missing:
            raise UsageError(f"problem {i} lacks {sorted(missing)}")
    return items


def _instance(item: dict) -> ProblemInstance:
    world = generate_world(int(item["world_seed"]))
    radius = float(item.get("goal_radius", 0.02 * world.side))
    return ProblemInstance(world, np.asarray(item["start"], dtype=float), np.asarray(item["goal"], dtype=float),
                           radius)


def cmd_gen_problems(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    problems = make_problems(args.count, args.seed, args.blocked_only)
    Path(args.out).write_text(json.dumps(problems, indent=1))
    print(f"wrote {len(problems)} problems to {args.out}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------------

_WORKER_MODEL: dict = {}


def _worker_model(path):
    if path and path not in _WORKER_MODEL:
        _WORKER_MODEL[path] = load_model(path)
    return _WORKER_MODEL.get(path)


def eval_problem(item: dict, planners: list[str], model_path: str | None, cutoff: float, epsilon: float,
                 K: int, b: float, beam: int | None, rrt_star_iterations: int, model=None) -> list[dict]:
    """All planner rows for one problem; failures become rows, never exceptions."""
    problem = _instance(item)
    pid = item.get("id", 0)
    seed = int(item["world_seed"])
    model = model if model is not None else _worker_model(model_path)
    rows, reference = [], None
    order = sorted(planners, key=lambda p: p != "vqmpt")
    for name in order:
        try:
            if name == "rrt-star":
                if reference is None:
                    # no vqmpt path to compare against: long-budget RRT* reference
                    ref = rrt_star_plan(problem, max_time=4 * cutoff, rng=make_rng([seed, 1]),
                                        max_iterations=rrt_star_iterations)
                    reference = ref.path_length if ref.success else None
                res, elapsed = run_planner(name, problem, seed, model, K, b, beam, cutoff, reference, epsilon,
                                           rrt_star_iterations)
                ok = res.success and reference is not None and termination_met(res.path_length, reference, epsilon)
            else:
                res, elapsed = run_planner(name, problem, seed, model, K, b, beam, cutoff)
                ok = res.success
                if name == "vqmpt" and ok:
                    reference = res.path_length
            ok = ok and elapsed <= cutoff
            rows.append({"problem_id": pid, "planner": name, "success": ok, "time": elapsed,
                         "vertices": res.vertices, "path_length": res.path_length if ok else None,
                         "samples": res.samples_drawn})
        except (VQMPTError, ValueError, FloatingPointError) as exc:
            logger.warning("problem %s, planner %s failed: %s", pid, name, exc)
            rows.append({"problem_id": pid, "planner": name, "success": False, "time": float("nan"),
                         "vertices": 0, "path_length": None, "samples": 0})
    return sorted(rows, key=lambda r: planners.index(r["planner"]))


def aggregate(rows: list[dict], planners: list[str]) -> dict:
    out = {}
    for name in planners:
        mine = [r for r in rows if r["planner"] == name]
        wins = [r for r in mine if r["success"]]
        times = [r["time"] for r in wins]
        out[name] = {
            "problems": len(mine),
            "successes": len(wins),
            "success_pct": 100.0 * len(wins) / len(mine) if mine else 0.0,
            "mean_time": float(np.mean(times)) if times else None,
            "median_time": float(np.median(times)) if times else None,
            "mean_vertices": float(np.mean([r["vertices"] for r in mine])) if mine else None,
        }
    return out


def success_curve_svg(rows: list[dict], planners: list[str], cutoff: float, width: int = 480,
                      height: int = 320) -> str:
    """Fraction of problems solved within time t, one polyline per planner."""
    pad = 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    sx = lambda t: pad + (width - 2 * pad) * t / cutoff
    sy = lambda f: height - pad - (height - 2 * pad) * f
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{sy(0)}" x2="{width - pad}" y2="{sy(0)}" stroke="black"/>',
             f'<line x1="{pad}" y1="{sy(0)}" x2="{pad}" y2="{sy(1)}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">time (s), cutoff {cutoff:g}</text>',
             f'<text x="12" y="{pad - 12}" font-size="12">success</text>']
    for i, name in enumerate(planners):
        mine = [r for r in rows if r["planner"] == name]
        times = sorted(r["time"] for r in mine if r["success"])
        pts = [(0.0, 0.0)]
        for k, t in enumerate(times, 1):
            pts.append((t, (k - 1) / len(mine)))
            pts.append((t, k / len(mine)))
        pts.append((cutoff, len(times) / len(mine) if mine else 0.0))
        coords = " ".join(f"{sx(t):.2f},{sy(f):.2f}" for t, f in pts)
        color = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        parts.append(f'<text x="{width - pad - 80}" y="{pad + 16 * i}" fill="{color}" font-size="12">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _threads() -> int:
    env = os.environ.get("VQMPT_THREADS")
    if env is None:
        return os.cpu_count() or 1
    try:
        n = int(env)
    except ValueError:
        raise UsageError(f"VQMPT_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("VQMPT_THREADS must be at least 1")
    return n


def cmd_eval(args) -> int:
    planners = [p.strip() for p in args.planners.split(",") if p.strip()]
    unknown = [p for p in planners if p not in PLANNERS]
    if unknown or not planners:
        raise UsageError(f"unknown planners {unknown}; choose from {', '.join(PLANNERS)}")
    if args.cutoff <= 0 or args.epsilon < 0:
        raise UsageError("--cutoff must be positive and --epsilon non-negative")
    model = None
    if "vqmpt" in planners:
        if not args.model:
            raise UsageError("evaluating vqmpt needs --model")
        model = _load(args.model, VQStage2)
    problems = load_problems(args.problems)
    threads = _threads()
    jobs = [(it, planners, args.model, args.cutoff, args.epsilon, args.K, args.b, args.beam,
             args.rrt_star_iterations) for it in problems]
    if threads > 1 and len(problems) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(problems))) as pool:
            per_problem = list(pool.map(eval_problem, *zip(*jobs)))
    else:
        per_problem = [eval_problem(*job, model=model) for job in jobs]
    rows = [r for rs in per_problem for r in rs]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rows.csv", "w", newline="") as fh:
        fh.write(f"{EVAL_HEADER} vqmpt {__version__}\n")
        writer = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "success": int(r["success"]), "time": repr(float(r["time"])),
                             "path_length": "" if r["path_length"] is None else repr(float(r["path_length"]))})
    summary = {"cutoff": args.cutoff, "epsilon": args.epsilon, "planners": aggregate(rows, planners)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    (out / "success_vs_time.svg").write_text(success_curve_svg(rows, planners, args.cutoff))
    for name, agg in summary["planners"].items():
        print(f"{name}: {agg['success_pct']:.1f}% solved, mean vertices {agg['mean_vertices']}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqmpt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vqmpt {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a training dataset")
    g.add_argument("--stage", type=int, choices=(1, 2), required=True)
    g.add_argument("--count", type=int, required=True, help="trajectories (stage 1) or environments (stage 2)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--trajs-per-env", type=int, default=5)
    g.add_argument("--rrt-star-iterations", type=int, default=1500)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train stage 1 or stage 2")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="CSV loss log (default: OUT.csv)")
    t.add_argument("--stage1", help="stage 1 checkpoint (stage 2 only)")
    t.add_argument("--d-model", type=int, default=64)
    t.add_argument("--n-codes", type=int, default=32)
    t.add_argument("--n-heads", type=int, default=4)
    t.add_argument("--n-layers", type=int, default=3)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--warmup-steps", type=int, default=400)
    t.add_argument("--beta", type=float, default=0.25)
    t.add_argument("--lam", type=float, default=0.1)
    t.add_argument("--beam", type=int, default=4)
    t.add_argument("--n-h-max", type=int, default=12)
    t.add_argument("--augment", action="store_true", help="train stage 2 on all 8 symmetries of each record")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("plan", help="solve one problem")
    p.add_argument("--model")
    p.add_argument("--world-seed", type=int, required=True)
    p.add_argument("--start", type=_point, required=True)
    p.add_argument("--goal", type=_point, required=True)
    p.add_argument("--goal-radius", type=float, default=0.02, help="fraction of the workspace side")
    p.add_argument("--planner", choices=PLANNERS, default="vqmpt")
    p.add_argument("--K", type=int, default=500)
    p.add_argument("--b", type=float, default=0.9)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--cutoff", type=float, default=None, help="seconds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output stem; writes STEM.json and STEM.csv")
    p.set_defaults(func=cmd_plan)

    q = sub.add_parser("gen-problems", help="write a seeded problem set")
    q.add_argument("--count", type=int, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--blocked-only", action="store_true")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_gen_problems)

    e = sub.add_parser("eval", help="benchmark planners on a problem set")
    e.add_argument("--model")
    e.add_argument("--problems", required=True)
    e.add_argument("--planners", default="vqmpt,rrt,rrt-star")
    e.add_argument("--cutoff", type=float, default=20.0)
    e.add_argument("--epsilon", type=float, default=0.1)
    e.add_argument("--K", type=int, default=500)
    e.add_argument("--b", type=float, default=0.9)
    e.add_argument("--beam", type=int, default=None)
    e.add_argument("--rrt-star-iterations", type=int, default=20_000)
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, VQMPTError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
