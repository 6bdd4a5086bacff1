"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The trained models come from a session fixture running the desk-scale config
(d=64, N=32, entropy weight 0.8, 2000 stage-1 trajectories, 1000 stage-2
demonstrations trained with their 8 symmetric copies). Set
VQMPT_ACCEPTANCE_CACHE to a directory to reuse trained artifacts across runs.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import optimize, stats

from vqmpt import numerics as nx
from vqmpt.ar_stage2 import (
    PlanningQuery,
    ar_logits,
    beam_search,
    build_gmm,
    ce_loss,
    cross_attention_context,
    embed_environment,
    embed_points,
)
from vqmpt.cli import eval_problem
from vqmpt.env2d import generate_world, make_rng, random_problem, render_costmap, straight_line_blocked
from vqmpt.exceptions import CheckpointError
from vqmpt.numerics import Tensor, gradcheck
from vqmpt.numerics import tensor as T
from vqmpt.numerics.init import add_attention, add_linear, add_mlp, add_prenorm_block
from vqmpt.pipeline import (
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
from vqmpt.planners import SamplerHandle, rrt_star_plan, termination_met, uniform_sampler, vqmpt_plan
from vqmpt.vq_stage1 import (
    VQStage1,
    decode,
    encode,
    entropy_nll,
    factorize,
    init_stage1_params,
    quantize,
    quantize_many,
    recon_loss,
    vq_terms,
)

from .conftest import ACCEPTANCE_RESULTS
from .oracles import path_valid
from .test_ar_stage2 import Tiny, enumerate_sequences

F64 = np.float64
GRAD_TOL = 1e-4
SHAPES_PER_OP = 20


def verdict(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=F64), requires_grad=True, dtype=F64)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- trained desk-scale models ------------------------------------------------

@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    cache = os.environ.get("VQMPT_ACCEPTANCE_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("acceptance")
    root.mkdir(parents=True, exist_ok=True)
    metrics_path = root / "metrics.json"
    if metrics_path.exists():
        stage2 = load_model(root / "s2.ck")
        _, records = load_dataset(root / "s2.ds")
        return {"root": root, "stage2": stage2, "stage1": stage2.stage1, "records": records,
                **json.loads(metrics_path.read_text())}
    t0 = time.perf_counter()
    trajs = gen_stage1_dataset(2000, 0)
    stage1 = VQStage1(d_model=64, n_codes=32, lam=0.8, epochs=20, random_state=0).fit(trajs)
    records = gen_stage2_dataset(200, 5, seed=1)
    stage2 = train_stage2(records, stage1, augment=True, d_model=64, epochs=6, random_state=0)
    elapsed = time.perf_counter() - t0
    save_stage1_dataset(root / "s1.ds", trajs)
    save_stage2_dataset(root / "s2.ds", records)
    save_checkpoint(root / "s1.ck", stage1_checkpoint(stage1))
    save_checkpoint(root / "s2.ck", stage2_checkpoint(stage2))
    metrics = {"train_seconds": elapsed, "stage2_records": len(records),
               "nll_initial": stage1.initial_heldout_nll_, "nll_final": stage1.history_[-1]["heldout_nll"],
               "acc_initial": stage2.initial_heldout_accuracy_,
               "acc_final": stage2.history_[-1]["heldout_accuracy"]}
    metrics_path.write_text(json.dumps(metrics, indent=2))
    return {"root": root, "stage2": stage2, "stage1": stage1, "records": records, **metrics}


# -- criterion 1: gradient integrity --------------------------------------------

def _shape(rng, ndim=2, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _case_unary(op, positive=False, away_from_zero=False):
    def case(rng):
        shape = _shape(rng, int(rng.integers(1, 4)))
        x = rng.normal(size=shape)
        if positive:
            x = np.abs(x) + 0.5
        if away_from_zero:
            x = np.sign(x) * (np.abs(x) + 0.1)
        x = leaf(x)
        w = rng.normal(size=shape)
        return lambda: (op(x) * w).sum(), [x]
    return case


def _case_binary(op, positive_rhs=False):
    def case(rng):
        shape = _shape(rng, 3)
        rhs_shape = tuple(1 if rng.random() < 0.3 else s for s in shape)[int(rng.integers(0, 3)):]
        a = leaf(rng.normal(size=shape))
        bv = rng.normal(size=rhs_shape)
        b = leaf(np.abs(bv) + 0.5 if positive_rhs else bv)
        w = rng.normal(size=shape)
        return lambda: (op(a, b) * w).sum(), [a, b]
    return case


def _case_matmul(rng):
    n, k, m = _shape(rng, 3)
    batch = _shape(rng, int(rng.integers(0, 2)))
    a, b = leaf(rng.normal(size=(*batch, n, k))), leaf(rng.normal(size=(k, m)))
    w = rng.normal(size=(*batch, n, m))
    return lambda: (nx.matmul(a, b) * w).sum(), [a, b]


def _case_reduce(kind):
    def case(rng):
        shape = _shape(rng, 3)
        axis = int(rng.integers(0, 3))
        x = leaf(rng.normal(size=shape))
        keep = bool(rng.random() < 0.5)
        out_shape = (getattr(x.data, kind)(axis=axis, keepdims=keep)).shape
        w = rng.normal(size=out_shape)
        return lambda: (getattr(x, kind)(axis=axis, keepdims=keep) * w).sum(), [x]
    return case


def _case_reshape(rng):
    shape = _shape(rng, 3)
    x = leaf(rng.normal(size=shape))
    w = rng.normal(size=(int(np.prod(shape)),))
    return lambda: (x.reshape(-1) * w).sum(), [x]


def _case_transpose(rng):
    shape = _shape(rng, 3)
    perm = tuple(int(v) for v in rng.permutation(3))
    x = leaf(rng.normal(size=shape))
    w = rng.normal(size=tuple(shape[p] for p in perm))
    return lambda: (x.transpose(*perm) * w).sum(), [x]


def _case_getitem(rng):
    n, m = _shape(rng, 2, 2, 5)
    x = leaf(rng.normal(size=(n, m)))
    rows = rng.integers(0, n, size=int(rng.integers(1, 6)))  # repeats exercise accumulation
    w = rng.normal(size=(len(rows), m - 1))
    return lambda: (x[rows, 1:] * w).sum(), [x]


def _case_concat(rng):
    m = int(rng.integers(1, 4))
    xs = [leaf(rng.normal(size=(int(rng.integers(1, 4)), m))) for _ in range(int(rng.integers(1, 4)))]
    w = rng.normal(size=(sum(x.shape[0] for x in xs), m))
    return lambda: (nx.concat(xs, axis=0) * w).sum(), xs


def _case_stack(rng):
    shape = _shape(rng, 2)
    xs = [leaf(rng.normal(size=shape)) for _ in range(int(rng.integers(1, 4)))]
    axis = int(rng.integers(0, 3))
    w = rng.normal(size=np.stack([x.data for x in xs], axis=axis).shape)
    return lambda: (nx.stack(xs, axis=axis) * w).sum(), xs


def _case_where(rng):
    shape = _shape(rng, 2)
    a, b = leaf(rng.normal(size=shape)), leaf(rng.normal(size=shape[-1:]))
    mask = rng.random(shape) < 0.5
    w = rng.normal(size=shape)
    return lambda: (T.where(mask, a, b) * w).sum(), [a, b]


def _case_astype(rng):
    x = leaf(rng.normal(size=_shape(rng)))
    w = rng.normal(size=x.shape)
    return lambda: (x.astype(F64) * w).sum(), [x]


def _case_softmax(rng):
    shape = _shape(rng, 2, 1, 5)
    mask = rng.random(shape) < 0.7
    mask[:, 0] = True
    x = leaf(rng.normal(size=shape))
    w = rng.normal(size=shape)
    return lambda: (nx.softmax(x, mask=mask) * w).sum(), [x]


def _case_layernorm(rng):
    n, m = _shape(rng, 2, 2, 5)
    x, g, b = leaf(rng.normal(size=(n, m))), leaf(rng.normal(size=m)), leaf(rng.normal(size=m))
    w = rng.normal(size=(n, m))
    return lambda: (nx.layernorm(x, g, b) * w).sum(), [x, g, b]


def _params64(fill, rng):
    p = {}
    fill(p)
    for t in p.values():
        t.data += rng.normal(scale=0.1, size=t.shape)
    return p


def _case_linear(rng):
    n, i, o = _shape(rng, 3)
    p = _params64(lambda p: add_linear(p, rng, "l", i, o, dtype=F64), rng)
    x = leaf(rng.normal(size=(n, i)))
    w = rng.normal(size=(n, o))
    return lambda: (nx.linear(x, p, "l") * w).sum(), [x, *p.values()]


def _case_mlp(rng):
    n, d, h = _shape(rng, 3)
    p = _params64(lambda p: add_mlp(p, rng, "m", d, h, dtype=F64), rng)
    x = leaf(rng.normal(size=(n, d)))
    w = rng.normal(size=(n, d))
    return lambda: (nx.mlp(x, p, "m") * w).sum(), [x, *p.values()]


def _case_attention(rng):
    nq, nk, dq, dv = _shape(rng, 4)
    Q, K, V = leaf(rng.normal(size=(nq, dq))), leaf(rng.normal(size=(nk, dq))), leaf(rng.normal(size=(nk, dv)))
    mask = rng.random((nq, nk)) < 0.7
    mask[:, 0] = True
    w = rng.normal(size=(nq, dv))
    return lambda: (nx.attention(Q, K, V, mask) * w).sum(), [Q, K, V]


def _case_mha(rng):
    heads = int(rng.choice([1, 2]))
    d = heads * int(rng.integers(1, 3))
    nq, nk = _shape(rng, 2)
    p = _params64(lambda p: add_attention(p, rng, "a", d, dtype=F64), rng)
    xq, xkv = leaf(rng.normal(size=(nq, d))), leaf(rng.normal(size=(nk, d)))
    w = rng.normal(size=(nq, d))
    return lambda: (nx.multi_head_attention(xq, xkv, p, "a", heads) * w).sum(), [xq, xkv, *p.values()]


def _case_prenorm(cross):
    def case(rng):
        d, n = 4, int(rng.integers(1, 4))
        p = _params64(lambda p: add_prenorm_block(p, rng, "blk", d, cross=cross, dtype=F64), rng)
        x = leaf(rng.normal(size=(n, d)))
        ctx = leaf(rng.normal(size=(int(rng.integers(1, 4)), d))) if cross else None
        mask = None if cross else np.tril(np.ones((n, n), dtype=bool))
        w = rng.normal(size=(n, d))
        fn = lambda: (nx.prenorm_block(x, p, "blk", heads=2, mask=mask, context=ctx) * w).sum()  # noqa: E731
        return fn, [x, *p.values()] + ([ctx] if cross else [])
    return case


def _case_gaussian_nll(rng):
    n = int(rng.integers(1, 4))
    L0 = np.tril(rng.normal(size=(n, n)), -1) + np.eye(n)
    mu, L, D = leaf(rng.normal(size=n)), leaf(L0), leaf(np.exp(rng.normal(size=n)))
    q = rng.normal(size=n)
    return lambda: nx.gaussian_nll(q, mu, L, D), [mu, L, D]


def _stage1_small(rng):
    return init_stage1_params(rng, 8, 4, 4, 1, dtype=F64)


def _random_batch(rng, B=3, T=5):
    X = rng.uniform(0, 1, size=(B, T, 2))
    lengths = rng.integers(1, T + 1, size=B)
    lengths[0] = T
    return X, np.arange(T)[None] < lengths[:, None]


def _case_encode(rng):
    p = _stage1_small(rng)
    X, mask = _random_batch(rng, int(rng.integers(1, 4)), int(rng.integers(1, 6)))
    w = rng.normal(size=(*X.shape[:2], 8)) * mask[..., None]
    leaves = [p[k] for k in ("enc.in.W", "enc.blk0.attn.q.W", "enc.blk0.mlp.fc1.W", "enc.ln_f.g")]
    return lambda: (encode(p, X, mask, 2) * w).sum(), leaves


def _case_factorize(rng):
    p = _stage1_small(rng)
    z = leaf(rng.normal(size=(int(rng.integers(1, 5)), 8)))
    w = rng.normal(size=(z.shape[0], 4))
    return lambda: (factorize(p, z) * w).sum(), [z, p["enc.factor.W"], p["enc.factor.b"]]


def _case_decode(rng):
    p = _stage1_small(rng)
    codes = leaf(unit_rows(rng, int(rng.integers(1, 6)), 4))
    q = rng.uniform(0, 1, size=(codes.shape[0], 2))
    leaves = [codes] + [p[k] for k in ("dec.fc1.W", "dec.fc2.b", "dec.mu.W", "dec.l.W", "dec.d.W", "dec.d.b")]
    return lambda: nx.gaussian_nll(q, *decode(p, codes)).sum(), leaves


def _case_entropy(proposal):
    def case(rng):
        p = _stage1_small(rng)
        codes = leaf(unit_rows(rng, int(rng.integers(1, 4)), 4))
        pts = rng.uniform(0, 1, size=(16, 2)) if proposal == "uniform" else None
        leaves = [codes, p["dec.mu.W"], p["dec.l.W"], p["dec.d.W"]]
        return lambda: entropy_nll(*decode(p, codes), pts, proposal).sum(), leaves
    return case


def _case_recon(rng):
    p = _stage1_small(rng)
    n = int(rng.integers(1, 5))
    codes = leaf(unit_rows(rng, n, 4))
    traj = rng.uniform(0, 1, size=(n, 2))
    lam = float(rng.uniform(0, 1))
    seed = int(rng.integers(0, 1000))
    fn = lambda: recon_loss(decode(p, codes), traj, lam, 32, make_rng(seed))  # noqa: E731
    return fn, [codes, p["dec.fc1.W"], p["dec.d.b"]]


def _case_vq_decoder(rng):
    p = _stage1_small(rng)
    X, mask = _random_batch(rng)
    leaves = [p[k] for k in ("dec.fc1.W", "dec.mu.b", "dec.l.W", "dec.d.W")]
    return lambda: vq_terms(p, X, mask, 2).total, leaves


def _case_vq_commitment(rng):
    p = _stage1_small(rng)
    X, mask = _random_batch(rng)
    return lambda: vq_terms(p, X, mask, 2).commitment, [p["enc.in.W"], p["enc.blk0.attn.v.W"], p["enc.factor.W"]]


def _case_vq_codebook(rng):
    p = _stage1_small(rng)
    X, mask = _random_batch(rng)
    return lambda: vq_terms(p, X, mask, 2).codebook, [p["codebook"]]


def _tiny(rng):
    return Tiny(int(rng.integers(0, 10**6)), d=8)


def _case_env_embed(rng):
    t = _tiny(rng)
    cells = (rng.random((2, 8, 8)) < 0.3).astype(F64)
    w = rng.normal(size=embed_environment(t.p, cells, t.patch).shape)
    return lambda: (embed_environment(t.p, cells, t.patch) * w).sum(), [t.p["env.patch.W"], t.p["env.patch.b"]]


def _case_point_embed(rng):
    t = _tiny(rng)
    pts = rng.uniform(0, 1, size=(int(rng.integers(1, 4)), 2))
    w = rng.normal(size=(len(pts), 8))
    return lambda: (embed_points(t.p, pts) * w).sum(), [t.p[k] for k in ("emb.fc1.W", "emb.fc2.W", "emb.fc2.b")]


def _case_cross_context(rng):
    t = _tiny(rng)
    E = leaf(rng.normal(size=(4, 8)))
    qs, qg = leaf(rng.normal(size=8)), leaf(rng.normal(size=8))
    w = rng.normal(size=(6, 8))
    leaves = [E, qs, qg, t.p["ctx.blk0.attn.q.W"], t.p["ctx.blk0.mlp.fc2.W"]]
    return lambda: (cross_attention_context(t.p, E, qs, qg, t.heads) * w).sum(), leaves


def _case_ar_logits(rng):
    t = _tiny(rng)
    prefix = rng.integers(0, t.N, size=(2, int(rng.integers(0, 4))))
    M = leaf(t.M.data)
    w = rng.normal(size=(2, prefix.shape[1] + 1, t.N + 1))
    leaves = [M, t.p["ar.begin.W"], t.p["ar.code.W"], t.p["ar.blk0.attn.k.W"], t.p["ar.head.W"]]
    return lambda: (ar_logits(t.p, t.codebook, t.z_s, prefix, M, t.heads) * w).sum(), leaves


def _case_ce(rng):
    t = _tiny(rng)
    targets = [list(rng.integers(0, t.N, size=int(rng.integers(0, 4)))) + [t.N] for _ in range(2)]
    cells = np.stack([t.cells, t.cells[::-1]])
    pts = rng.uniform(0, 1, size=(2, 2, 2))

    def loss():
        E = embed_environment(t.p, cells, t.patch)
        q = embed_points(t.p, pts)
        return ce_loss(t.p, t.codebook, t.z_s, targets, cross_attention_context(t.p, E, q[:, 0], q[:, 1], t.heads),
                       t.heads)

    # the big weight matrices upstream have their own cases; here the whole loss is checked end to end
    names = ["env.patch.b", "emb.fc2.b", "emb.tag", "ctx.blk0.lnc.g", "ar.code.W", "ar.ln_f.g", "ar.head.b"]
    return loss, [t.p[k] for k in names if k in t.p]


GRAD_CASES = {
    "add": _case_binary(lambda a, b: a + b),
    "sub": _case_binary(lambda a, b: a - b),
    "mul": _case_binary(lambda a, b: a * b),
    "div": _case_binary(lambda a, b: a / b, positive_rhs=True),
    "neg": _case_unary(lambda x: -x),
    "power": _case_unary(lambda x: x ** 1.7, positive=True),
    "exp": _case_unary(T.exp),
    "log": _case_unary(T.log, positive=True),
    "sqrt": _case_unary(T.sqrt, positive=True),
    "tanh": _case_unary(T.tanh),
    "relu": _case_unary(T.relu, away_from_zero=True),
    "gelu": _case_unary(T.gelu),
    "softplus": _case_unary(nx.softplus),
    "l2_normalize": _case_unary(nx.l2_normalize, away_from_zero=True),
    "log_softmax": _case_unary(nx.log_softmax),
    "matmul": _case_matmul,
    "sum": _case_reduce("sum"),
    "mean": _case_reduce("mean"),
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "getitem": _case_getitem,
    "concat": _case_concat,
    "stack": _case_stack,
    "where": _case_where,
    "astype": _case_astype,
    "softmax_masked": _case_softmax,
    "layernorm": _case_layernorm,
    "linear": _case_linear,
    "mlp": _case_mlp,
    "attention": _case_attention,
    "multi_head_attention": _case_mha,
    "prenorm_self": _case_prenorm(False),
    "prenorm_cross": _case_prenorm(True),
    "gaussian_nll": _case_gaussian_nll,
    "stage1_encode": _case_encode,
    "stage1_factorize": _case_factorize,
    "stage1_decode": _case_decode,
    "stage1_entropy_uniform": _case_entropy("uniform"),
    "stage1_entropy_self": _case_entropy("self"),
    "stage1_recon_loss": _case_recon,
    "stage1_total_loss_decoder": _case_vq_decoder,
    "stage1_commitment_encoder": _case_vq_commitment,
    "stage1_codebook_term": _case_vq_codebook,
    "stage2_env_embedding": _case_env_embed,
    "stage2_point_embedding": _case_point_embed,
    "stage2_cross_context": _case_cross_context,
    "stage2_ar_logits": _case_ar_logits,
    "stage2_ce_loss": _case_ce,
}


def test_criterion_01_gradient_integrity():
    t0 = time.perf_counter()
    failures, worst = [], 0.0
    for i, (name, case) in enumerate(GRAD_CASES.items()):
        for s in range(SHAPES_PER_OP):
            fn, leaves = case(make_rng([7, i, s]))
            err = gradcheck(fn, leaves)
            worst = max(worst, err)
            if not err < GRAD_TOL:
                failures.append((name, s, err))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    verdict(1, ok, f"{len(GRAD_CASES)} ops x {SHAPES_PER_OP} shapes, worst rel err {worst:.2e}, "
                   f"{elapsed:.1f}s, failures {failures[:3]}")


# -- criterion 2: quantizer oracle -----------------------------------------------

def test_criterion_02_quantizer_oracle():
    rng = make_rng(2)
    codebook = unit_rows(rng, 32, 8).astype(np.float32)
    queries = unit_rows(rng, 10_000, 8).astype(np.float32)
    # exhaustive scan: strict improvement keeps the lowest index on ties
    best = np.full(len(queries), np.inf)
    expected = np.zeros(len(queries), dtype=np.int64)
    for j, c in enumerate(codebook.astype(F64)):
        dist = ((queries.astype(F64) - c) ** 2).sum(axis=1)
        better = dist < best
        best[better], expected[better] = dist[better], j
    single = np.array([quantize(codebook, q)[0] for q in queries])
    batched = quantize_many(codebook, queries)
    mismatches = int(np.sum(single != expected) + np.sum(batched != expected))
    verdict(2, mismatches == 0, f"10000 queries, N=32, mismatches {mismatches}")


# -- criterion 3: beam search oracle -------------------------------------------------

def test_criterion_03_beam_search_oracle():
    t0 = time.perf_counter()
    bad = []
    for seed in range(50):
        t = Tiny(1000 + seed)
        best = max(enumerate_sequences(t.N, 4), key=t.sequence_score)
        got, _ = beam_search(t.log_probs, t.N, width=(t.N + 1) ** 4, n_h_max=4)
        if got != best:
            bad.append(seed)
    elapsed = time.perf_counter() - t0
    verdict(3, not bad and elapsed < 60, f"50 instances, N=4, n_h_max=4, mismatches {bad}, {elapsed:.1f}s")


# -- criterion 4: SPD guarantee -------------------------------------------------------

def test_criterion_04_spd_guarantee():
    worst, count = np.inf, 0
    for s in range(100):
        rng = make_rng([4, s])
        p = init_stage1_params(rng, 16, 8, 4, 1)
        scale = float(rng.choice([1.0, 10.0, 100.0]))
        for k in ("dec.fc1.W", "dec.fc2.W", "dec.l.W", "dec.d.W", "dec.d.b"):
            p[k].data *= scale
        codes = Tensor(unit_rows(rng, 100, 4).astype(np.float32))
        _, L, D = decode(p, codes)
        L, D = L.data.astype(F64), D.data.astype(F64)
        sigma = L @ (D[..., None] * np.swapaxes(L, -1, -2))
        a, b, c = sigma[:, 0, 0], sigma[:, 0, 1], sigma[:, 1, 1]
        lam_max = 0.5 * (a + c + np.sqrt((a - c) ** 2 + 4 * b * b))
        lam_min = D[:, 0] * D[:, 1] / lam_max  # det(L) = 1 so det(sigma) = D0 * D1
        worst = min(worst, float(lam_min.min()))
        count += len(codes)
    verdict(4, count == 10_000 and worst > 0, f"{count} evaluations, smallest eigenvalue {worst:.3e}")


# -- criterion 5: stop-gradient contract ----------------------------------------------

def test_criterion_05_stop_gradient_contract():
    violations = []
    for s in range(20):
        rng = make_rng([5, s])
        p = init_stage1_params(rng, 8, 4, 4, 1, dtype=F64)
        X, mask = _random_batch(rng)
        vq_terms(p, X, mask, 2).codebook.backward()
        violations += [k for k, v in p.items() if k.startswith("enc.") and v.grad is not None and np.any(v.grad)]
        for v in p.values():
            v.grad = None
        vq_terms(p, X, mask, 2).commitment.backward()
        if p["codebook"].grad is not None and np.any(p["codebook"].grad):
            violations.append("codebook")
    verdict(5, not violations, f"20 instances, nonzero gradients on {sorted(set(violations))}")


# -- criterion 6: GMM statistical fidelity ----------------------------------------------

def _marginal_quantiles(gmm, axis, qs):
    mus = np.array([c.mu[axis] for c in gmm.components])
    sds = np.array([math.sqrt(c.covariance[axis, axis]) for c in gmm.components])
    cdf = lambda x: float(np.mean(stats.norm.cdf(x, mus, sds)))  # noqa: E731
    lo, hi = mus.min() - 12 * sds.max(), mus.max() + 12 * sds.max()
    return [optimize.brentq(lambda x: cdf(x) - q, lo, hi, xtol=1e-12) for q in qs]


def test_criterion_06_gmm_fidelity(trained):
    stage1 = trained["stage1"]
    gmm = build_gmm(stage1, [3, 11, 19, 27, stage1.n_codes])
    M = 100_000
    rng = make_rng(6)
    x = np.array([gmm.sample(rng) for _ in range(M)])
    # 4 x 4 bins split at the exact marginal quartiles; rectangle masses from the analytic CDF
    edges = [np.array([-np.inf, *_marginal_quantiles(gmm, a, (0.25, 0.5, 0.75)), np.inf]) for a in (0, 1)]
    big = 1e3

    def cdf2(u, v):
        u, v = np.clip(u, -big, big), np.clip(v, -big, big)
        return float(np.mean([stats.multivariate_normal.cdf([u, v], c.mu, c.covariance, abseps=1e-9, releps=1e-9)
                              for c in gmm.components]))

    expected, observed = [], []
    for i in range(4):
        for j in range(4):
            x0, x1, y0, y1 = edges[0][i], edges[0][i + 1], edges[1][j], edges[1][j + 1]
            mass = cdf2(x1, y1) - cdf2(x0, y1) - cdf2(x1, y0) + cdf2(x0, y0)
            expected.append(mass * M)
            observed.append(np.sum((x[:, 0] > x0) & (x[:, 0] <= x1) & (x[:, 1] > y0) & (x[:, 1] <= y1)))
    expected = np.array(expected) * M / np.sum(expected)
    p_value = float(stats.chisquare(observed, expected).pvalue)
    sigma = np.sqrt(np.diag(gmm.covariance))
    mean_ok = bool(np.all(np.abs(x.mean(axis=0) - gmm.mean) < 3 * sigma / math.sqrt(M)))
    verdict(6, p_value > 1e-3 and mean_ok, f"chi-square p={p_value:.4f} over 16 bins, mean within 3 sigma: {mean_ok}")


# -- criterion 7: planner soundness -------------------------------------------------------

def test_criterion_07_planner_soundness(trained):
    stage2 = trained["stage2"]
    violations, successes, counts = [], 0, {"rrt": 0, "vqmpt": 0, "rrt-star": 0}
    for i in range(500):
        world = generate_world(3_000_000 + i % 100)
        problem = random_problem(world, make_rng([7, i]))
        kind = ("rrt", "vqmpt", "rrt", "vqmpt", "rrt-star")[i % 5]
        counts[kind] += 1
        if kind == "rrt":
            res = vqmpt_plan(problem, uniform_sampler(world), K=1000, rng=make_rng(i))
        elif kind == "vqmpt":
            q = PlanningQuery(render_costmap(world).cells, problem.start, problem.goal, world.side)
            res = vqmpt_plan(problem, SamplerHandle("gmm", stage2.predict_gmm(q).sample), K=1000, rng=make_rng(i))
        else:
            res = rrt_star_plan(problem, max_time=5.0, rng=make_rng(i), max_iterations=600)
        if not res.success:
            continue
        successes += 1
        path = res.path
        ends_ok = (np.array_equal(path[0], problem.start)
                   and np.linalg.norm(path[-1] - problem.goal) <= problem.goal_radius + 1e-12)
        if not (ends_ok and path_valid(world, path)):
            violations.append((i, kind))
    verdict(7, not violations and successes > 0,
            f"500 queries {counts}, {successes} successes, violations {violations[:5]}")


# -- criterion 8: end-to-end training ----------------------------------------------------------

def test_criterion_08_end_to_end_training(trained):
    chance = 1.0 / (trained["stage1"].n_codes + 1)
    nll0, nll1 = trained["nll_initial"], trained["nll_final"]
    improvement = (nll0 - nll1) / abs(nll0)
    acc = trained["acc_final"]
    minutes = trained["train_seconds"] / 60
    ok = improvement >= 0.3 and acc >= 3 * chance and minutes <= 30
    verdict(8, ok, f"stage-1 held-out NLL {nll0:.3f} -> {nll1:.3f} ({100 * improvement:.0f}% better); "
                   f"stage-2 top-1 {acc:.3f} vs 3x chance {3 * chance:.3f}; {trained['stage2_records']} demos; "
                   f"{minutes:.1f} min")


# -- criterion 9: fewer vertices with learned sampling ----------------------------------------------

def blocked_problems(count, first_seed=10**6):
    out, seed = [], first_seed
    while len(out) < count:
        world = generate_world(seed)
        problem = random_problem(world, make_rng([9, seed]))
        if straight_line_blocked(problem):
            out.append(problem)
        seed += 1
    return out


def test_criterion_09_fewer_vertices(trained):
    stage2 = trained["stage2"]
    train_seeds = {r.world_seed for r in trained["records"]}
    t0 = time.perf_counter()
    problems = blocked_problems(100)
    assert not train_seeds & {p.world.seed for p in problems}
    cutoff = 20.0
    uni_v, gmm_v, uni_ok, gmm_ok = [], [], 0, 0
    for i, p in enumerate(problems):
        ru = vqmpt_plan(p, uniform_sampler(p.world), rng=make_rng(i), time_limit=cutoff)
        q = PlanningQuery(render_costmap(p.world).cells, p.start, p.goal, p.world.side)
        rg = vqmpt_plan(p, SamplerHandle("gmm", stage2.predict_gmm(q).sample), rng=make_rng(i), time_limit=cutoff)
        uni_v.append(ru.vertices)
        gmm_v.append(rg.vertices)
        uni_ok += ru.success and ru.wall_time <= cutoff
        gmm_ok += rg.success and rg.wall_time <= cutoff
    elapsed = time.perf_counter() - t0
    mu, mg = float(np.median(uni_v)), float(np.median(gmm_v))
    ok = mg < mu and gmm_ok >= uni_ok and elapsed <= 600
    verdict(9, ok, f"median vertices gmm {mg:.0f} vs uniform {mu:.0f}; successes gmm {gmm_ok} vs uniform {uni_ok}; "
                   f"{elapsed:.0f}s")


# -- criterion 10: termination rule and eval harness ----------------------------------------------------

def test_criterion_10_termination_harness(trained):
    rng = make_rng(10)
    prop_fail = []
    for _ in range(2000):
        ref = float(rng.uniform(0.1, 3.0))
        eps = float(rng.uniform(0, 1))
        if not termination_met((1 + eps) * ref, ref, eps):
            prop_fail.append("boundary")
        if termination_met(np.nextafter((1 + eps) * ref, np.inf), ref, eps):
            prop_fail.append("above boundary")
        cand = float(rng.uniform(0.1, 4.0))
        e1, e2 = sorted(rng.uniform(0, 1, size=2))
        if termination_met(cand, ref, e1) and not termination_met(cand, ref, e2):
            prop_fail.append("monotone")
    stage2 = trained["stage2"]
    items = []
    for k, p in enumerate(blocked_problems(12, first_seed=4_000_000)):
        items.append({"id": k, "world_seed": p.world.seed, "start": p.start.tolist(), "goal": p.goal.tolist(),
                      "goal_radius": p.goal_radius})
    wins = {}
    for eps in (0.1, 0.5):
        rows = [r for it in items for r in eval_problem(it, ["vqmpt", "rrt-star"], None, 60.0, eps, 500, 0.9, None,
                                                        1500, model=stage2) if r["planner"] == "rrt-star"]
        wins[eps] = {r["problem_id"] for r in rows if r["success"]}
    dominated = wins[0.1] <= wins[0.5]
    verdict(10, not prop_fail and dominated,
            f"property violations {sorted(set(prop_fail))}; rrt-star solved {len(wins[0.5])} at eps 0.5 "
            f"vs {len(wins[0.1])} at eps 0.1, dominance {dominated}")


# -- criterion 11: serialization --------------------------------------------------------------------

def test_criterion_11_serialization(trained, tmp_path):
    root = trained["root"]
    problems = []
    for name in ("s1.ck", "s2.ck"):
        model = load_model(root / name)
        ck = stage1_checkpoint(model) if name == "s1.ck" else stage2_checkpoint(model)
        save_checkpoint(tmp_path / name, ck)
        if (tmp_path / name).read_bytes() != (root / name).read_bytes():
            problems.append(f"{name} not bit-exact")
    for name in ("s1.ds", "s2.ds"):
        kind, data = load_dataset(root / name)
        save = save_stage1_dataset if kind == "stage1" else save_stage2_dataset
        save(tmp_path / name, data)
        if (tmp_path / name).read_bytes() != (root / name).read_bytes():
            problems.append(f"{name} not bit-exact")
    rng = make_rng(11)
    typed, crashes = 0, []
    for name, loader in (("s2.ck", load_model), ("s1.ds", load_dataset)):
        data = (root / name).read_bytes()
        for trial in range(150):
            buf = bytearray(data)
            if trial % 3 == 0:
                buf = buf[: int(rng.integers(0, len(buf)))]
            else:
                # the first kilobyte holds the header and shape table
                hi = 1024 if trial % 3 == 1 else len(buf)
                for pos in rng.integers(0, min(hi, len(buf)), size=int(rng.integers(1, 5))):
                    buf[pos] = int(rng.integers(0, 256))
            (tmp_path / "c").write_bytes(bytes(buf))
            try:
                loader(tmp_path / "c")
            except CheckpointError:
                typed += 1
            except Exception as exc:  # noqa: BLE001
                crashes.append(f"{name}: {type(exc).__name__}")
    verdict(11, not problems and not crashes,
            f"round trips {'bit-exact' if not problems else problems}; 300 corruptions, {typed} typed errors, "
            f"crashes {crashes[:3]}")
