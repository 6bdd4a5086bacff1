"""Stage 2: costmap-conditioned autoregressive prediction of codebook indices.

The costmap is cut into p x p patches and linearly embedded (plus 2D sine
positions). Start and goal go through one shared MLP and attend over the
patch tokens in cross-attention blocks. The context ``M`` is the patch tokens
followed by the two fused query rows; it is prepended to the decoder input
as a bidirectional prefix, and the decoder predicts the next index (one of
``N`` codes or the goal class ``N``) under a causal mask.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from ._validation import check_point
from .env2d import make_rng
from .exceptions import ConfigurationError, DomainError, EmptyPredictionError, TrainingDivergedError
from .gaussian import GaussianMixture
from .numerics import tensor as T
from .numerics.init import add_layernorm, add_linear, add_prenorm_block, sinusoidal_encoding
from .numerics.tensor import Tensor

logger = logging.getLogger(__name__)

N_DIM = 2
POINT_FREQS = 6


@dataclass(frozen=True, eq=False)
class PlanningQuery:
    """Model input for one problem: occupancy cells (R, R), start, goal."""

    cells: np.ndarray
    start: np.ndarray
    goal: np.ndarray
    side: float = 1.0


# -- parameters -----------------------------------------------------------

def init_stage2_params(rng: np.random.Generator, n_codes: int, d_factor: int, d_model: int = 64,
                       patch: int = 8, n_ctx_layers: int = 2, n_ar_layers: int = 3, mlp_ratio: int = 2,
                       dtype=np.float32) -> dict:
    p: dict = {}
    add_linear(p, rng, "env.patch", patch * patch, d_model, dtype=dtype)
    add_linear(p, rng, "emb.fc1", N_DIM * (1 + 2 * POINT_FREQS), d_model, dtype=dtype)
    add_linear(p, rng, "emb.fc2", d_model, d_model, dtype=dtype)
    # learned tags so the decoder can tell the start row from the goal row
    p["emb.tag"] = Tensor(rng.normal(0.0, 0.02, size=(2, d_model)).astype(dtype), requires_grad=True)
    for i in range(n_ctx_layers):
        add_prenorm_block(p, rng, f"ctx.blk{i}", d_model, mlp_ratio, cross=True, dtype=dtype)
    add_linear(p, rng, "ar.begin", d_model, d_model, dtype=dtype)
    add_linear(p, rng, "ar.code", d_factor, d_model, dtype=dtype)
    for i in range(n_ar_layers):
        add_prenorm_block(p, rng, f"ar.blk{i}", d_model, mlp_ratio, dtype=dtype)
    add_layernorm(p, "ar.ln_f", d_model, dtype)
    add_linear(p, rng, "ar.head", d_model, n_codes + 1, dtype=dtype)
    return p


def _count_blocks(params: dict, prefix: str) -> int:
    i = 0
    while f"{prefix}{i}.ln1.g" in params:
        i += 1
    return i


def patch_positions(grid: int, dim: int, dtype=np.float32) -> np.ndarray:
    """(grid*grid, dim) table: half the channels encode the row, half the column."""
    if dim % 4:
        raise ConfigurationError("2D positional encoding needs dim divisible by 4")
    half = sinusoidal_encoding(grid, dim // 2, np.float64)
    rows = np.repeat(half, grid, axis=0)
    cols = np.tile(half, (grid, 1))
    return np.concatenate([rows, cols], axis=1).astype(dtype)


# -- forward pieces -------------------------------------------------------

def patchify(cells: np.ndarray, patch: int) -> np.ndarray:
    """(..., R, R) grid -> (..., (R/p)^2, p*p) patches in row-major patch order."""
    cells = np.asarray(cells)
    R = cells.shape[-1]
    if cells.shape[-2] != R:
        raise ConfigurationError(f"costmap must be square, got {cells.shape[-2:]}")
    if R % patch:
        raise ConfigurationError(f"costmap resolution {R} not divisible by patch size {patch}")
    g = R // patch
    lead = cells.shape[:-2]
    x = cells.reshape(*lead, g, patch, g, patch)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, g * g, patch * patch)


def embed_environment(params: dict, cells, patch: int = 8) -> Tensor:
    """Costmap(s) (..., R, R) -> environment tokens E (..., n_e, d)."""
    dtype = params["env.patch.W"].dtype
    patches = patchify(cells, patch).astype(dtype)
    d = params["env.patch.W"].shape[1]
    grid = int(round(patches.shape[-2] ** 0.5))
    return nx.linear(Tensor(patches, dtype=dtype), params, "env.patch") + patch_positions(grid, d, dtype)


def point_features(pts, side: float = 1.0, n_freqs: int = POINT_FREQS) -> np.ndarray:
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < n_freqs, on coordinates scaled to [0, 1]."""
    x = np.asarray(pts, dtype=np.float64) / side
    ang = x[..., None, :] * (np.pi * 2.0 ** np.arange(n_freqs))[:, None]
    feats = [x, np.sin(ang).reshape(*x.shape[:-1], -1), np.cos(ang).reshape(*x.shape[:-1], -1)]
    return np.concatenate(feats, axis=-1)


def embed_points(params: dict, pts, side: float = 1.0) -> Tensor:
    """Shared start/goal embedder: (..., 2) -> (..., d).

    A plain MLP on raw coordinates resolves region boundaries poorly, so the
    coordinates go through fixed sinusoidal features first.
    """
    dtype = params["emb.fc1.W"].dtype
    x = Tensor(point_features(pts, side).astype(dtype), dtype=dtype)
    return nx.linear(T.gelu(nx.linear(x, params, "emb.fc1")), params, "emb.fc2")


def cross_attention_context(params: dict, E: Tensor, q_s: Tensor, q_g: Tensor, heads: int) -> Tensor:
    """M = [E; fused(q_s); fused(q_g)] of shape (..., n_e + 2, d).

    Start and goal attend over E independently (no attention between them),
    so swapping them swaps the two fused rows.
    """
    queries = T.stack([q_s, q_g], axis=-2)
    for i in range(_count_blocks(params, "ctx.blk")):
        queries = nx.prenorm_block(queries, params, f"ctx.blk{i}", heads, context=E)
    return T.concat([E, queries], axis=-2)


def context_for(params: dict, query: PlanningQuery | Sequence[PlanningQuery], heads: int, patch: int = 8) -> Tensor:
    """Planning context M for one query (n_e+2, d) or a batch (B, n_e+2, d)."""
    single = isinstance(query, PlanningQuery)
    qs = [query] if single else list(query)
    cells = np.stack([np.asarray(q.cells, dtype=np.float64) > 0 for q in qs]).astype(np.float64)
    side = qs[0].side
    E = embed_environment(params, cells, patch)
    tag = params["emb.tag"]
    q_s = embed_points(params, np.stack([q.start for q in qs]), side) + tag[0]
    q_g = embed_points(params, np.stack([q.goal for q in qs]), side) + tag[1]
    M = cross_attention_context(params, E, q_s, q_g, heads)
    return M[0] if single else M


def prefix_lm_mask(n_ctx: int, n_seq: int) -> np.ndarray:
    """Context positions see the whole context; sequence position t sees the
    context and sequence positions <= t."""
    n = n_ctx + n_seq
    mask = np.zeros((n, n), dtype=bool)
    mask[:, :n_ctx] = True
    mask[n_ctx:, n_ctx:] = np.tril(np.ones((n_seq, n_seq), dtype=bool))
    return mask


def ar_logits(params: dict, codebook: np.ndarray, z_s: np.ndarray, prefix: np.ndarray, M: Tensor,
              heads: int) -> Tensor:
    """Logits (B, P+1, N+1); row j predicts index j of the sequence.

    ``prefix`` is (B, P) code indices (no goal class). Padding placed after
    the real entries cannot affect earlier rows because of the causal mask.
    """
    prefix = np.asarray(prefix, dtype=np.int64)
    n_codes = len(codebook)
    if prefix.size and (prefix.min() < 0 or prefix.max() >= n_codes):
        raise DomainError("prefix may only contain code indices in [0, N)")
    dtype = params["ar.begin.W"].dtype
    B, P = prefix.shape
    d = params["ar.begin.W"].shape[1]
    begin = nx.linear(Tensor(np.broadcast_to(np.asarray(z_s, dtype=dtype), (B, 1, d)), dtype=dtype),
                      params, "ar.begin")
    parts = [begin]
    if P:
        codes = Tensor(np.asarray(codebook, dtype=dtype)[prefix], dtype=dtype)
        parts.append(nx.linear(codes, params, "ar.code"))
    seq = T.concat(parts, axis=1) + sinusoidal_encoding(P + 1, d, dtype)
    if M.ndim == 2:
        M = T.stack([M] * B, axis=0) if B > 1 else M.reshape(1, *M.shape)
    n_ctx = M.shape[1]
    h = T.concat([M, seq], axis=1)
    mask = np.broadcast_to(prefix_lm_mask(n_ctx, P + 1), (B, n_ctx + P + 1, n_ctx + P + 1))
    for i in range(_count_blocks(params, "ar.blk")):
        h = nx.prenorm_block(h, params, f"ar.blk{i}", heads, mask)
    h = nx.layernorm(h[:, n_ctx:], params["ar.ln_f.g"], params["ar.ln_f.b"])
    return nx.linear(h, params, "ar.head")


def ar_forward(params: dict, codebook: np.ndarray, z_s: np.ndarray, prefix, M: Tensor, heads: int) -> np.ndarray:
    """Next-index distribution (N+1,) after ``prefix``."""
    prefix = np.asarray(prefix, dtype=np.int64).reshape(1, -1)
    if np.any(prefix == len(codebook)):
        raise DomainError("the goal class cannot appear inside a prefix")
    logits = ar_logits(params, codebook, z_s, prefix, M, heads)
    return nx.softmax(logits[0, -1].astype(np.float64)).data


def ce_loss(params: dict, codebook: np.ndarray, z_s: np.ndarray, targets: Sequence[Sequence[int]], M: Tensor,
            heads: int) -> Tensor:
    """Teacher-forced cross entropy: per sequence sum over j of -log p(h_j), mean over the batch."""
    n_codes = len(codebook)
    for t in targets:
        if len(t) == 0 or t[-1] != n_codes:
            raise DomainError("ground-truth sequences must end with the goal class")
    B = len(targets)
    L = max(len(t) for t in targets)
    tgt = np.full((B, L), n_codes, dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    for b, t in enumerate(targets):
        tgt[b, : len(t)] = t
        valid[b, : len(t)] = True
    prefix = np.where(tgt[:, :-1] == n_codes, 0, tgt[:, :-1])
    if M.ndim == 2:
        M = T.stack([M] * B, axis=0) if B > 1 else M.reshape(1, *M.shape)
    logits = ar_logits(params, codebook, z_s, prefix, M, heads)
    logp = nx.log_softmax(logits.astype(np.float64), axis=-1)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(B)[:, None], np.arange(L)[None], tgt] = 1.0
    onehot *= valid[..., None]
    return -(logp * onehot).sum() / B


def dedup_indices(raw: Sequence[int], n_codes: int, n_h_max: int | None = None) -> np.ndarray:
    """Collapse consecutive repeats, cap length, append the goal class.

    With ``n_h_max`` the code part is thinned to at most ``n_h_max - 1``
    entries by evenly spaced picks (first and last kept).
    """
    raw = np.asarray(raw, dtype=np.int64)
    if raw.size == 0:
        raise DomainError("need at least one index")
    keep = np.concatenate([[True], raw[1:] != raw[:-1]])
    codes = raw[keep]
    if n_h_max is not None and len(codes) > n_h_max - 1:
        picks = np.unique(np.round(np.linspace(0, len(codes) - 1, n_h_max - 1)).astype(int))
        codes = codes[picks]
        keep = np.concatenate([[True], codes[1:] != codes[:-1]])
        codes = codes[keep]
    return np.append(codes, n_codes)


def ground_truth_indices(stage1, demo_traj, n_h_max: int | None = None) -> np.ndarray:
    """Index sequence label for a demo: transduce, dedup, append goal."""
    return dedup_indices(stage1.transduce(demo_traj).indices, stage1.n_codes, n_h_max)


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def beam_search(next_log_probs, n_codes: int, width: int = 4, n_h_max: int = 12) -> tuple[list[int], float]:
    """Highest-scoring goal-terminated sequence under a length cap.

    ``next_log_probs(prefixes)`` maps a list of prefixes (tuples of code
    indices) to an array (len, N+1) of next-index log-probabilities. At step
    ``n_h_max`` only the goal class may be emitted, so returned sequences have
    at most ``n_h_max`` entries. Each step keeps the ``width`` best expansions;
    those ending in the goal are complete. Returns (sequence, log-prob).
    """
    if width < 1:
        raise ConfigurationError("beam width must be at least 1")
    if n_h_max < 1:
        raise ConfigurationError("n_h_max must be at least 1")
    live: list[tuple[float, tuple]] = [(0.0, ())]
    done: list[tuple[float, tuple]] = []
    for step in range(n_h_max):
        logp = np.asarray(next_log_probs([seq for _, seq in live]), dtype=np.float64)
        classes = [n_codes] if step == n_h_max - 1 else range(n_codes + 1)
        cands = [(score + float(logp[i, c]), seq + (c,)) for i, (score, seq) in enumerate(live) for c in classes]
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, seq in cands[:width]:
            (done if seq[-1] == n_codes else live).append((score, seq))
        if not live:
            break
        # scores only decrease with length, so no live beam can overtake this
        if done and max(s for s, _ in done) >= live[0][0]:
            break
    best = min(done, key=lambda c: (-c[0], c[1]))
    return list(best[1]), best[0]


def build_gmm(stage1, indices: Sequence[int]) -> GaussianMixture:
    """Uniform mixture of the Gaussians decoded from the non-goal indices."""
    codes = [int(i) for i in indices if int(i) != stage1.n_codes]
    if not codes:
        raise EmptyPredictionError("index sequence holds no codes, only the goal class")
    return GaussianMixture([stage1.gaussian_for_index(i) for i in codes])


# -- estimator -------------------------------------------------------------

class VQStage2(BaseEstimator):
    """Predicts codebook index sequences from (costmap, start, goal).

    ``stage1`` is a fitted :class:`~vqmpt.vq_stage1.VQStage1`; it is only read.
    ``fit(X, y)`` takes :class:`PlanningQuery` inputs and goal-terminated
    index sequences, ``predict`` returns beam-search sequences.
    """

    def __init__(self, stage1=None, d_model=64, n_heads=4, patch=8, n_ctx_layers=2, n_ar_layers=3, mlp_ratio=2,
                 beam_width=4, n_h_max=12, allow_repeats=False, batch_size=32, epochs=20, warmup_steps=400,
                 lr_scale=1.0, max_grad_norm=1.0, holdout_fraction=0.1, random_state=0):
        self.stage1 = stage1
        self.d_model = d_model
        self.n_heads = n_heads
        self.patch = patch
        self.n_ctx_layers = n_ctx_layers
        self.n_ar_layers = n_ar_layers
        self.mlp_ratio = mlp_ratio
        self.beam_width = beam_width
        self.n_h_max = n_h_max
        self.allow_repeats = allow_repeats
        self.batch_size = batch_size
        self.epochs = epochs
        self.warmup_steps = warmup_steps
        self.lr_scale = lr_scale
        self.max_grad_norm = max_grad_norm
        self.holdout_fraction = holdout_fraction
        self.random_state = random_state

    def _check_config(self):
        if self.stage1 is None:
            raise ConfigurationError("stage 2 needs a fitted stage 1 model")
        check_is_fitted(self.stage1, "params_")
        if self.stage1.d_model != self.d_model:
            raise ConfigurationError("stage 1 and stage 2 must share d_model")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def n_codes(self) -> int:
        return self.stage1.n_codes

    def _codebook(self) -> np.ndarray:
        return self.stage1.codebook_

    def _z_s(self) -> np.ndarray:
        return self.stage1.params_["z_s"].data

    def init_params(self) -> dict:
        self._check_config()
        return init_stage2_params(make_rng(self.random_state), self.n_codes, self.stage1.d_factor, self.d_model,
                                  self.patch, self.n_ctx_layers, self.n_ar_layers, self.mlp_ratio)

    def _check_targets(self, y) -> list[np.ndarray]:
        out = []
        for seq in y:
            seq = np.asarray(seq, dtype=np.int64)
            N = self.n_codes
            if seq.ndim != 1 or len(seq) == 0 or seq[-1] != N or np.any(seq[:-1] == N):
                raise DomainError("index sequences must end with (and only contain once) the goal class")
            if np.any(seq < 0) or np.any(seq > N) or len(seq) > self.n_h_max:
                raise DomainError(f"index sequence {seq.tolist()} out of range or longer than n_h_max")
            out.append(seq)
        return out

    def fit(self, X: Sequence[PlanningQuery], y, X_val=None, y_val=None, callback=None):
        self._check_config()
        X = list(X)
        y = self._check_targets(y)
        if len(X) != len(y) or not X:
            raise DomainError("need matching, non-empty inputs and targets")
        rng = make_rng(self.random_state)
        self.params_ = init_stage2_params(rng, self.n_codes, self.stage1.d_factor, self.d_model, self.patch,
                                          self.n_ctx_layers, self.n_ar_layers, self.mlp_ratio)
        if X_val is None and self.holdout_fraction > 0 and len(X) > 1:
            order = rng.permutation(len(X))
            n_val = max(1, int(round(self.holdout_fraction * len(X))))
            X_val, y_val = [X[i] for i in order[:n_val]], [y[i] for i in order[:n_val]]
            X, y = [X[i] for i in order[n_val:]], [y[i] for i in order[n_val:]]
        elif X_val is not None:
            y_val = self._check_targets(y_val)
        self.history_: list[dict] = []
        self.step_log_: list[dict] = []
        self.initial_heldout_accuracy_ = self.next_index_accuracy(X_val, y_val) if X_val else float("nan")
        schedule = nx.LRSchedule(self.d_model, self.warmup_steps, self.lr_scale)
        state = nx.AdamState()
        step = 0
        codebook, z_s = self._codebook(), self._z_s()
        for epoch in range(self.epochs):
            losses = []
            order = rng.permutation(len(X))
            for start in range(0, len(order), self.batch_size):
                idx = order[start:start + self.batch_size]
                for t in self.params_.values():
                    t.grad = None
                M = context_for(self.params_, [X[i] for i in idx], self.n_heads, self.patch)
                loss_t = ce_loss(self.params_, codebook, z_s, [y[i] for i in idx], M, self.n_heads)
                loss_t.backward()
                loss = float(loss_t.data)
                grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                         for k, t in self.params_.items() if t.requires_grad}
                if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise TrainingDivergedError(f"non-finite loss/gradient at epoch {epoch}, step {step}")
                nx.clip_grad_norm(grads, self.max_grad_norm)
                step += 1
                lr = nx.lr_at(schedule, step)
                nx.adam_step(self.params_, grads, state, lr)
                losses.append(loss)
                self.step_log_.append({"epoch": epoch, "step": step, "loss": loss, "lr": lr})
            record = {"epoch": epoch, "loss": float(np.mean(losses)),
                      "heldout_accuracy": self.next_index_accuracy(X_val, y_val) if X_val else float("nan")}
            self.history_.append(record)
            logger.info("stage2 epoch %d loss %.4f heldout acc %.3f", epoch, record["loss"],
                        record["heldout_accuracy"])
            if callback is not None:
                callback(record)
        return self

    # -- inference ---------------------------------------------------------
    def context(self, query: PlanningQuery) -> Tensor:
        check_is_fitted(self, "params_")
        check_point(query.start)
        check_point(query.goal)
        return context_for(self.params_, query, self.n_heads, self.patch)

    def next_distribution(self, query: PlanningQuery, prefix=()) -> np.ndarray:
        return ar_forward(self.params_, self._codebook(), self._z_s(), prefix, self.context(query), self.n_heads)

    def _scorer(self, M: Tensor):
        codebook, z_s = self._codebook(), self._z_s()

        def next_log_probs(prefixes):
            lengths = {len(p) for p in prefixes}
            assert len(lengths) == 1
            arr = np.array(prefixes, dtype=np.int64).reshape(len(prefixes), -1)
            logits = ar_logits(self.params_, codebook, z_s, arr, M, self.n_heads).data[:, -1]
            if not self.allow_repeats and arr.shape[1]:
                # labels never repeat an index back to back, so decoding may not either
                logits = logits.copy()
                logits[np.arange(len(arr)), arr[:, -1]] = -np.inf
            return _log_softmax_np(logits)

        return next_log_probs

    def beam_search(self, query: PlanningQuery, width: int | None = None,
                    n_h_max: int | None = None) -> tuple[list[int], float]:
        width = self.beam_width if width is None else width
        n_h_max = self.n_h_max if n_h_max is None else n_h_max
        return beam_search(self._scorer(self.context(query)), self.n_codes, width, n_h_max)

    def predict(self, X: Sequence[PlanningQuery]) -> list[list[int]]:
        return [self.beam_search(q)[0] for q in X]

    def predict_gmm(self, query: PlanningQuery) -> GaussianMixture:
        return build_gmm(self.stage1, self.beam_search(query)[0])

    def next_index_accuracy(self, X, y) -> float:
        """Teacher-forced top-1 accuracy over every position of every sequence."""
        check_is_fitted(self, "params_")
        y = self._check_targets(y)
        codebook, z_s = self._codebook(), self._z_s()
        hits = total = 0
        for start in range(0, len(X), 64):
            qs, ts = list(X[start:start + 64]), y[start:start + 64]
            M = context_for(self.params_, qs, self.n_heads, self.patch)
            Lmax = max(len(t) for t in ts)
            prefix = np.zeros((len(ts), Lmax - 1), dtype=np.int64)
            for b, t in enumerate(ts):
                prefix[b, : len(t) - 1] = t[:-1]
            pred = np.argmax(ar_logits(self.params_, codebook, z_s, prefix, M, self.n_heads).data, axis=-1)
            for b, t in enumerate(ts):
                hits += int(np.sum(pred[b, : len(t)] == t))
                total += len(t)
        return hits / total

    def score(self, X, y) -> float:
        return self.next_index_accuracy(X, y)
