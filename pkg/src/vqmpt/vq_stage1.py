"""Stage 1: vector-quantized trajectory autoencoder.

A prenorm transformer encodes each waypoint of a trajectory; the encoder
output is projected to a small factorized space, l2-normalized and snapped
to the nearest row of a unit-norm codebook. An MLP decoder turns each code
into a planning-space Gaussian ``N(mu, L diag(D) L^T)``. Training minimizes

    sum_j NLL(q_j) - lam * sum_j E_{q ~ U(X)}[NLL(q)]      (reconstruction)
    + ||sg[u] - code||^2 + beta * ||u - sg[code]||^2        (codebook, commitment)

with a straight-through copy of the decoder gradient onto the encoder.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from ._validation import check_trajectories, check_trajectory, pad_batch
from .env2d import make_rng
from .exceptions import ConfigurationError, DegenerateInputError, DomainError, TrainingDivergedError
from .gaussian import GaussianParams
from .numerics import tensor as T
from .numerics.init import add_layernorm, add_linear, add_prenorm_block, sinusoidal_encoding
from .numerics.tensor import Tensor

logger = logging.getLogger(__name__)

N_DIM = 2
D_FLOOR = 1e-4


# -- parameters -----------------------------------------------------------

def init_stage1_params(rng: np.random.Generator, d_model: int = 64, n_codes: int = 32, d_factor: int = 8,
                       n_layers: int = 3, mlp_ratio: int = 2, dtype=np.float32) -> dict:
    if n_codes < 2:
        raise ConfigurationError("codebook needs at least two codes")
    if d_factor >= d_model:
        raise ConfigurationError("factorized dim must be smaller than the model dim")
    p: dict = {}
    add_linear(p, rng, "enc.in", N_DIM, d_model, dtype=dtype)
    for i in range(n_layers):
        add_prenorm_block(p, rng, f"enc.blk{i}", d_model, mlp_ratio, dtype=dtype)
    add_layernorm(p, "enc.ln_f", d_model, dtype)
    add_linear(p, rng, "enc.factor", d_model, d_factor, dtype=dtype)
    codes = rng.standard_normal((n_codes, d_factor))
    p["codebook"] = Tensor((codes / np.linalg.norm(codes, axis=1, keepdims=True)).astype(dtype),
                           requires_grad=True)
    # static start/end encodings in the transformer width; never trained
    p["z_s"] = Tensor(rng.standard_normal(d_model).astype(dtype))
    p["z_g"] = Tensor(rng.standard_normal(d_model).astype(dtype))
    # decoder: d_factor -> d_model -> d_model, then three small heads
    add_linear(p, rng, "dec.fc1", d_factor, d_model, dtype=dtype)
    add_linear(p, rng, "dec.fc2", d_model, d_model, dtype=dtype)
    add_linear(p, rng, "dec.mu", d_model, N_DIM, dtype=dtype)
    add_linear(p, rng, "dec.l", d_model, N_DIM * (N_DIM - 1) // 2, dtype=dtype)
    add_linear(p, rng, "dec.d", d_model, N_DIM, dtype=dtype)
    return p


def _lower_scatter(n: int, dtype) -> np.ndarray:
    """Constant (m, n*n) map from strictly-lower entries to a flattened matrix."""
    rows, cols = np.tril_indices(n, -1)
    P = np.zeros((len(rows), n * n), dtype=dtype)
    P[np.arange(len(rows)), rows * n + cols] = 1.0
    return P


# -- forward pieces -------------------------------------------------------

def encode(params: dict, X: np.ndarray, mask: np.ndarray | None, heads: int, side: float = 1.0) -> Tensor:
    """(B, T, 2) waypoints -> (B, T, d) latents; ``mask`` marks real steps."""
    dtype = params["enc.in.W"].dtype
    X = np.asarray(X, dtype=dtype)
    d = params["enc.in.W"].shape[1]
    h = nx.linear(Tensor(X / side, dtype=dtype), params, "enc.in")
    h = h + sinusoidal_encoding(X.shape[-2], d, dtype)
    attn_mask = None if mask is None else np.asarray(mask, dtype=bool)[..., None, :]
    if attn_mask is not None:
        attn_mask = np.broadcast_to(attn_mask, mask.shape[:-1] + (mask.shape[-1], mask.shape[-1]))
    i = 0
    while f"enc.blk{i}.ln1.g" in params:
        h = nx.prenorm_block(h, params, f"enc.blk{i}", heads, attn_mask)
        i += 1
    return nx.layernorm(h, params["enc.ln_f.g"], params["enc.ln_f.b"])


def encode_trajectory(params: dict, traj, heads: int, side: float = 1.0) -> Tensor:
    """Latent sequence (n_s, d) for one trajectory."""
    traj = check_trajectory(traj)
    return encode(params, traj, None, heads, side)


def factorize(params: dict, z: Tensor) -> Tensor:
    """Project encoder output to the factorized space and onto the unit sphere."""
    return nx.l2_normalize(nx.linear(z, params, "enc.factor"))


def quantize_many(codebook: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Exact nearest-code indices for (..., d_f) queries; ties to the lowest index."""
    q = np.asarray(queries, dtype=np.float64)
    c = np.asarray(codebook, dtype=np.float64)
    d2 = np.sum((q[..., None, :] - c) ** 2, axis=-1)
    return np.argmin(d2, axis=-1)


def quantize(codebook: np.ndarray, query) -> tuple[int, np.ndarray]:
    """(index, code) of the codebook row nearest to ``query``."""
    query = np.asarray(query, dtype=np.float64)
    if not np.any(query):
        raise DegenerateInputError("cannot quantize a zero-norm query")
    i = int(quantize_many(codebook, query))
    return i, np.asarray(codebook)[i]


def decode(params: dict, codes: Tensor, d_floor: float = D_FLOOR) -> tuple[Tensor, Tensor, Tensor]:
    """Codes (..., d_f) -> (mu (..., n), L (..., n, n), D (..., n))."""
    h = T.gelu(nx.linear(codes, params, "dec.fc1"))
    h = T.gelu(nx.linear(h, params, "dec.fc2"))
    mu = nx.linear(h, params, "dec.mu")
    low = nx.linear(h, params, "dec.l")
    dtype = low.dtype
    flat = T.matmul(low, Tensor(_lower_scatter(N_DIM, dtype), dtype=dtype))
    L = flat.reshape(*low.shape[:-1], N_DIM, N_DIM) + np.eye(N_DIM, dtype=dtype)
    D = nx.softplus(nx.linear(h, params, "dec.d")) + d_floor
    return mu, L, D


def decode_to_gaussian(params: dict, code, d_floor: float = D_FLOOR) -> GaussianParams:
    dtype = params["dec.mu.W"].dtype
    mu, L, D = decode(params, Tensor(np.asarray(code, dtype=dtype)[None], dtype=dtype), d_floor)
    return GaussianParams(mu.data[0].astype(np.float64), L.data[0].astype(np.float64),
                          D.data[0].astype(np.float64))


def entropy_nll(mu: Tensor, L: Tensor, D: Tensor, points: np.ndarray | None,
                proposal: str = "uniform") -> Tensor:
    """Per-Gaussian estimate of E_q[-log P(q)].

    ``uniform``: Monte Carlo mean over ``points`` (M, n) drawn uniformly from
    the workspace. ``self``: closed-form differential entropy of each Gaussian.
    """
    if proposal == "uniform":
        if points is None:
            raise ConfigurationError("uniform entropy proposal needs sample points")
        pts = np.asarray(points, dtype=mu.dtype).reshape((-1,) + (1,) * (mu.ndim - 1) + (mu.shape[-1],))
        return nx.gaussian_nll(pts, mu, L, D).mean(axis=0)
    if proposal == "self":
        n = mu.shape[-1]
        return (T.tsum(T.log(D), axis=-1) + n * (1.0 + math.log(2 * math.pi))) * 0.5
    raise ConfigurationError(f"unknown entropy proposal {proposal!r}")


def recon_loss(gaussians, traj, lam: float, entropy_samples: int = 256, rng=None, side: float = 1.0,
               proposal: str = "uniform") -> Tensor:
    """sum_j NLL(q_j; theta_j) - lam * sum_j E_{q~X}[NLL(q; theta_j)].

    ``gaussians`` is ``(mu, L, D)`` with one row per trajectory step.
    """
    if lam < 0:
        raise DomainError("lambda must be non-negative")
    mu, L, D = gaussians
    traj = np.asarray(traj)
    if traj.shape[0] != mu.shape[0]:
        raise DomainError(f"{mu.shape[0]} distributions for a trajectory of {traj.shape[0]} steps")
    nll = nx.gaussian_nll(traj, mu, L, D).sum()
    if lam == 0:
        return nll
    rng = make_rng(0) if rng is None else rng
    pts = rng.uniform(0.0, side, size=(entropy_samples, traj.shape[1])) if proposal == "uniform" else None
    return nll - entropy_nll(mu, L, D, pts, proposal).sum() * lam


@dataclass
class VQTerms:
    recon: Tensor
    nll: Tensor
    codebook: Tensor
    commitment: Tensor
    indices: np.ndarray
    queries: Tensor

    @property
    def total(self) -> Tensor:
        return self.recon + self.codebook + self.commitment


def vq_terms(params: dict, X: np.ndarray, mask: np.ndarray, heads: int, beta: float = 0.25, lam: float = 0.1,
             entropy_points: np.ndarray | None = None, side: float = 1.0, proposal: str = "self",
             d_floor: float = D_FLOOR) -> VQTerms:
    """All loss terms for a padded batch, each averaged over real steps."""
    if beta <= 0:
        raise ConfigurationError("commitment weight beta must be positive")
    mask = np.asarray(mask, dtype=bool)
    dtype = params["enc.in.W"].dtype
    weights = (mask / mask.sum()).astype(dtype)
    u = factorize(params, encode(params, X, mask, heads, side))
    idx = quantize_many(params["codebook"].data, u.data)
    codes = params["codebook"][idx]
    codebook_term = (T.tsum((codes - T.stop_gradient(u)) ** 2, axis=-1) * weights).sum()
    commit_term = (T.tsum((u - T.stop_gradient(codes)) ** 2, axis=-1) * weights).sum() * beta
    zq = T.straight_through(codes, u)
    mu, L, D = decode(params, zq, d_floor)
    nll = (nx.gaussian_nll(np.asarray(X, dtype=dtype), mu, L, D) * weights).sum()
    recon = nll
    if lam > 0:
        ent = entropy_nll(mu, L, D, entropy_points, proposal)
        recon = nll - (ent * weights).sum() * lam
    return VQTerms(recon, nll, codebook_term, commit_term, idx, u)


def vq_loss_and_grads(params: dict, X, mask, heads: int, beta: float = 0.25, lam: float = 0.1,
                      entropy_points=None, side: float = 1.0, proposal: str = "self",
                      d_floor: float = D_FLOOR) -> tuple[float, dict, VQTerms]:
    """Total loss, gradients of every trainable parameter, and the terms."""
    for t in params.values():
        t.grad = None
    terms = vq_terms(params, X, mask, heads, beta, lam, entropy_points, side, proposal, d_floor)
    total = terms.total
    total.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in params.items() if t.requires_grad}
    return float(total.data), grads, terms


@dataclass
class Transduction:
    """Per-step code indices plus the start/end-wrapped code sequence."""

    indices: np.ndarray
    start: np.ndarray
    codes: np.ndarray
    goal: np.ndarray

    @property
    def sequence(self) -> list[np.ndarray]:
        return [self.start, *self.codes, self.goal]

    def __len__(self) -> int:
        return len(self.indices) + 2


# -- estimator -------------------------------------------------------------

class VQStage1(TransformerMixin, BaseEstimator):
    """Learns a codebook of planning-space Gaussians from obstacle-free trajectories.

    ``transform`` maps each trajectory to its per-step code indices.
    """

    def __init__(self, d_model=64, n_codes=32, d_factor=8, n_layers=3, n_heads=4, mlp_ratio=2,
                 beta=0.25, lam=0.1, entropy_samples=256, entropy_proposal="self", d_floor=D_FLOOR,
                 side=1.0, batch_size=32, epochs=20, warmup_steps=400, lr_scale=1.0, max_grad_norm=1.0,
                 holdout_fraction=0.1, reseed_dead_codes=True, random_state=0):
        self.d_model = d_model
        self.n_codes = n_codes
        self.d_factor = d_factor
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.mlp_ratio = mlp_ratio
        self.beta = beta
        self.lam = lam
        self.entropy_samples = entropy_samples
        self.entropy_proposal = entropy_proposal
        self.d_floor = d_floor
        self.side = side
        self.batch_size = batch_size
        self.epochs = epochs
        self.warmup_steps = warmup_steps
        self.lr_scale = lr_scale
        self.max_grad_norm = max_grad_norm
        self.holdout_fraction = holdout_fraction
        self.reseed_dead_codes = reseed_dead_codes
        self.random_state = random_state

    def _check_config(self):
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.beta <= 0 or self.lam < 0:
            raise ConfigurationError("need beta > 0 and lam >= 0")

    def _init_params(self, rng) -> dict:
        return init_stage1_params(rng, self.d_model, self.n_codes, self.d_factor, self.n_layers, self.mlp_ratio)

    def fit(self, X, y=None, X_val=None, callback=None):
        """Train on trajectories ``X``; ``X_val`` (or a held-out split) tracks NLL."""
        self._check_config()
        trajs = check_trajectories(X)
        rng = make_rng(self.random_state)
        if X_val is None and self.holdout_fraction > 0 and len(trajs) > 1:
            order = rng.permutation(len(trajs))
            n_val = max(1, int(round(self.holdout_fraction * len(trajs))))
            val = [trajs[i] for i in order[:n_val]]
            trajs = [trajs[i] for i in order[n_val:]]
        else:
            val = check_trajectories(X_val) if X_val is not None else []
        self.params_ = self._init_params(rng)
        self.heldout_ = val
        self.history_: list[dict] = []
        self.step_log_: list[dict] = []
        self.initial_heldout_nll_ = self.heldout_nll(val) if val else float("nan")
        schedule = nx.LRSchedule(self.d_model, self.warmup_steps, self.lr_scale)
        state = nx.AdamState()
        step = 0
        for epoch in range(self.epochs):
            used = np.zeros(self.n_codes, dtype=bool)
            losses = []
            order = rng.permutation(len(trajs))
            last_queries = None
            for start in range(0, len(order), self.batch_size):
                batch = [trajs[i] for i in order[start:start + self.batch_size]]
                Xb, mb = pad_batch(batch)
                pts = rng.uniform(0.0, self.side, size=(self.entropy_samples, N_DIM))
                loss, grads, terms = vq_loss_and_grads(
                    self.params_, Xb, mb, self.n_heads, self.beta, self.lam, pts, self.side,
                    self.entropy_proposal, self.d_floor)
                if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise TrainingDivergedError(f"non-finite loss/gradient at epoch {epoch}, step {step}")
                nx.clip_grad_norm(grads, self.max_grad_norm)
                step += 1
                lr = nx.lr_at(schedule, step)
                nx.adam_step(self.params_, grads, state, lr)
                self._renormalize_codebook()
                used[terms.indices[mb]] = True
                last_queries = terms.queries.data[mb]
                losses.append(loss)
                self.step_log_.append({"epoch": epoch, "step": step, "loss": loss, "lr": lr,
                                       "code_usage": float(used.mean())})
            reseeded = 0
            if self.reseed_dead_codes and not used.all() and last_queries is not None and epoch < self.epochs - 1:
                dead = np.flatnonzero(~used)
                picks = rng.integers(0, len(last_queries), size=len(dead))
                self.params_["codebook"].data[dead] = last_queries[picks]
                self._renormalize_codebook()
                for buf in (state.m, state.v):
                    if "codebook" in buf:
                        buf["codebook"][dead] = 0.0
                reseeded = len(dead)
                logger.info("epoch %d: reseeded %d unused codes", epoch, reseeded)
            record = {"epoch": epoch, "loss": float(np.mean(losses)), "code_usage": float(used.mean()),
                      "heldout_nll": self.heldout_nll(val) if val else float("nan"), "reseeded": reseeded}
            self.history_.append(record)
            logger.info("stage1 epoch %d loss %.4f usage %.3f heldout %.4f", epoch, record["loss"],
                        record["code_usage"], record["heldout_nll"])
            if callback is not None:
                callback(record)
        return self

    def _renormalize_codebook(self):
        cb = self.params_["codebook"].data
        cb /= np.linalg.norm(cb.astype(np.float64), axis=1, keepdims=True).astype(cb.dtype)

    # -- inference ---------------------------------------------------------
    @property
    def codebook_(self) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.params_["codebook"].data

    def encode_trajectory(self, traj) -> np.ndarray:
        check_is_fitted(self, "params_")
        return encode_trajectory(self.params_, traj, self.n_heads, self.side).data

    def queries(self, traj) -> np.ndarray:
        """Factorized, normalized encoder outputs (n_s, d_f)."""
        check_is_fitted(self, "params_")
        traj = check_trajectory(traj)
        return factorize(self.params_, encode(self.params_, traj, None, self.n_heads, self.side)).data

    def quantize(self, query) -> tuple[int, np.ndarray]:
        return quantize(self.codebook_, query)

    def transduce(self, traj) -> Transduction:
        u = self.queries(traj)
        idx = quantize_many(self.codebook_, u)
        return Transduction(idx, self.params_["z_s"].data, self.codebook_[idx], self.params_["z_g"].data)

    def transform(self, X) -> list[np.ndarray]:
        return [self.transduce(t).indices for t in check_trajectories(X)]

    def decode_to_gaussian(self, code) -> GaussianParams:
        check_is_fitted(self, "params_")
        return decode_to_gaussian(self.params_, code, self.d_floor)

    def gaussian_for_index(self, index: int) -> GaussianParams:
        return self.decode_to_gaussian(self.codebook_[index])

    def gaussians_for_trajectory(self, traj) -> tuple[Tensor, Tensor, Tensor]:
        """Decoded (mu, L, D) for each quantized step of ``traj``."""
        u = self.queries(traj)
        idx = quantize_many(self.codebook_, u)
        return decode(self.params_, Tensor(self.codebook_[idx]), self.d_floor)

    def heldout_nll(self, X) -> float:
        """Mean per-step negative log-likelihood of ``X`` under its own decoded codes."""
        check_is_fitted(self, "params_")
        trajs = check_trajectories(X)
        total, count = 0.0, 0
        for start in range(0, len(trajs), 128):
            Xb, mb = pad_batch(trajs[start:start + 128])
            u = factorize(self.params_, encode(self.params_, Xb, mb, self.n_heads, self.side))
            idx = quantize_many(self.codebook_, u.data)
            mu, L, D = decode(self.params_, Tensor(self.codebook_[idx]), self.d_floor)
            nll = nx.gaussian_nll(Xb.astype(np.float64), mu.astype(np.float64), L.astype(np.float64),
                                  D.astype(np.float64)).data
            total += float(nll[mb].sum())
            count += int(mb.sum())
        return total / count

    def score(self, X, y=None) -> float:
        return -self.heldout_nll(X)
