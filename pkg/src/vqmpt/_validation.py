"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DomainError


def check_trajectory(traj, dim: int = 2) -> np.ndarray:
    """Return ``traj`` as a finite float64 (n_s, dim) array with n_s >= 1."""
    arr = np.asarray(traj, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise DomainError(f"trajectory must be a non-empty (n_s, {dim}) array, got shape {arr.shape}")
    return check_array(arr, ensure_min_features=dim, ensure_all_finite=True, dtype=np.float64)


def check_trajectories(X, dim: int = 2) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    out = [check_trajectory(t, dim) for t in X]
    if not out:
        raise DomainError("need at least one trajectory")
    return out


def check_point(q, dim: int = 2) -> np.ndarray:
    arr = np.asarray(q, dtype=np.float64).reshape(-1)
    if arr.shape != (dim,) or not np.all(np.isfinite(arr)):
        raise DomainError(f"expected a finite {dim}-vector, got {q!r}")
    return arr


def pad_batch(trajs: list[np.ndarray], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack ragged (n_i, d) arrays into (B, T, d) plus a (B, T) validity mask."""
    T = max(len(t) for t in trajs)
    d = trajs[0].shape[1]
    X = np.zeros((len(trajs), T, d), dtype=dtype)
    mask = np.zeros((len(trajs), T), dtype=bool)
    for i, t in enumerate(trajs):
        X[i, : len(t)] = t
        mask[i, : len(t)] = True
    return X, mask
