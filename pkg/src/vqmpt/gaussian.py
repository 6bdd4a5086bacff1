"""Gaussians in LDL^T form and uniform-weight mixtures of them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import EmptyPredictionError, PositiveDefinitenessError


@dataclass(frozen=True)
class GaussianParams:
    """N(mu, L diag(D) L^T) with L unit lower-triangular and D > 0."""

    mu: np.ndarray
    L: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.D) <= 0):
            raise PositiveDefinitenessError("D entries must be positive")

    @property
    def dim(self) -> int:
        return len(self.mu)

    @property
    def covariance(self) -> np.ndarray:
        return self.L @ np.diag(self.D) @ self.L.T

    def nll(self, q) -> np.ndarray:
        """-log density at ``q`` (..., n) via forward substitution."""
        r = np.asarray(q, dtype=np.float64) - self.mu
        y = np.empty_like(r)
        for i in range(self.dim):
            y[..., i] = r[..., i] - y[..., :i] @ self.L[i, :i]
        maha = np.sum(y * y / self.D, axis=-1)
        return 0.5 * (maha + np.sum(np.log(self.D)) + self.dim * math.log(2 * math.pi))

    def density(self, q) -> np.ndarray:
        return np.exp(-self.nll(q))

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        eps = rng.standard_normal(self.dim if size is None else (size, self.dim))
        return self.mu + (eps * np.sqrt(self.D)) @ self.L.T


class GaussianMixture:
    """Uniform-weight mixture; sampling picks a component uniformly, then
    draws ``mu + L sqrt(D) eps``."""

    def __init__(self, components: list[GaussianParams]):
        if not components:
            raise EmptyPredictionError("mixture needs at least one component")
        self.components = list(components)

    def __len__(self) -> int:
        return len(self.components)

    @property
    def weights(self) -> np.ndarray:
        return np.full(len(self), 1.0 / len(self))

    @property
    def mean(self) -> np.ndarray:
        return np.mean([c.mu for c in self.components], axis=0)

    @property
    def covariance(self) -> np.ndarray:
        m = self.mean
        second = np.mean([c.covariance + np.outer(c.mu, c.mu) for c in self.components], axis=0)
        return second - np.outer(m, m)

    def density(self, q) -> np.ndarray:
        return np.mean([c.density(q) for c in self.components], axis=0)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        k = int(rng.integers(len(self.components)))
        return self.components[k].sample(rng)

    def sample_many(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.array([self.sample(rng) for _ in range(size)])
