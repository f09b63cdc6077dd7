"""Unconstrained Cholesky parameterization of a Gaussian weight distribution."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cpromp.errors import NumericError


@dataclass(frozen=True)
class CholeskyParams:
    """``Sigma = L L^T`` with ``L = tril(L_tril, -1) + diag(exp(gamma))``.

    The flat vector layout is ``[mu, L_tril, gamma]`` where ``L_tril`` holds the
    strictly lower entries in row-major order (``np.tril_indices(n, -1)``).
    """

    mu: np.ndarray
    L_tril: np.ndarray
    gamma: np.ndarray

    @property
    def n(self) -> int:
        return len(self.mu)

    @staticmethod
    def size(n: int) -> int:
        return n + n * (n - 1) // 2 + n

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.mu, self.L_tril, self.gamma])

    @classmethod
    def from_vector(cls, v, n: int) -> "CholeskyParams":
        v = np.asarray(v, dtype=float)
        if v.shape != (cls.size(n),):
            raise ValueError(f"expected a vector of length {cls.size(n)}, got shape {v.shape}")
        k = n * (n - 1) // 2
        return cls(v[:n].copy(), v[n:n + k].copy(), v[n + k:].copy())

    @classmethod
    def from_gaussian(cls, mu, Sigma) -> "CholeskyParams":
        mu = np.asarray(mu, dtype=float)
        Sigma = np.asarray(Sigma, dtype=float)
        n = len(mu)
        try:
            L = np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError:
            jitter = 1e-12 * max(np.trace(Sigma) / n, 1e-300)
            try:
                L = np.linalg.cholesky(Sigma + jitter * np.eye(n))
            except np.linalg.LinAlgError:
                raise NumericError("covariance is not positive definite; cannot parameterize") from None
        d = np.diag(L)
        if np.any(d <= 0):
            raise NumericError("covariance factor has a non-positive diagonal")
        rows, cols = np.tril_indices(n, -1)
        return cls(mu.copy(), L[rows, cols].copy(), np.log(d))

    def cholesky(self) -> np.ndarray:
        n = self.n
        L = np.diag(np.exp(self.gamma))
        rows, cols = np.tril_indices(n, -1)
        L[rows, cols] = self.L_tril
        return L

    def covariance(self) -> np.ndarray:
        L = self.cholesky()
        return L @ L.T

    def half_logdet(self) -> float:
        return float(np.sum(self.gamma))
