"""Planar forward kinematics and unscented-transform moment propagation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import jax.numpy as jnp
import numpy as np
from jax import lax

from cpromp.errors import NumericError, ProblemFormatError
from cpromp.promp import GaussianMoments, ProMP, marginal_moments

CHOL_JITTER = 1e-12


@dataclass(frozen=True)
class KinematicChain:
    """Planar serial chain with named points of interest.

    ``pois`` maps a name to the 1-based index of the link whose end point it
    denotes. ``link1``..``linkN`` and ``end`` are always available. A chain with
    no links is the identity map used for Cartesian-space primitives.
    """

    link_lengths: tuple[float, ...] = ()
    base: tuple[float, float, float] = (0.0, 0.0, 0.0)
    pois: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = tuple(float(x) for x in self.link_lengths)
        if any(l <= 0 for l in lengths):
            raise ValueError("link lengths must be positive")
        base = tuple(float(x) for x in self.base)
        if len(base) != 3:
            raise ValueError("base must be (x, y, rotation)")
        pois = {f"link{j}": j for j in range(1, len(lengths) + 1)}
        if lengths:
            pois["end"] = len(lengths)
        for name, j in dict(self.pois).items():
            if not 1 <= int(j) <= len(lengths):
                raise ValueError(f"point of interest {name!r} refers to link {j}, chain has {len(lengths)}")
            pois[name] = int(j)
        object.__setattr__(self, "link_lengths", lengths)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "pois", pois)

    @classmethod
    def identity(cls) -> "KinematicChain":
        return cls()

    @property
    def is_identity(self) -> bool:
        return not self.link_lengths

    @property
    def n_links(self) -> int:
        return len(self.link_lengths)

    def link_index(self, poi: str | None) -> int:
        if self.is_identity:
            return 0
        if poi is None:
            return self.n_links
        try:
            return self.pois[poi]
        except KeyError:
            raise KeyError(f"unknown point of interest {poi!r}; known: {sorted(self.pois)}") from None

    def to_dict(self) -> dict:
        if self.is_identity:
            return {"identity": True}
        named = {k: v for k, v in self.pois.items() if not (k == "end" or k.startswith("link"))}
        return {"links": list(self.link_lengths), "base": list(self.base), "pois": named}

    @classmethod
    def from_dict(cls, d: dict) -> "KinematicChain":
        if d.get("identity") or not d.get("links"):
            return cls.identity()
        try:
            return cls(tuple(d["links"]), tuple(d.get("base", (0.0, 0.0, 0.0))), dict(d.get("pois", {})))
        except (TypeError, ValueError) as exc:
            raise ProblemFormatError(f"malformed chain: {exc}") from None


def fk_jnp(q, lengths, base, link: int):
    """Position of the end of link ``link`` for joint angles ``q[..., :n]`` (jax)."""
    ang = base[2] + jnp.cumsum(q[..., :link], axis=-1)
    l = lengths[:link]
    x = base[0] + jnp.sum(l * jnp.cos(ang), axis=-1)
    y = base[1] + jnp.sum(l * jnp.sin(ang), axis=-1)
    return jnp.stack([x, y], axis=-1)


def point_map(chain: KinematicChain, poi: str | None):
    """jax-traceable map from a joint (or Cartesian) state to the point of interest."""
    if chain.is_identity:
        return lambda z: z
    link = chain.link_index(poi)
    lengths = jnp.asarray(chain.link_lengths)
    base = jnp.asarray(chain.base)
    return lambda q: fk_jnp(q, lengths, base, link)


def forward_kinematics(chain: KinematicChain, q, poi: str = "end") -> np.ndarray:
    """Cartesian position of a point of interest for joint configuration ``q``."""
    q = np.asarray(q, dtype=float)
    if chain.is_identity:
        return q.copy()
    if q.shape[-1] != chain.n_links:
        raise ValueError(f"expected {chain.n_links} joint angles, got {q.shape[-1]}")
    return np.asarray(point_map(chain, poi)(jnp.asarray(q)))


@dataclass(frozen=True)
class UTConfig:
    """Spread of the unscented transform.

    ``alpha_ut=None`` selects ``sqrt((n + 2) / n)`` for an ``n``-dimensional
    input, which reproduces the variance of squared distances of isotropic
    Gaussians exactly; ``alpha_ut=1`` is the cubature rule without a center point.
    """

    alpha_ut: float | None = None

    def __post_init__(self):
        if self.alpha_ut is not None and not self.alpha_ut > 0:
            raise ValueError("alpha_ut must be positive")

    def alpha(self, n: int) -> float:
        if self.alpha_ut is None:
            return math.sqrt((n + 2.0) / n)
        return float(self.alpha_ut)


def ut_weights(n: int, alpha: float) -> np.ndarray:
    """Weights of the ``2n + 1`` sigma points (center first); they sum to one."""
    w = np.full(2 * n + 1, 1.0 / (2.0 * alpha**2 * n))
    w[0] = 1.0 - 1.0 / alpha**2
    return w


def safe_cholesky(cov):
    """Batched Cholesky that retries with a small diagonal jitter where it fails."""
    eye = jnp.eye(cov.shape[-1])
    first = lax.stop_gradient(jnp.linalg.cholesky(cov))
    bad = jnp.any(jnp.isnan(first), axis=(-2, -1))
    cov = jnp.where(bad[..., None, None], cov + CHOL_JITTER * eye, cov)
    return jnp.linalg.cholesky(cov)


def sigma_points(mean, cov, alpha: float):
    """Sigma points ``mean +- alpha sqrt(n) L[:, i]``, shape ``(..., 2n + 1, n)``."""
    n = mean.shape[-1]
    L = safe_cholesky(cov)
    offs = alpha * math.sqrt(n) * jnp.swapaxes(L, -1, -2)  # rows are scaled columns of L
    m = mean[..., None, :]
    return jnp.concatenate([m, m + offs, m - offs], axis=-2)


def unscented(mean, cov, g: Callable, alpha: float):
    """Propagate batched Gaussian moments through ``g`` (jax).

    ``g`` maps ``(..., n)`` to ``(..., k)``. Returns output mean ``(..., k)`` and
    covariance ``(..., k, k)``.
    """
    n = mean.shape[-1]
    w = jnp.asarray(ut_weights(n, alpha))
    pts = sigma_points(mean, cov, alpha)
    y = g(pts)
    ym = jnp.einsum("s,...sk->...k", w, y)
    dy = y - ym[..., None, :]
    yc = jnp.einsum("s,...sk,...sl->...kl", w, dy, dy)
    return ym, 0.5 * (yc + jnp.swapaxes(yc, -1, -2))


def ut_propagate(moments: GaussianMoments, g: Callable, cfg: UTConfig | None = None) -> GaussianMoments:
    """Unscented-transform approximation of the moments of ``g(z)``, ``z ~ moments``.

    ``g`` is called on single state vectors and must return a vector.
    """
    cfg = cfg or UTConfig()
    n = moments.dim
    alpha = cfg.alpha(n)
    L = np.asarray(safe_cholesky(jnp.asarray(moments.cov)))
    if np.any(~np.isfinite(L)):
        raise NumericError("matrix square root of the input covariance failed")
    offs = alpha * math.sqrt(n) * L.T
    pts = np.vstack([moments.mean, moments.mean + offs, moments.mean - offs])
    y = np.asarray([np.atleast_1d(np.asarray(g(z), dtype=float)) for z in pts])
    w = ut_weights(n, alpha)
    ym = w @ y
    dy = y - ym
    cov = (w[:, None] * dy).T @ dy
    return GaussianMoments(ym, 0.5 * (cov + cov.T))


def task_moments(p: ProMP, t: float, chain: KinematicChain, poi: str = "end",
                 cfg: UTConfig | None = None) -> GaussianMoments:
    """Gaussian approximation of a point of interest at time ``t``."""
    z = marginal_moments(p, t)
    if chain.is_identity:
        return z
    if p.D != chain.n_links:
        raise ValueError(f"ProMP has D={p.D} coordinates but the chain has {chain.n_links} links")
    f = point_map(chain, poi)
    return ut_propagate(z, lambda q: np.asarray(f(jnp.asarray(q))), cfg)
