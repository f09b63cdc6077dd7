"""Probabilistic trajectory constraints and their differentiable satisfaction probabilities.

Each constraint family knows how to turn itself into a *kernel*: a jax function
of the weight distribution that returns the approximate satisfaction
probability ``F`` for every (constraint, time) term it contributes. The
Lagrangian in :mod:`cpromp.objective` uses these kernels directly; the public
``*_satisfaction`` helpers evaluate the same kernels for a single ProMP.

Numeric geometry (centers, radii, bounds, confidences) is passed to kernels as
data so that problems differing only in geometry share one compiled function.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, ClassVar, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import gammainc, gammaincc, ndtr

from cpromp.errors import ConstraintError, DomainError
from cpromp.kinematics import KinematicChain, UTConfig, point_map, unscented
from cpromp.promp import BasisConfig, ProMP, basis_matrix

DEGENERATE_VAR = 1e-14

# -- constraint descriptions ----------------------------------------------------------


@dataclass(frozen=True, kw_only=True)
class Constraint:
    """Common fields of every constraint.

    ``support`` is a closed time interval ``(t_start, t_end)``; ``None`` means the
    whole horizon. ``indices`` selects explicit grid indices and overrides
    ``support``. ``lambda0=None`` picks 100 for constraints pinned to the first
    or last grid time and 1 otherwise.
    """

    kind: ClassVar[str] = "constraint"
    path: ClassVar[bool] = False  # one multiplier for the whole support

    alpha: float = 0.999
    support: tuple[float, float] | None = None
    indices: tuple[int, ...] | None = None
    eta: float = 0.5
    lambda0: float | None = None
    name: str | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConstraintError(f"alpha must lie in (0, 1), got {self.alpha}", self.name)
        if self.eta <= 0:
            raise ConstraintError("eta must be positive", self.name)
        if self.support is not None:
            s = tuple(float(x) for x in self.support)
            if len(s) != 2 or s[0] > s[1]:
                raise ConstraintError(f"support must be (t_start, t_end), got {self.support}", self.name)
            object.__setattr__(self, "support", s)
        if self.indices is not None:
            if len(self.indices) == 0:
                raise ConstraintError("empty support", self.name)
            object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    def support_indices(self, times: np.ndarray) -> np.ndarray:
        n = len(times)
        if self.indices is not None:
            idx = np.asarray(self.indices)
            if idx.min() < 0 or idx.max() >= n:
                raise ConstraintError(f"grid index out of range [0, {n})", self.name)
            return idx
        if self.support is None:
            return np.arange(n)
        a, b = self.support
        T = times[-1]
        if a < -1e-9 * T or b > T * (1 + 1e-9):
            raise ConstraintError(f"support {self.support} not inside [0, {T}]", self.name)
        tol = 1e-9 * max(T, 1.0)
        idx = np.flatnonzero((times >= a - tol) & (times <= b + tol))
        if idx.size == 0:
            idx = np.array([int(np.argmin(np.abs(times - 0.5 * (a + b))))])
        return idx

    def default_lambda0(self, times: np.ndarray) -> float:
        if self.lambda0 is not None:
            return float(self.lambda0)
        idx = self.support_indices(times)
        if idx.size == 1 and idx[0] in (0, len(times) - 1):
            return 100.0
        return 1.0

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = [list(x) if isinstance(x, tuple) else x for x in v]
            elif isinstance(v, float) and math.isinf(v) and f.name in ("lower", "upper"):
                v = None  # open bound; keeps the file strict JSON
            d[f.name] = v
        return d


def _vec2(v, what, name):
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.size != 2:
        raise ConstraintError(f"{what} must be a 2-D vector", name)
    return tuple(a)


@dataclass(frozen=True, kw_only=True)
class JointLimit(Constraint):
    """``P(lower < z^joint_t <= upper) >= alpha``; either bound may be infinite.

    Bounds are scalars or sequences with one value per support time.
    """

    kind: ClassVar[str] = "joint_limit"
    joint: int
    lower: float | tuple[float, ...] = -math.inf
    upper: float | tuple[float, ...] = math.inf
    block: int = 0

    def __post_init__(self):
        super().__post_init__()
        for f in ("lower", "upper"):
            v = getattr(self, f)
            if np.ndim(v):
                object.__setattr__(self, f, tuple(float(x) for x in v))
            else:
                object.__setattr__(self, f, float(v))
        if np.all(np.isinf(self.lower)) and np.all(np.isinf(self.upper)):
            raise ConstraintError("joint limit needs at least one finite bound", self.name)


@dataclass(frozen=True, kw_only=True)
class Smoothness(Constraint):
    """``P(R(w) <= bound) >= alpha`` for the mean squared acceleration ``R`` over the support."""

    kind: ClassVar[str] = "smoothness"
    path: ClassVar[bool] = True
    bound: float
    joint_weights: tuple[float, ...] | None = None
    block: int | None = None

    def __post_init__(self):
        super().__post_init__()
        if not self.bound > 0:
            raise ConstraintError("smoothness bound must be positive", self.name)


@dataclass(frozen=True, kw_only=True)
class Hyperplane(Constraint):
    """Virtual wall ``P(n^T (x_t - b) <= 0) >= alpha`` on a point of interest."""

    kind: ClassVar[str] = "hyperplane"
    normal: tuple[float, float]
    bias: tuple[float, float]
    poi: str = "end"
    block: int = 0

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "normal", _vec2(self.normal, "normal", self.name))
        object.__setattr__(self, "bias", _vec2(self.bias, "bias", self.name))
        if np.linalg.norm(self.normal) == 0:
            raise ConstraintError("hyperplane normal must be nonzero", self.name)


@dataclass(frozen=True, kw_only=True)
class _Ball(Constraint):
    center: tuple[float, float]
    radius: float
    poi: str = "end"
    block: int = 0

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "center", _vec2(self.center, "center", self.name))
        if not self.radius > 0:
            raise ConstraintError("radius must be positive", self.name)


@dataclass(frozen=True, kw_only=True)
class Waypoint(_Ball):
    """``P(|x_t - center|^2 <= radius^2) >= alpha`` at every support time."""

    kind: ClassVar[str] = "waypoint"


@dataclass(frozen=True, kw_only=True)
class Repeller(_Ball):
    """``P(|x_t - center|^2 > radius^2) >= alpha`` at every support time."""

    kind: ClassVar[str] = "repeller"


@dataclass(frozen=True, kw_only=True)
class UnboundWaypoint(_Ball):
    """``max_t P(|x_t - center|^2 <= radius^2) >= alpha`` over the support."""

    kind: ClassVar[str] = "unbound_waypoint"
    path: ClassVar[bool] = True


@dataclass(frozen=True, kw_only=True)
class NonConvexCorner(Constraint):
    """Keep points out of the corner ``{n1^T (x - b1) >= 0 and n2^T (x - b2) >= 0}``."""

    kind: ClassVar[str] = "corner"
    normal1: tuple[float, float]
    bias1: tuple[float, float]
    normal2: tuple[float, float]
    bias2: tuple[float, float]
    pois: tuple[str, ...] = ("end",)
    block: int = 0

    def __post_init__(self):
        super().__post_init__()
        for f in ("normal1", "bias1", "normal2", "bias2"):
            object.__setattr__(self, f, _vec2(getattr(self, f), f, self.name))
        if np.linalg.norm(self.normal1) == 0 or np.linalg.norm(self.normal2) == 0:
            raise ConstraintError("corner normals must be nonzero", self.name)
        pois = (self.pois,) if isinstance(self.pois, str) else tuple(self.pois)
        object.__setattr__(self, "pois", pois)


@dataclass(frozen=True, kw_only=True)
class MutualAvoidance(Constraint):
    """``P(|x^1_t - x^2_t|^2 > distance^2) >= alpha`` between points on two blocks."""

    kind: ClassVar[str] = "mutual"
    block1: int
    poi1: str
    block2: int
    poi2: str
    distance: float

    def __post_init__(self):
        super().__post_init__()
        if not self.distance > 0:
            raise ConstraintError("distance must be positive", self.name)
        if self.block1 == self.block2:
            raise ConstraintError("mutual avoidance needs two different blocks", self.name)


CONSTRAINT_KINDS: dict[str, type[Constraint]] = {
    cls.kind: cls
    for cls in (JointLimit, Smoothness, Hyperplane, Waypoint, Repeller, UnboundWaypoint,
                NonConvexCorner, MutualAvoidance)
}


def constraint_from_dict(d: dict) -> Constraint:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in CONSTRAINT_KINDS:
        raise ConstraintError(f"unknown constraint kind {kind!r}; expected one of {sorted(CONSTRAINT_KINDS)}")
    cls = CONSTRAINT_KINDS[kind]
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConstraintError(f"unknown field(s) {sorted(unknown)} for kind {kind!r}", d.get("name"))
    for key in ("support", "indices", "center", "normal", "bias", "normal1", "normal2", "bias1", "bias2",
                "joint_weights", "pois"):
        if key in d and isinstance(d[key], list):
            d[key] = tuple(d[key])
    for key in ("lower", "upper"):
        if key in d and d[key] is None:
            d[key] = math.inf if key == "upper" else -math.inf
        elif key in d and isinstance(d[key], list):
            d[key] = tuple(d[key])
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConstraintError(f"bad fields for kind {kind!r}: {exc}", d.get("name")) from None


# -- Gamma moment matching --------------------------------------------------------------


@dataclass(frozen=True)
class GammaFit:
    """Gamma distribution with a given mean and variance (shape/rate form).

    A degenerate fit (variance numerically zero) is a point mass at ``mean``.
    """

    shape: float
    rate: float
    mean: float = math.nan
    degenerate: bool = False

    def cdf(self, x: float) -> float:
        if self.degenerate:
            return 1.0 if x >= self.mean else 0.0
        return float(gammainc(self.shape, self.rate * x)) if x > 0 else 0.0

    def sf(self, x: float) -> float:
        if self.degenerate:
            return 0.0 if x >= self.mean else 1.0
        return float(gammaincc(self.shape, self.rate * x)) if x > 0 else 1.0

    @property
    def var(self) -> float:
        return 0.0 if self.degenerate else self.shape / self.rate**2


def gamma_fit(mean: float, var: float) -> GammaFit:
    """Moment-matched Gamma: ``shape = mean^2 / var``, ``rate = mean / var``."""
    if not mean > 0:
        raise DomainError("gamma_fit needs a positive mean")
    if var < 0:
        raise DomainError("gamma_fit needs a non-negative variance")
    if var < DEGENERATE_VAR * mean**2:
        return GammaFit(math.inf, math.inf, float(mean), True)
    return GammaFit(mean**2 / var, mean / var, float(mean), False)


def _safe(x, bad, fill=1.0):
    return jnp.where(bad, fill, x)


def gamma_cdf_moments(mean, var, x):
    """``P(R <= x)`` for ``R`` Gamma-matched to ``(mean, var)``, with the degenerate fallback (jax)."""
    mean, var = jnp.asarray(mean, dtype=float), jnp.asarray(var, dtype=float)
    deg = var < DEGENERATE_VAR * jnp.maximum(1.0, mean**2)
    deg = deg | (mean <= 0)
    m = _safe(mean, deg)
    v = _safe(var, deg)
    shape = m * m / v
    rate = m / v
    p = gammainc(shape, rate * x)
    return jnp.where(deg, (mean <= x).astype(p.dtype), p)


def gamma_sf_moments(mean, var, x):
    """``P(R > x)`` counterpart of :func:`gamma_cdf_moments` (computed with gammaincc)."""
    mean, var = jnp.asarray(mean, dtype=float), jnp.asarray(var, dtype=float)
    deg = var < DEGENERATE_VAR * jnp.maximum(1.0, mean**2)
    deg = deg | (mean <= 0)
    m = _safe(mean, deg)
    v = _safe(var, deg)
    p = gammaincc(m * m / v, (m / v) * x)
    return jnp.where(deg, (mean > x).astype(p.dtype), p)


def normal_cdf_moments(mean, var, x):
    """``P(Y <= x)`` for ``Y ~ N(mean, var)``; ``x`` may be infinite (jax)."""
    mean, var = jnp.asarray(mean, dtype=float), jnp.asarray(var, dtype=float)
    deg = var < DEGENERATE_VAR * jnp.maximum(1.0, mean**2)
    s = jnp.sqrt(_safe(var, deg))
    x = jnp.asarray(x, dtype=jnp.result_type(mean, float))
    finite = jnp.isfinite(x)
    # keep infinite bounds out of the differentiated branch, otherwise inf * 0 poisons the gradient
    p = ndtr((jnp.where(finite, x, mean) - mean) / s)
    p = jnp.where(finite, p, (x > 0).astype(p.dtype))
    return jnp.where(deg, (mean <= x).astype(p.dtype), p)


# -- smoothness -------------------------------------------------------------------------


def smoothness_matrix(basis: BasisConfig, support: tuple[float, float] | None = None,
                      n_panels: int | None = None) -> np.ndarray:
    """``(1/|S|) * integral over S of phi''_t phi''_t^T dt`` by composite Simpson quadrature."""
    a, b = (0.0, basis.T) if support is None else (float(support[0]), float(support[1]))
    if not b > a:
        raise DomainError("smoothness support must have positive length")
    basis.check_time([a, b])
    if n_panels is None:
        # resolve the narrowest bump (width sqrt(h) in phase units) with >= 40 nodes
        per_width = 40.0 * (b - a) / (basis.T * math.sqrt(basis.h))
        n_panels = max(200, int(math.ceil(per_width)))
    n_panels += n_panels % 2
    t = np.linspace(a, b, n_panels + 1)
    _, dd = basis_matrix(basis, t)
    w = np.ones(n_panels + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w *= (b - a) / (3.0 * n_panels)
    Phi = (dd * w[:, None]).T @ dd / (b - a)
    return 0.5 * (Phi + Phi.T)


def block_smoothness_matrix(Phi: np.ndarray, weights: Sequence[float]) -> np.ndarray:
    """Block-diagonal ``diag(c_j * Phi)`` acting on row-blocked weights."""
    return np.kron(np.diag(np.asarray(weights, dtype=float)), Phi)


def quad_form_moments(mu, Sigma, A):
    """Mean and variance of ``w^T A w`` for ``w ~ N(mu, Sigma)`` and symmetric ``A`` (jax or numpy)."""
    xp = jnp if isinstance(mu, jax.Array) or isinstance(Sigma, jax.Array) else np
    AS = A @ Sigma
    Amu = A @ mu
    mean = mu @ Amu + xp.trace(AS)
    var = 4.0 * Amu @ Sigma @ Amu + 2.0 * xp.sum(AS * AS.T)
    return mean, var


def smoothness_moments(p: ProMP, Phi: np.ndarray, joint_weights=None) -> tuple[float, float]:
    """Mean and variance of the weighted smoothness functional ``sum_j c_j w_j^T Phi w_j``."""
    if Phi.shape != (p.M, p.M):
        raise ValueError(f"Phi must be {p.M} x {p.M}")
    c = np.ones(p.D) if joint_weights is None else np.asarray(joint_weights, dtype=float)
    if c.shape != (p.D,):
        raise ValueError(f"joint_weights must have length D={p.D}")
    if np.any(c < 0):
        raise ValueError("joint_weights must be non-negative")
    A = block_smoothness_matrix(Phi, c)
    mean, var = quad_form_moments(p.mu_w, p.Sigma_w, A)
    return float(max(mean, 0.0)), float(max(var, 0.0))


# -- kernels ----------------------------------------------------------------------------


@dataclass
class Context:
    """Everything a kernel needs besides the weight distribution."""

    times: np.ndarray
    basis: BasisConfig
    blocks: tuple[int, ...]
    chains: tuple[KinematicChain, ...]
    ut: UTConfig = dataclasses.field(default_factory=UTConfig)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.blocks = tuple(int(b) for b in self.blocks)
        self.chains = tuple(self.chains)
        if len(self.chains) != len(self.blocks):
            raise ValueError("need one chain per block")
        for D_b, ch in zip(self.blocks, self.chains):
            if not ch.is_identity and ch.n_links != D_b:
                raise ValueError(f"chain with {ch.n_links} links attached to a block of {D_b} coordinates")

    @property
    def D(self) -> int:
        return sum(self.blocks)

    def coords(self, block: int) -> np.ndarray:
        if not 0 <= block < len(self.blocks):
            raise IndexError(f"block {block} out of range")
        start = sum(self.blocks[:block])
        return np.arange(start, start + self.blocks[block])


@dataclass
class Kernel:
    """Compiled view of one constraint.

    ``fn(mean, cov, mu, Sigma, data)`` returns the satisfaction probabilities of
    all ``n_terms`` terms, where ``mean``/``cov`` are the marginal moments of
    ``z_t`` on the full grid.
    """

    key: tuple
    data: dict
    fn: Callable
    t_index: np.ndarray  # grid index of each term (-1 for path terms)
    labels: list[str]

    @property
    def n_terms(self) -> int:
        return len(self.t_index)


def _block_moments(mean, cov, idx, coords):
    m = mean[idx][:, coords]
    S = cov[idx][:, coords][:, :, coords]
    return m, S


def _point_moments(ctx: Context, mean, cov, idx, block, poi):
    """Moments of a point of interest at grid indices ``idx`` (UT unless the chain is the identity)."""
    coords = ctx.coords(block)
    m, S = _block_moments(mean, cov, idx, coords)
    chain = ctx.chains[block]
    if chain.is_identity:
        return m, S
    f = point_map(chain, poi)
    return unscented(m, S, f, ctx.ut.alpha(len(coords)))


def _sqdist_moments(ctx: Context, m, S, g):
    """UT moments of the scalar ``g(state)`` (squared distance)."""
    am, aS = unscented(m, S, lambda z: g(z)[..., None], ctx.ut.alpha(m.shape[-1]))
    return am[..., 0], aS[..., 0, 0]


def _label(c: Constraint, k: int) -> str:
    return c.name if c.name else f"{c.kind}#{k}"


def build_kernel(c: Constraint, ctx: Context, k: int = 0) -> Kernel:
    """Translate a constraint into a :class:`Kernel` for the given context."""
    builder = _BUILDERS.get(type(c))
    if builder is None:
        raise ConstraintError(f"no kernel for constraint type {type(c).__name__}", c.name)
    label = _label(c, k)
    try:
        return builder(c, ctx, label)
    except (IndexError, KeyError, ValueError) as exc:
        raise ConstraintError(str(exc), label) from None


def _term_labels(label, idx):
    return [f"{label}@{int(i)}" for i in idx]


def _joint_limit_kernel(c: JointLimit, ctx: Context, label: str) -> Kernel:
    idx = c.support_indices(ctx.times)
    coords = ctx.coords(c.block)
    if not 0 <= c.joint < len(coords):
        raise IndexError(f"joint {c.joint} out of range for block {c.block}")
    coord = int(coords[c.joint])
    lo = np.broadcast_to(np.asarray(c.lower, dtype=float), idx.shape).copy()
    hi = np.broadcast_to(np.asarray(c.upper, dtype=float), idx.shape).copy()
    if np.any(lo >= hi):
        raise ValueError("lower bound must be below upper bound")
    data = {"lo": jnp.asarray(lo), "hi": jnp.asarray(hi)}

    def fn(mean, cov, mu, Sigma, d):
        m = mean[idx, coord]
        v = cov[idx, coord, coord]
        return normal_cdf_moments(m, v, d["hi"]) - normal_cdf_moments(m, v, d["lo"])

    key = ("joint_limit", tuple(idx), coord)
    return Kernel(key, data, fn, idx, _term_labels(label, idx))


def _hyperplane_kernel(c: Hyperplane, ctx: Context, label: str) -> Kernel:
    idx = c.support_indices(ctx.times)
    ctx.chains[c.block].link_index(c.poi)
    data = {"n": jnp.asarray(c.normal), "b": jnp.asarray(c.bias)}

    def fn(mean, cov, mu, Sigma, d):
        xm, xS = _point_moments(ctx, mean, cov, idx, c.block, c.poi)
        n = d["n"]
        cm = (xm - d["b"]) @ n
        cv = jnp.einsum("i,tij,j->t", n, xS, n)
        return normal_cdf_moments(cm, cv, 0.0)

    key = ("hyperplane", tuple(idx), c.block, c.poi)
    return Kernel(key, data, fn, idx, _term_labels(label, idx))


def _ball_probs(ctx: Context, mean, cov, idx, block, poi, center, radius, repel: bool):
    coords = ctx.coords(block)
    m, S = _block_moments(mean, cov, idx, coords)
    f = point_map(ctx.chains[block], poi)
    rm, rv = _sqdist_moments(ctx, m, S, lambda z: jnp.sum((f(z) - center) ** 2, axis=-1))
    if repel:
        return gamma_sf_moments(rm, rv, radius**2)
    return gamma_cdf_moments(rm, rv, radius**2)


def _ball_kernel(c: _Ball, ctx: Context, label: str) -> Kernel:
    idx = c.support_indices(ctx.times)
    ctx.chains[c.block].link_index(c.poi)
    repel = isinstance(c, Repeller)
    data = {"x": jnp.asarray(c.center), "r": jnp.asarray(float(c.radius))}

    def fn(mean, cov, mu, Sigma, d):
        return _ball_probs(ctx, mean, cov, idx, c.block, c.poi, d["x"], d["r"], repel)

    key = (c.kind, tuple(idx), c.block, c.poi)
    return Kernel(key, data, fn, idx, _term_labels(label, idx))


def _unbound_kernel(c: UnboundWaypoint, ctx: Context, label: str) -> Kernel:
    idx = c.support_indices(ctx.times)
    ctx.chains[c.block].link_index(c.poi)
    data = {"x": jnp.asarray(c.center), "r": jnp.asarray(float(c.radius))}

    def fn(mean, cov, mu, Sigma, d):
        F = _ball_probs(ctx, mean, cov, idx, c.block, c.poi, d["x"], d["r"], False)
        # argmax is held fixed for differentiation; ties resolve to the lowest index
        j = jnp.argmax(lax_stop(F))
        return F[j][None]

    key = ("unbound_waypoint", tuple(idx), c.block, c.poi)
    return Kernel(key, data, fn, np.array([-1]), [label])


def lax_stop(x):
    return jax.lax.stop_gradient(x)


def _corner_kernel(c: NonConvexCorner, ctx: Context, label: str) -> Kernel:
    idx = c.support_indices(ctx.times)
    for poi in c.pois:
        ctx.chains[c.block].link_index(poi)
    data = {"n1": jnp.asarray(c.normal1), "b1": jnp.asarray(c.bias1),
            "n2": jnp.asarray(c.normal2), "b2": jnp.asarray(c.bias2)}

    def fn(mean, cov, mu, Sigma, d):
        out = []
        for poi in c.pois:
            xm, xS = _point_moments(ctx, mean, cov, idx, c.block, poi)
            sides = []
            for n, b in ((d["n1"], d["b1"]), (d["n2"], d["b2"])):
                cm = (xm - b) @ n
                cv = jnp.einsum("i,tij,j->t", n, xS, n)
                # P(n^T (x - b) >= 0) = P(-n^T (x - b) <= 0)
                sides.append(normal_cdf_moments(-cm, cv, 0.0))
            out.append(1.0 - sides[0] * sides[1])
        return jnp.concatenate(out)

    key = ("corner", tuple(idx), c.block, c.pois)
    t_index = np.tile(idx, len(c.pois))
    labels = [f"{label}:{poi}@{int(i)}" for poi in c.pois for i in idx]
    return Kernel(key, data, fn, t_index, labels)


def _mutual_kernel(c: MutualAvoidance, ctx: Context, label: str) -> Kernel:
    idx = c.support_indices(ctx.times)
    c1, c2 = ctx.coords(c.block1), ctx.coords(c.block2)
    f1 = point_map(ctx.chains[c.block1], c.poi1)
    f2 = point_map(ctx.chains[c.block2], c.poi2)
    ctx.chains[c.block1].link_index(c.poi1)
    ctx.chains[c.block2].link_index(c.poi2)
    coords = np.concatenate([c1, c2])
    n1 = len(c1)
    data = {"r": jnp.asarray(float(c.distance))}

    def g(z):
        return jnp.sum((f1(z[..., :n1]) - f2(z[..., n1:])) ** 2, axis=-1)

    def fn(mean, cov, mu, Sigma, d):
        m, S = _block_moments(mean, cov, idx, coords)
        rm, rv = _sqdist_moments(ctx, m, S, g)
        return gamma_sf_moments(rm, rv, d["r"] ** 2)

    key = ("mutual", tuple(idx), c.block1, c.poi1, c.block2, c.poi2)
    return Kernel(key, data, fn, idx, _term_labels(label, idx))


def _smoothness_kernel(c: Smoothness, ctx: Context, label: str) -> Kernel:
    idx = c.support_indices(ctx.times)
    support = (float(ctx.times[idx[0]]), float(ctx.times[idx[-1]]))
    if support[1] <= support[0]:
        raise ValueError("smoothness constraint needs a support interval of positive length")
    Phi = smoothness_matrix(ctx.basis, support)
    M = ctx.basis.M
    blocks = range(len(ctx.blocks)) if c.block is None else [c.block]
    coords = np.concatenate([ctx.coords(b) for b in blocks])
    w = np.ones(len(coords)) if c.joint_weights is None else np.asarray(c.joint_weights, dtype=float)
    if w.shape != (len(coords),):
        raise ValueError(f"joint_weights must have {len(coords)} entries")
    full = np.zeros(ctx.D)
    full[coords] = w
    data = {"A": jnp.asarray(block_smoothness_matrix(Phi, full)), "bound": jnp.asarray(float(c.bound))}

    def fn(mean, cov, mu, Sigma, d):
        rm, rv = quad_form_moments(mu, Sigma, d["A"])
        return gamma_cdf_moments(rm, rv, d["bound"])[None]

    key = ("smoothness", tuple(idx), tuple(coords), M)
    return Kernel(key, data, fn, np.array([-1]), [label])


_BUILDERS = {
    JointLimit: _joint_limit_kernel,
    Hyperplane: _hyperplane_kernel,
    Waypoint: _ball_kernel,
    Repeller: _ball_kernel,
    UnboundWaypoint: _unbound_kernel,
    NonConvexCorner: _corner_kernel,
    MutualAvoidance: _mutual_kernel,
    Smoothness: _smoothness_kernel,
}


def marginals_jnp(mu, Sigma, phi, D: int):
    """Marginal moments of ``z_t`` on a grid (jax): means ``(n_t, D)``, covariances ``(n_t, D, D)``."""
    M = phi.shape[1]
    mean = phi @ mu.reshape(D, M).T
    S4 = Sigma.reshape(D, M, D, M)
    tmp = jnp.einsum("tn,imjn->timj", phi, S4)
    cov = jnp.einsum("tm,timj->tij", phi, tmp)
    return mean, 0.5 * (cov + jnp.swapaxes(cov, -1, -2))


# -- public single-ProMP evaluators -----------------------------------------------------------


def _evaluate(p: ProMP, chains, blocks, c: Constraint, times, cfg) -> np.ndarray:
    times = p.basis.check_time(np.atleast_1d(np.asarray(times, dtype=float)))
    ctx = Context(times, p.basis, blocks, chains, cfg or UTConfig())
    kern = build_kernel(c, ctx)
    phi, _ = basis_matrix(p.basis, times)
    mu = jnp.asarray(p.mu_w)
    Sigma = jnp.asarray(p.Sigma_w)
    mean, cov = marginals_jnp(mu, Sigma, jnp.asarray(phi), p.D)
    out = np.asarray(kern.fn(mean, cov, mu, Sigma, kern.data))
    return np.clip(out, 0.0, 1.0)


def _at(c: Constraint, n: int) -> Constraint:
    return dataclasses.replace(c, support=None, indices=tuple(range(n)))


def _single_block(p: ProMP, chain: KinematicChain | None):
    chain = chain or KinematicChain.identity()
    return (chain,), (p.D,)


def limit_satisfaction(p: ProMP, c: JointLimit, t: float) -> float:
    """``P(lower < z^k_t <= upper)`` under the Gaussian marginal of ``p``."""
    c = dataclasses.replace(c, block=0, indices=(0,), support=None,
                            lower=np.ravel(c.lower)[0] if np.ndim(c.lower) else c.lower,
                            upper=np.ravel(c.upper)[0] if np.ndim(c.upper) else c.upper)
    chains, blocks = _single_block(p, None)
    return float(_evaluate(p, chains, blocks, c, [t], None)[0])


def hyperplane_satisfaction(p: ProMP, chain: KinematicChain | None, c: Hyperplane, t: float,
                            cfg: UTConfig | None = None) -> float:
    """Probability that the point of interest is on the allowed side of the plane."""
    chains, blocks = _single_block(p, chain)
    return float(_evaluate(p, chains, blocks, dataclasses.replace(_at(c, 1), block=0), [t], cfg)[0])


def ball_satisfaction(p: ProMP, chain: KinematicChain | None, c: Waypoint | Repeller, t: float,
                      cfg: UTConfig | None = None) -> float:
    """Gamma-approximated probability of being inside (waypoint) or outside (repeller) the ball."""
    if isinstance(c, UnboundWaypoint):
        c = Waypoint(center=c.center, radius=c.radius, poi=c.poi, alpha=c.alpha)
    chains, blocks = _single_block(p, chain)
    return float(_evaluate(p, chains, blocks, dataclasses.replace(_at(c, 1), block=0), [t], cfg)[0])


def corner_satisfaction(p: ProMP, chain: KinematicChain | None, c: NonConvexCorner, t: float,
                        cfg: UTConfig | None = None) -> float:
    """Product-approximated probability of *not* being in the corner (first point of interest)."""
    c = dataclasses.replace(_at(c, 1), block=0, pois=c.pois[:1])
    chains, blocks = _single_block(p, chain)
    return float(_evaluate(p, chains, blocks, c, [t], cfg)[0])


def mutual_satisfaction(p_joint: ProMP, chains: Sequence[KinematicChain], c: MutualAvoidance, t: float,
                        cfg: UTConfig | None = None, blocks: Sequence[int] | None = None) -> float:
    """Gamma-approximated probability that two points on a stacked ProMP stay apart.

    ``blocks`` lists the coordinate count of every block; by default the
    coordinates are split according to the chains' link counts.
    """
    chains = tuple(chains)
    if blocks is None:
        if any(ch.is_identity for ch in chains):
            raise ConstraintError("blocks must be given when a chain is the identity", c.name)
        blocks = tuple(ch.n_links for ch in chains)
    if sum(blocks) != p_joint.D:
        raise ConstraintError(f"block sizes {tuple(blocks)} do not add up to D={p_joint.D}", c.name)
    return float(_evaluate(p_joint, chains, blocks, _at(c, 1), [t], cfg)[0])


def unbound_waypoint_satisfaction(p: ProMP, chain: KinematicChain | None, c: UnboundWaypoint,
                                  cfg: UTConfig | None = None, times=None) -> tuple[float, float]:
    """Best waypoint probability over the support and the grid time attaining it.

    ``times`` is the evaluation grid (default 50 points over ``[0, T]``).
    """
    times = p.basis.grid(50) if times is None else np.asarray(times, dtype=float)
    idx = c.support_indices(times)
    w = Waypoint(center=c.center, radius=c.radius, poi=c.poi, alpha=c.alpha)
    chains, blocks = _single_block(p, chain)
    F = _evaluate(p, chains, blocks, dataclasses.replace(_at(w, len(idx)), block=0), times[idx], cfg)
    j = int(np.argmax(F))
    return float(F[j]), float(times[idx[j]])
