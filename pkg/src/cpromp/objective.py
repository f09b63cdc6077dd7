"""Adaptation problems and their approximate Lagrangian.

The Lagrangian is ``objective(theta) + kappa * E[R(w)] + sum_j lambda_j * (alpha_j - F_j(theta))``
where ``theta`` is the flat :class:`~cpromp.params.CholeskyParams` vector and
``F_j`` the satisfaction probability of constraint term ``j``. Value and
gradient come from jax autodiff of one jitted function; functions are cached
by problem *structure* so that problems differing only in numbers (geometry,
priors, confidences) share a compilation.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from cpromp.constraints import (
    Constraint,
    Context,
    MutualAvoidance,
    block_smoothness_matrix,
    build_kernel,
    constraint_from_dict,
    marginals_jnp,
    smoothness_matrix,
)
from cpromp.errors import ConstraintError, NumericError, ProblemFormatError
from cpromp.kinematics import KinematicChain, UTConfig, point_map, unscented
from cpromp.params import CholeskyParams
from cpromp.promp import BasisConfig, ProMP, basis_matrix, kl_weights, marginal_moments_grid

VARIANTS = ("kl", "joint-kl", "marginal-kl", "combination")


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which divergence the adaptation minimizes.

    ``kl``           KL to a single original ProMP.
    ``joint-kl``     KL to the product (block-diagonal stack) of several originals.
    ``marginal-kl``  sum of per-block KLs, ignoring cross-block covariance.
    ``combination``  ``sum_i weights[i] * KL(p || p_i)``; primitives flagged in
                     ``cartesian`` are matched through their task-space marginals
                     on the time grid instead, scaled by ``M / (2 * n_grid)``.
    """

    variant: str = "kl"
    combination_weights: tuple[float, ...] | None = None
    smoothness_kappa: float = 0.0
    joint_weights: tuple[float, ...] | None = None
    cartesian: tuple[bool, ...] | None = None
    cartesian_poi: str = "end"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ProblemFormatError(f"objective variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.smoothness_kappa >= 0:
            raise ProblemFormatError("smoothness_kappa must be >= 0")
        if self.combination_weights is not None:
            w = tuple(float(x) for x in self.combination_weights)
            if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
                raise ProblemFormatError("combination weights must be non-negative and sum to 1")
            object.__setattr__(self, "combination_weights", w)
        if self.joint_weights is not None:
            jw = tuple(float(x) for x in self.joint_weights)
            if any(x < 0 for x in jw):
                raise ProblemFormatError("joint_weights must be non-negative")
            object.__setattr__(self, "joint_weights", jw)
        if self.cartesian is not None:
            object.__setattr__(self, "cartesian", tuple(bool(x) for x in self.cartesian))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()
                if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ProblemFormatError(f"unknown objective field(s) {sorted(unknown)}")
        return cls(**d)


def stack_promps(promps: Sequence[ProMP]) -> ProMP:
    """Product of independent ProMPs as one ProMP with block-diagonal weight covariance."""
    promps = list(promps)
    if len(promps) == 1:
        return promps[0]
    basis = promps[0].basis
    for p in promps[1:]:
        if p.basis != basis:
            raise ProblemFormatError("stacked ProMPs must share the same basis")
    mu = np.concatenate([p.mu_w for p in promps])
    n = len(mu)
    S = np.zeros((n, n))
    Sy = np.zeros((sum(p.D for p in promps),) * 2)
    o = oy = 0
    for p in promps:
        k = p.n_weights
        S[o:o + k, o:o + k] = p.Sigma_w
        Sy[oy:oy + p.D, oy:oy + p.D] = p.Sigma_y
        o += k
        oy += p.D
    return ProMP(sum(p.D for p in promps), basis, mu, S, Sy, meta={"blocks": [p.D for p in promps]})


def product_of_experts(promps: Sequence[ProMP], weights: Sequence[float]) -> ProMP:
    """Minimizer of ``sum_i w_i KL(p || p_i)``: precision-weighted Gaussian product."""
    P = sum(w * np.linalg.inv(p.Sigma_w) for p, w in zip(promps, weights))
    h = sum(w * np.linalg.solve(p.Sigma_w, p.mu_w) for p, w in zip(promps, weights))
    S = np.linalg.inv(P)
    return promps[0].replace(mu_w=S @ h, Sigma_w=0.5 * (S + S.T))


@dataclass
class AdaptationProblem:
    """Everything the solver needs.

    For the ``kl``, ``joint-kl`` and ``marginal-kl`` variants the ``promps`` are
    stacked into one block-structured original; for ``combination`` they are
    the primitives being combined and the adapted ProMP lives in the joint
    space of the non-Cartesian ones (or of ``init`` when given).
    """

    promps: Sequence[ProMP]
    constraints: Sequence[Constraint] = ()
    chains: Sequence[KinematicChain] | None = None
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    n_grid: int = 50
    ut: UTConfig = field(default_factory=UTConfig)
    init: ProMP | None = None

    def __post_init__(self):
        self.promps = tuple(self.promps)
        self.constraints = tuple(self.constraints)
        if not self.promps:
            raise ProblemFormatError("at least one ProMP is required")
        if self.n_grid < 2:
            raise ProblemFormatError("grid needs at least 2 points")
        obj = self.objective
        if obj.variant == "combination":
            K = len(self.promps)
            w = obj.combination_weights or tuple([1.0 / K] * K)
            if len(w) != K:
                raise ProblemFormatError("one combination weight per primitive is required")
            cart = obj.cartesian or (False,) * K
            if len(cart) != K:
                raise ProblemFormatError("one cartesian flag per primitive is required")
            self.objective = obj = dataclasses.replace(obj, combination_weights=tuple(w), cartesian=tuple(cart))
            joint = [p for p, c in zip(self.promps, cart) if not c]
            if self.init is None:
                if not joint:
                    raise ProblemFormatError("combination of Cartesian primitives only needs an 'init' ProMP")
                jw = [wi for wi, c in zip(w, cart) if not c]
                self.init = product_of_experts(joint, np.asarray(jw) / sum(jw))
            for p in joint:
                if p.D != self.init.D or p.basis != self.init.basis:
                    raise ProblemFormatError("joint-space primitives must match the adapted ProMP's dimension and basis")
            for p, c in zip(self.promps, cart):
                if c and p.basis.T != self.init.basis.T:
                    raise ProblemFormatError("Cartesian primitives must share the time horizon")
            self.blocks = (self.init.D,)
            self.reference = self.init
        else:
            if obj.variant == "kl" and len(self.promps) > 1:
                self.objective = obj = dataclasses.replace(obj, variant="joint-kl")
            self.reference = stack_promps(self.promps)
            self.blocks = tuple(p.D for p in self.promps)
            if self.init is None:
                self.init = self.reference
        if self.chains is None:
            self.chains = tuple(KinematicChain.identity() for _ in self.blocks)
        self.chains = tuple(self.chains)
        if len(self.chains) != len(self.blocks):
            raise ProblemFormatError(f"{len(self.blocks)} block(s) but {len(self.chains)} chain(s)")
        if obj.joint_weights is not None and len(obj.joint_weights) != sum(self.blocks):
            raise ProblemFormatError(f"joint_weights needs {sum(self.blocks)} entries")
        if obj.variant == "combination" and any(obj.cartesian):
            ch = self.chains[0]
            ch.link_index(obj.cartesian_poi)

    @property
    def basis(self) -> BasisConfig:
        return self.reference.basis

    @property
    def D(self) -> int:
        return sum(self.blocks)

    @property
    def times(self) -> np.ndarray:
        return self.basis.grid(self.n_grid)

    def context(self) -> Context:
        return Context(self.times, self.basis, self.blocks, self.chains, self.ut)

    def with_constraints(self, constraints) -> "AdaptationProblem":
        return dataclasses.replace(self, constraints=tuple(constraints))

    # -- JSON -----------------------------------------------------------------------------
    def to_dict(self, promp_refs: Sequence | None = None) -> dict:
        d = {
            "promps": list(promp_refs) if promp_refs is not None else [p.to_dict() for p in self.promps],
            "blocks": list(self.blocks),
            "chains": [c.to_dict() for c in self.chains],
            "objective": self.objective.to_dict(),
            "kappa": self.objective.smoothness_kappa,
            "grid": {"n": self.n_grid},
            "constraints": [c.to_dict() for c in self.constraints],
        }
        if self.ut.alpha_ut is not None:
            d["ut"] = {"alpha_ut": self.ut.alpha_ut}
        if self.init is not None and self.objective.variant == "combination":
            d["init"] = self.init.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | str | None = None, defaults: dict | None = None,
                  n_grid: int | None = None) -> "AdaptationProblem":
        """Parse a problem description; ProMP entries are inline dicts or file paths.

        ``defaults`` fills missing constraint fields (e.g. ``{"eta": 0.5, "alpha": 0.999}``).
        """
        if not isinstance(d, dict):
            raise ProblemFormatError("problem must be a JSON object")
        known = {"promps", "blocks", "chains", "objective", "kappa", "grid", "constraints", "ut", "init"}
        unknown = set(d) - known
        if unknown:
            raise ProblemFormatError(f"unknown problem field(s) {sorted(unknown)}")
        base = Path(base_dir) if base_dir is not None else Path(".")

        def load(ref, where):
            if isinstance(ref, dict):
                try:
                    return ProMP.from_dict(ref)
                except ProblemFormatError as exc:
                    raise ProblemFormatError(f"{where}: {exc}") from None
            if isinstance(ref, str):
                path = Path(ref) if Path(ref).is_absolute() else base / ref
                if not path.is_file():
                    raise ProblemFormatError(f"{where}: file not found: {path}")
                try:
                    return ProMP.load(path)
                except (ProblemFormatError, json.JSONDecodeError) as exc:
                    raise ProblemFormatError(f"{where} ({path}): {exc}") from None
            raise ProblemFormatError(f"{where}: expected a ProMP object or a file path")

        refs = d.get("promps")
        if not isinstance(refs, list) or not refs:
            raise ProblemFormatError("'promps' must be a non-empty list")
        promps = [load(r, f"promps[{i}]") for i, r in enumerate(refs)]
        obj = ObjectiveSpec.from_dict(dict(d.get("objective", {})))
        if "kappa" in d:
            obj = dataclasses.replace(obj, smoothness_kappa=float(d["kappa"]))
        chains = None
        if "chains" in d:
            chains = [KinematicChain.from_dict(c) for c in d["chains"]]
        raw = d.get("constraints", [])
        if not isinstance(raw, list):
            raise ProblemFormatError("'constraints' must be a list")
        constraints = []
        for i, c in enumerate(raw):
            if not isinstance(c, dict):
                raise ProblemFormatError(f"constraints[{i}]: expected an object")
            c = {**(defaults or {}), **c}
            try:
                constraints.append(constraint_from_dict(c))
            except ConstraintError as exc:
                raise ProblemFormatError(f"constraints[{i}]: {exc}") from None
        grid = d.get("grid", {}).get("n", 50) if n_grid is None else n_grid
        ut = UTConfig(d["ut"].get("alpha_ut")) if "ut" in d else UTConfig()
        init = load(d["init"], "init") if "init" in d else None
        prob = cls(promps, constraints, chains, obj, int(grid), ut, init)
        if "blocks" in d and tuple(d["blocks"]) != prob.blocks:
            raise ProblemFormatError(f"declared blocks {d['blocks']} do not match the ProMP dimensions {list(prob.blocks)}")
        return prob

    @classmethod
    def load(cls, path, **kw) -> "AdaptationProblem":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ProblemFormatError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(d, base_dir=path.parent, **kw)


# -- jax building blocks ---------------------------------------------------------------------


def unpack_jnp(theta, n: int):
    """``(mu, L, gamma)`` from a flat parameter vector (jax)."""
    k = n * (n - 1) // 2
    mu = theta[:n]
    gamma = theta[n + k:]
    rows, cols = np.tril_indices(n, -1)
    L = jnp.zeros((n, n)).at[rows, cols].set(theta[n:n + k])
    L = L + jnp.diag(jnp.exp(gamma))
    return mu, L, gamma


def _gauss_ref(mu0, Sigma0, what="original"):
    """Precision, mean and log-determinant of a reference Gaussian."""
    try:
        c = np.linalg.cholesky(Sigma0)
    except np.linalg.LinAlgError:
        raise NumericError(f"{what} weight covariance is singular; the KL objective is undefined") from None
    ci = np.linalg.inv(c)
    P = ci.T @ ci
    return {"mu": jnp.asarray(mu0), "P": jnp.asarray(0.5 * (P + P.T)),
            "logdet": jnp.asarray(2.0 * np.sum(np.log(np.diag(c))))}


def _kl_chol(mu, L, half_logdet, ref):
    """``KL(N(mu, L L^T) || ref)`` using a precomputed reference precision."""
    n = mu.shape[0]
    dm = mu - ref["mu"]
    tr = jnp.sum((ref["P"] @ L) * L)
    return 0.5 * (tr + dm @ ref["P"] @ dm - n + ref["logdet"]) - half_logdet


def _kl_cov(mu, S, ref):
    n = mu.shape[0]
    c = jnp.linalg.cholesky(S)
    dm = mu - ref["mu"]
    return 0.5 * (jnp.sum(ref["P"] * S) + dm @ ref["P"] @ dm - n + ref["logdet"]) - jnp.sum(jnp.log(jnp.diag(c)))


def _kl_batched(m, S, ref):
    """Batched KL between small Gaussians ``N(m, S)`` and ``N(ref.mu, ref.P^-1)`` (last axes)."""
    k = m.shape[-1]
    c = jnp.linalg.cholesky(S)
    dm = m - ref["mu"]
    tr = jnp.einsum("tij,tji->t", ref["P"], S)
    quad = jnp.einsum("ti,tij,tj->t", dm, ref["P"], dm)
    return 0.5 * (tr + quad - k + ref["logdet"]) - jnp.sum(jnp.log(jnp.diagonal(c, axis1=-2, axis2=-1)), -1)


def _objective_parts(problem: AdaptationProblem):
    """Static key, numeric data, divergence function and optional smoothness penalty (jax)."""
    obj = problem.objective
    n = problem.reference.n_weights
    D, M = problem.D, problem.basis.M
    data: dict = {}
    if obj.variant in ("kl", "joint-kl"):
        data["ref"] = _gauss_ref(problem.reference.mu_w, problem.reference.Sigma_w)
        key = ("kl",)

        def fn(mu, L, gamma, Sigma, mean, cov, d):
            return _kl_chol(mu, L, jnp.sum(gamma), d["ref"])

    elif obj.variant == "marginal-kl":
        spans = []
        o = 0
        for p in problem.promps:
            spans.append((o, o + p.n_weights))
            o += p.n_weights
        data["refs"] = [_gauss_ref(p.mu_w, p.Sigma_w, f"block {i}") for i, p in enumerate(problem.promps)]
        key = ("marginal-kl", tuple(spans))

        def fn(mu, L, gamma, Sigma, mean, cov, d):
            total = 0.0
            for (a, b), ref in zip(spans, d["refs"]):
                if a == 0:
                    total = total + _kl_chol(mu[a:b], L[a:b, a:b], jnp.sum(gamma[a:b]), ref)
                else:
                    total = total + _kl_cov(mu[a:b], Sigma[a:b, a:b], ref)
            return total

    else:
        w = obj.combination_weights
        cart = obj.cartesian
        times = problem.times
        chain = problem.chains[0]
        alpha_ut = problem.ut.alpha(D)
        fk = point_map(chain, obj.cartesian_poi)
        terms = []
        for p, wi, c in zip(problem.promps, w, cart):
            if c:
                m, S = marginal_moments_grid(p, times)
                P = np.linalg.inv(S)
                terms.append({"w": jnp.asarray(wi * M / (m.shape[1] * len(times))), "mu": jnp.asarray(m),
                              "P": jnp.asarray(0.5 * (P + np.swapaxes(P, 1, 2))),
                              "logdet": jnp.asarray(np.linalg.slogdet(S)[1])})
            else:
                terms.append({"w": jnp.asarray(wi), **_gauss_ref(p.mu_w, p.Sigma_w, "primitive")})
        data["terms"] = terms
        key = ("combination", cart, obj.cartesian_poi, alpha_ut)

        def fn(mu, L, gamma, Sigma, mean, cov, d):
            total = 0.0
            xm = xS = None
            for c, t in zip(cart, d["terms"]):
                if c:
                    if xm is None:
                        xm, xS = unscented(mean, cov, fk, alpha_ut)
                    total = total + t["w"] * jnp.sum(_kl_batched(xm, xS, t))
                else:
                    total = total + t["w"] * _kl_chol(mu, L, jnp.sum(gamma), t)
            return total

    penalty = None
    if obj.smoothness_kappa > 0:
        Phi = smoothness_matrix(problem.basis)
        c = np.ones(D) if obj.joint_weights is None else np.asarray(obj.joint_weights)
        data["kappa"] = jnp.asarray(obj.smoothness_kappa)
        data["A"] = jnp.asarray(block_smoothness_matrix(Phi, c))
        key = key + ("kappa",)

        def penalty(mu, Sigma, d):
            return d["kappa"] * (mu @ d["A"] @ mu + jnp.sum(d["A"] * Sigma))

    return key + (n, D, M), data, fn, penalty


_COMPILED: dict = {}


def _whiten_data(init: ProMP) -> dict:
    L0 = CholeskyParams.from_gaussian(init.mu_w, init.Sigma_w).cholesky()
    return {"mu0": jnp.asarray(init.mu_w), "L0": jnp.asarray(L0), "g0": jnp.asarray(np.log(np.diag(L0)))}


class CompiledLagrangian:
    """Jitted value/gradient of the Lagrangian for one problem.

    Two coordinate systems are exposed. ``theta`` is the flat
    :class:`CholeskyParams` vector of the weight distribution. ``u`` uses the
    same layout relative to the initial distribution ``N(mu0, L0 L0^T)``:
    ``mu = mu0 + L0 m`` and ``L = L0 L'``. The map is a smooth bijection between
    lower-triangular factors with positive diagonals; the solver works in ``u``
    because the KL term is then perfectly conditioned.
    """

    def __init__(self, problem: AdaptationProblem):
        self.problem = problem
        ctx = problem.context()
        self.kernels = [build_kernel(c, ctx, k) for k, c in enumerate(problem.constraints)]
        for c, kern in zip(problem.constraints, self.kernels):
            if isinstance(c, MutualAvoidance) and len(problem.blocks) < 2:
                raise ConstraintError("mutual avoidance needs a stacked multi-block problem", kern.labels[0])
        times = problem.times
        self.n = problem.reference.n_weights
        self.term_constraint = np.concatenate(
            [np.full(k.n_terms, i) for i, k in enumerate(self.kernels)]).astype(int) if self.kernels else np.zeros(0, int)
        self.term_t_index = np.concatenate([k.t_index for k in self.kernels]) if self.kernels else np.zeros(0, int)
        self.labels = [lab for k in self.kernels for lab in k.labels]
        self.alphas = np.array([problem.constraints[i].alpha for i in self.term_constraint], dtype=float)
        self.etas = np.array([problem.constraints[i].eta for i in self.term_constraint], dtype=float)
        self.lambda0 = np.array([problem.constraints[i].default_lambda0(times) for i in self.term_constraint],
                                dtype=float)
        okey, odata, ofn, penalty = _objective_parts(problem)
        # the KL to the initial distribution has a closed form in whitened coordinates
        white_kl = problem.objective.variant in ("kl", "joint-kl") and problem.init is problem.reference
        phi, _ = basis_matrix(problem.basis, times)
        self.data = {"phi": jnp.asarray(phi), "alpha": jnp.asarray(self.alphas), "obj": odata,
                     "cons": [k.data for k in self.kernels], "white": _whiten_data(problem.init)}
        self._L0 = np.asarray(self.data["white"]["L0"])
        self._mu0 = np.asarray(problem.init.mu_w)
        chains_key = tuple(json.dumps(c.to_dict(), sort_keys=True) for c in problem.chains)
        self.key = (self.n, problem.D, problem.blocks, len(times), chains_key, problem.ut.alpha_ut, okey,
                    white_kl, tuple(k.key for k in self.kernels))
        fns = _COMPILED.get(self.key)
        if fns is None:
            fns = self._build(ofn, penalty, [k.fn for k in self.kernels], self.n, problem.D, white_kl)
            _COMPILED[self.key] = fns
        self._fns = fns

    @staticmethod
    def _build(ofn, penalty, kfns, n, D, white_kl):
        def core(mu, L, gamma, data, kl_white=None):
            Sigma = L @ L.T
            mean, cov = marginals_jnp(mu, Sigma, data["phi"], D)
            if kfns:
                F = jnp.concatenate([f(mean, cov, mu, Sigma, d) for f, d in zip(kfns, data["cons"])])
            else:
                F = jnp.zeros(0)
            # the closed-form whitened KL replaces the divergence, it does not add to it
            obj = kl_white if kl_white is not None else ofn(mu, L, gamma, Sigma, mean, cov, data["obj"])
            if penalty is not None:
                obj = obj + penalty(mu, Sigma, data["obj"])
            return obj, data["alpha"] - F

        def parts_theta(theta, data):
            mu, L, gamma = unpack_jnp(theta, n)
            return core(mu, L, gamma, data)

        def parts_u(u, data):
            m, Lp, gp = unpack_jnp(u, n)
            w = data["white"]
            mu = w["mu0"] + w["L0"] @ m
            L = w["L0"] @ Lp
            gamma = w["g0"] + gp
            if white_kl:
                kl = 0.5 * (jnp.sum(Lp * Lp) + m @ m - n) - jnp.sum(gp)
                return core(mu, L, gamma, data, kl)
            return core(mu, L, gamma, data)

        def lagr(parts):
            def total(x, lambdas, data):
                obj, C = parts(x, data)
                return obj + jnp.dot(lambdas, C), (C, obj)
            return total

        total_theta, total_u = lagr(parts_theta), lagr(parts_u)
        return {
            "vg_theta": jax.jit(jax.value_and_grad(total_theta, has_aux=True)),
            "val_theta": jax.jit(total_theta),
            "parts_theta": jax.jit(parts_theta),
            "vg_u": jax.jit(jax.value_and_grad(total_u, has_aux=True)),
            "parts_u": jax.jit(parts_u),
        }

    @property
    def n_terms(self) -> int:
        return len(self.alphas)

    def theta0(self) -> np.ndarray:
        init = self.problem.init
        return CholeskyParams.from_gaussian(init.mu_w, init.Sigma_w).to_vector()

    def u0(self) -> np.ndarray:
        n = self.n
        return np.concatenate([np.zeros(n), np.zeros(n * (n - 1) // 2), np.zeros(n)])

    def u_to_theta(self, u) -> np.ndarray:
        cp = CholeskyParams.from_vector(u, self.n)
        L = self._L0 @ cp.cholesky()
        return _pack(self._mu0 + self._L0 @ cp.mu, L)

    def theta_to_u(self, theta) -> np.ndarray:
        cp = CholeskyParams.from_vector(theta, self.n)
        Lp = np.linalg.solve(self._L0, cp.cholesky())
        Lp = np.tril(Lp)
        return _pack(np.linalg.solve(self._L0, cp.mu - self._mu0), Lp)

    def value_and_grad(self, theta, lambdas):
        """``(value, grad, C, objective)`` as numpy, in ``theta`` coordinates."""
        (v, (C, obj)), g = self._fns["vg_theta"](jnp.asarray(theta), jnp.asarray(lambdas, dtype=float), self.data)
        return float(v), np.asarray(g), np.asarray(C), float(obj)

    def value_and_grad_u(self, u, lambdas):
        """``(value, grad, C, objective)`` in whitened ``u`` coordinates."""
        (v, (C, obj)), g = self._fns["vg_u"](jnp.asarray(u), jnp.asarray(lambdas, dtype=float), self.data)
        return float(v), np.asarray(g), np.asarray(C), float(obj)

    def value(self, theta, lambdas) -> float:
        v, _ = self._fns["val_theta"](jnp.asarray(theta), jnp.asarray(lambdas, dtype=float), self.data)
        return float(v)

    def residuals(self, theta) -> tuple[float, np.ndarray]:
        """Objective value and ``C = alpha - F`` for every term."""
        obj, C = self._fns["parts_theta"](jnp.asarray(theta), self.data)
        return float(obj), np.asarray(C)

    def residuals_u(self, u) -> tuple[float, np.ndarray]:
        obj, C = self._fns["parts_u"](jnp.asarray(u), self.data)
        return float(obj), np.asarray(C)

    def to_promp(self, theta) -> ProMP:
        cp = CholeskyParams.from_vector(theta, self.n)
        ref = self.problem.init if self.problem.objective.variant == "combination" else self.problem.reference
        return ref.replace(mu_w=cp.mu, Sigma_w=cp.covariance())


def _pack(mu, L) -> np.ndarray:
    n = len(mu)
    rows, cols = np.tril_indices(n, -1)
    d = np.diag(L)
    if np.any(d <= 0):
        raise NumericError("Cholesky factor with non-positive diagonal")
    return np.concatenate([mu, L[rows, cols], np.log(d)])


def lagrangian(theta, lambdas, problem: AdaptationProblem | CompiledLagrangian):
    """Value, gradient w.r.t. ``theta`` and constraint residuals ``C = alpha - F``.

    ``theta`` is a flat :class:`CholeskyParams` vector (or the params object);
    ``lambdas`` has one entry per constraint term (see ``CompiledLagrangian.labels``).
    """
    comp = problem if isinstance(problem, CompiledLagrangian) else CompiledLagrangian(problem)
    if isinstance(theta, CholeskyParams):
        theta = theta.to_vector()
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.shape != (comp.n_terms,):
        raise ValueError(f"expected {comp.n_terms} multipliers, got shape {lambdas.shape}")
    if np.any(lambdas < 0):
        raise ValueError("multipliers must be non-negative")
    v, g, C, _ = comp.value_and_grad(theta, lambdas)
    if not np.isfinite(v) or not np.all(np.isfinite(g)):
        bad = [comp.labels[j] for j in np.flatnonzero(~np.isfinite(C))]
        raise NumericError("non-finite Lagrangian" + (f" (constraint terms {bad[:5]})" if bad else ""))
    return v, g, C


def gradient_check(problem: AdaptationProblem | CompiledLagrangian, theta=None, lambdas=None, step: float = 1e-6,
                   coords=None) -> dict:
    """Compare the autodiff Lagrangian gradient with central finite differences.

    ``coords`` restricts the check to a subset of parameter indices. Returns the
    max abs error, the max abs FD gradient and their ratio ``rel_error``.
    """
    comp = problem if isinstance(problem, CompiledLagrangian) else CompiledLagrangian(problem)
    theta = comp.theta0() if theta is None else np.asarray(theta, dtype=float)
    lambdas = comp.lambda0 if lambdas is None else np.asarray(lambdas, dtype=float)
    _, g, _ = lagrangian(theta, lambdas, comp)
    coords = np.arange(theta.size) if coords is None else np.asarray(coords)
    fd = np.empty(len(coords))
    for j, i in enumerate(coords):
        h = step * max(1.0, abs(theta[i]))
        e = np.zeros_like(theta)
        e[i] = h
        fd[j] = (comp.value(theta + e, lambdas) - comp.value(theta - e, lambdas)) / (2 * h)
    err = float(np.max(np.abs(g[coords] - fd)))
    scale = float(np.max(np.abs(fd)))
    return {"max_abs_error": err, "max_abs_grad": scale, "rel_error": err / max(scale, 1e-300),
            "n_checked": int(len(coords))}


# -- standalone objectives -----------------------------------------------------------------------


def marginal_kl_sum(p_joint: ProMP, originals: Sequence[ProMP]) -> float:
    """Sum over blocks of ``KL(block marginal of p_joint || original block)``."""
    o = 0
    total = 0.0
    if sum(p.n_weights for p in originals) != p_joint.n_weights:
        raise ValueError("block sizes do not add up to the joint ProMP")
    for p0 in originals:
        k = p0.n_weights
        sub = p0.replace(mu_w=p_joint.mu_w[o:o + k], Sigma_w=p_joint.Sigma_w[o:o + k, o:o + k])
        total += kl_weights(sub, p0)
        o += k
    return total


def combination_objective(p: ProMP, primitives: Sequence[ProMP], weights: Sequence[float],
                          cartesian: Sequence[bool] | None = None, chain: KinematicChain | None = None,
                          poi: str = "end", n_grid: int = 50, ut: UTConfig | None = None) -> float:
    """``sum_i w_i D_i`` with weight-space KLs or grid-averaged task-space marginal KLs."""
    w = np.asarray(weights, dtype=float)
    if len(w) != len(primitives):
        raise ValueError("one weight per primitive is required")
    if np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1")
    cart = tuple(cartesian) if cartesian is not None else (False,) * len(primitives)
    total = 0.0
    for pi, wi, c in zip(primitives, w, cart):
        if not c:
            if pi.n_weights != p.n_weights:
                raise ValueError("dimension mismatch between ProMP and primitive")
            total += wi * kl_weights(p, pi)
            continue
        from cpromp.kinematics import task_moments

        times = p.basis.grid(n_grid)
        m_i, S_i = marginal_moments_grid(pi, times)
        acc = 0.0
        for j, t in enumerate(times):
            x = task_moments(p, t, chain or KinematicChain.identity(), poi, ut)
            acc += _gauss_kl_np(x.mean, x.cov, m_i[j], S_i[j])
        total += wi * p.M / (len(m_i[0]) * len(times)) * acc
    return float(total)


def _gauss_kl_np(m, S, m0, S0) -> float:
    k = len(m)
    P0 = np.linalg.inv(S0)
    d = m - m0
    return 0.5 * (np.trace(P0 @ S) + d @ P0 @ d - k + np.linalg.slogdet(S0)[1] - np.linalg.slogdet(S)[1])
