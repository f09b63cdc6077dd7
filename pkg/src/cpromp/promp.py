"""Probabilistic movement primitives: basis, moments, sampling, learning, conditioning.

Weight vectors are row-blocked by coordinate: for ``D`` coordinates and ``M``
basis functions, ``mu_w[d * M:(d + 1) * M]`` holds the weights of coordinate
``d``. Every file format in this package uses that ordering.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from cpromp.errors import DomainError, NumericError, ProblemFormatError

_T_SLACK = 1e-9


@dataclass(frozen=True)
class BasisConfig:
    """Gaussian radial basis over a linear phase ``tau(t) = t / T``."""

    centers: tuple[float, ...]
    h: float
    T: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        object.__setattr__(self, "centers", tuple(float(x) for x in c))
        if c.ndim != 1 or c.size < 1:
            raise ValueError("need at least one basis center")
        if np.any(np.diff(c) <= 0):
            raise ValueError("basis centers must be strictly increasing")
        if c.min() < -0.2 or c.max() > 1.2:
            raise ValueError("basis centers must lie in [-0.2, 1.2]")
        if not self.h > 0:
            raise ValueError("bandwidth h must be positive")
        if not self.T > 0:
            raise ValueError("duration T must be positive")

    @classmethod
    def uniform(cls, M: int = 15, T: float = 1.0, lo: float = -0.1, hi: float = 1.1) -> "BasisConfig":
        """Equally spaced centers on ``[lo, hi]`` with ``h = 2 * spacing**2``."""
        centers = np.linspace(lo, hi, M)
        if M > 1:
            h = 2.0 * (centers[1] - centers[0]) ** 2
        else:
            h = 0.5
        return cls(tuple(centers), float(h), float(T))

    @property
    def M(self) -> int:
        return len(self.centers)

    def phase(self, t):
        return np.asarray(t, dtype=float) / self.T

    def check_time(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < -_T_SLACK * self.T) or np.any(t > self.T * (1 + _T_SLACK)):
            raise DomainError(f"time outside [0, {self.T}]: {t}")
        return np.clip(t, 0.0, self.T)

    def grid(self, n: int = 50) -> np.ndarray:
        return np.linspace(0.0, self.T, n)


def basis_matrix(basis: BasisConfig, times) -> tuple[np.ndarray, np.ndarray]:
    """Features and their second time derivatives at many times.

    Returns two arrays of shape ``(len(times), M)``.
    """
    t = basis.check_time(np.atleast_1d(times))
    c = np.asarray(basis.centers)
    u = (basis.phase(t)[:, None] - c[None, :]) / basis.h
    phi = np.exp(-0.5 * u * (basis.phase(t)[:, None] - c[None, :]))
    # d tau / dt = 1 / T for the linear phase
    ddphi = phi * (u**2 - 1.0 / basis.h) / basis.T**2
    return phi, ddphi


def basis_features(basis: BasisConfig, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Values ``phi_t`` and second time derivatives of all basis functions at ``t``."""
    if np.ndim(t) != 0:
        raise DomainError("basis_features takes a scalar time; use basis_matrix for grids")
    phi, ddphi = basis_matrix(basis, [t])
    return phi[0], ddphi[0]


@dataclass(frozen=True)
class GaussianMoments:
    """Mean vector and covariance matrix of a (approximately) Gaussian quantity."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean size {mean.size}")
        scale = max(1.0, float(np.abs(cov).max()))
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-10 * scale):
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size

    def is_psd(self, rtol: float = 1e-10) -> bool:
        eig = np.linalg.eigvalsh(self.cov)
        return bool(eig.min() >= -rtol * max(1.0, np.abs(eig).max()))


@dataclass(frozen=True, eq=False)
class ProMP:
    """Gaussian distribution ``N(mu_w, Sigma_w)`` over basis weights plus observation noise."""

    D: int
    basis: BasisConfig
    mu_w: np.ndarray
    Sigma_w: np.ndarray
    Sigma_y: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.D * self.basis.M
        mu = np.asarray(self.mu_w, dtype=float).reshape(-1)
        S = np.asarray(self.Sigma_w, dtype=float)
        if mu.size != n:
            raise ValueError(f"mu_w has length {mu.size}, expected D*M = {n}")
        if S.shape != (n, n):
            raise ValueError(f"Sigma_w has shape {S.shape}, expected ({n}, {n})")
        scale = max(float(np.abs(S).max()), 1e-300)
        if not np.allclose(S, S.T, rtol=0, atol=1e-9 * scale):
            raise ValueError("Sigma_w is not symmetric")
        S = 0.5 * (S + S.T)
        eig_min = np.linalg.eigvalsh(S).min() if n else 0.0
        if eig_min < -1e-10 * scale:
            raise NumericError(f"Sigma_w is not positive semidefinite (eigenvalue {eig_min:.3e})")
        Sy = np.eye(self.D) * 1e-8 if self.Sigma_y is None else np.atleast_2d(np.asarray(self.Sigma_y, dtype=float))
        if Sy.shape != (self.D, self.D):
            raise ValueError("Sigma_y must be D x D")
        if not np.allclose(Sy, Sy.T) or np.linalg.eigvalsh(Sy).min() <= 0:
            raise ValueError("Sigma_y must be symmetric positive definite")
        object.__setattr__(self, "mu_w", mu)
        object.__setattr__(self, "Sigma_w", S)
        object.__setattr__(self, "Sigma_y", Sy)

    @property
    def M(self) -> int:
        return self.basis.M

    @property
    def T(self) -> float:
        return self.basis.T

    @property
    def n_weights(self) -> int:
        return self.D * self.basis.M

    def replace(self, **changes) -> "ProMP":
        kw = dict(D=self.D, basis=self.basis, mu_w=self.mu_w, Sigma_w=self.Sigma_w,
                  Sigma_y=self.Sigma_y, meta=dict(self.meta))
        kw.update(changes)
        return ProMP(**kw)

    def mean_trajectory(self, times) -> np.ndarray:
        phi, _ = basis_matrix(self.basis, times)
        return phi @ self.mu_w.reshape(self.D, self.M).T

    # -- serialisation -------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "D": self.D,
            "M": self.M,
            "T": self.T,
            "centers": list(self.basis.centers),
            "h": self.basis.h,
            "mu_w": self.mu_w.tolist(),
            "sigma_w_chol_lower": psd_factor(self.Sigma_w).reshape(-1).tolist(),
            "sigma_y": self.Sigma_y.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProMP":
        try:
            D, M = int(d["D"]), int(d["M"])
            basis = BasisConfig(tuple(d["centers"]), float(d["h"]), float(d["T"]))
            n = D * M
            L = np.asarray(d["sigma_w_chol_lower"], dtype=float)
            mu = np.asarray(d["mu_w"], dtype=float)
            Sy = np.asarray(d["sigma_y"], dtype=float)
        except KeyError as exc:
            raise ProblemFormatError(f"ProMP file is missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ProblemFormatError(f"malformed ProMP field: {exc}") from None
        if basis.M != M:
            raise ProblemFormatError(f"field 'centers' has {basis.M} entries but M = {M}")
        if L.size != n * n:
            raise ProblemFormatError(f"field 'sigma_w_chol_lower' needs {n * n} entries, got {L.size}")
        if Sy.size != D * D:
            raise ProblemFormatError(f"field 'sigma_y' needs {D * D} entries, got {Sy.size}")
        L = np.tril(L.reshape(n, n))
        return cls(D, basis, mu, L @ L.T, Sy.reshape(D, D))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ProMP":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ProblemFormatError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)


def psd_factor(S: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == S`` for any PSD ``S`` (singular allowed)."""
    S = 0.5 * (S + S.T)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    eig, U = np.linalg.eigh(S)
    if eig.min() < -1e-10 * max(1.0, np.abs(eig).max()):
        raise NumericError(f"matrix is not PSD (eigenvalue {eig.min():.3e})")
    B = (U * np.sqrt(np.clip(eig, 0.0, None))).T
    R = np.linalg.qr(B, mode="r")
    L = R.T
    # fix column signs so the diagonal is non-negative
    s = np.where(np.diag(L) < 0, -1.0, 1.0)
    return L * s[None, :]


def _block_features(basis: BasisConfig, D: int, t: float) -> np.ndarray:
    """Observation matrix ``Psi_t`` of shape ``(D, D*M)`` with ``z_t = Psi_t w``."""
    phi, _ = basis_features(basis, t)
    return np.kron(np.eye(D), phi[None, :])


def marginal_moments(p: ProMP, t: float) -> GaussianMoments:
    """Mean and covariance of ``z_t = w phi_t`` (observation noise excluded)."""
    phi, _ = basis_features(p.basis, t)
    mean = p.mu_w.reshape(p.D, p.M) @ phi
    S4 = p.Sigma_w.reshape(p.D, p.M, p.D, p.M)
    cov = np.einsum("m,imjn,n->ij", phi, S4, phi)
    return GaussianMoments(mean, cov)


def marginal_moments_grid(p: ProMP, times) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`marginal_moments`: means ``(n_t, D)`` and covariances ``(n_t, D, D)``."""
    phi, _ = basis_matrix(p.basis, times)
    mean = phi @ p.mu_w.reshape(p.D, p.M).T
    S4 = p.Sigma_w.reshape(p.D, p.M, p.D, p.M)
    cov = np.einsum("tm,imjn,tn->tij", phi, S4, phi, optimize=True)
    return mean, 0.5 * (cov + cov.transpose(0, 2, 1))


def sample_weights(p: ProMP, n: int, rng: np.random.Generator) -> np.ndarray:
    L = psd_factor(p.Sigma_w)
    eps = rng.standard_normal((n, p.n_weights))
    return p.mu_w[None, :] + eps @ L.T


def sample_trajectories(p: ProMP, n: int, times, seed: int = 0, with_noise: bool = False) -> np.ndarray:
    """Draw ``n`` trajectories evaluated on ``times``.

    Returns an array of shape ``(n, len(times), D)``. The output depends only
    on the arguments, so equal seeds give bit-identical samples.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    phi, _ = basis_matrix(p.basis, times)
    W = sample_weights(p, n, rng).reshape(n, p.D, p.M)
    Z = np.einsum("tm,sdm->std", phi, W)
    if with_noise:
        Ly = np.linalg.cholesky(p.Sigma_y)
        Z = Z + rng.standard_normal(Z.shape) @ Ly.T
    return Z


# -- learning --------------------------------------------------------------------


@dataclass
class DemoSet:
    """Demonstrations as a list of ``(times, observations)`` pairs, observations ``(L, D)``."""

    trajectories: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        clean = []
        for t, y in self.trajectories:
            t = np.asarray(t, dtype=float).reshape(-1)
            y = np.asarray(y, dtype=float)
            if y.ndim == 1:
                y = y[:, None]
            if y.shape[0] != t.size:
                raise ValueError("times and observations differ in length")
            clean.append((t, y))
        self.trajectories = clean

    def __len__(self):
        return len(self.trajectories)

    @property
    def D(self) -> int:
        return self.trajectories[0][1].shape[1]

    def rescaled(self, T: float) -> "DemoSet":
        """Linearly map every demonstration's time stamps onto ``[0, T]``."""
        out = []
        for t, y in self.trajectories:
            span = t[-1] - t[0]
            out.append(((t - t[0]) * (T / span if span > 0 else 0.0), y))
        return DemoSet(out)

    @classmethod
    def from_csv(cls, paths: Sequence) -> "DemoSet":
        trajs = []
        for path in paths:
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
            header, body = rows[0], rows[1:]
            if not header or header[0].strip() != "t":
                raise ProblemFormatError(f"{path}: first column must be 't'")
            data = np.asarray(body, dtype=float)
            trajs.append((data[:, 0], data[:, 1:]))
        return cls(trajs)

    def to_csv(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, (t, y) in enumerate(self.trajectories):
            path = directory / f"demo_{i:03d}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t"] + [f"q{d + 1}" for d in range(y.shape[1])])
                for row in np.column_stack([t, y]):
                    w.writerow([repr(float(v)) for v in row])
            paths.append(path)
        return paths


@dataclass(frozen=True)
class RegConfig:
    """Regularisation and stopping rule for :func:`learn_em`.

    The ridge on ``Sigma_w`` is ``ridge_scale * tr(S0) / (D*M)`` where ``S0`` is the
    covariance of per-demo least-squares fits, floored at ``ridge_floor``. It is
    fixed before the first iteration so that EM ascends a single penalised
    likelihood.
    """

    ridge_scale: float = 1e-6
    ridge_floor: float = 1e-10
    sigma_y_floor: float = 1e-8
    max_iters: int = 200
    tol: float = 1e-8
    ls_ridge: float = 1e-8


def _demo_stats(basis: BasisConfig, demos: DemoSet):
    stats = []
    for t, Y in demos.trajectories:
        B, _ = basis_matrix(basis, t)
        stats.append((B, Y, B.T @ B, B.T @ Y))
    return stats


def learn_em(demos: DemoSet, basis: BasisConfig, D: int | None = None, reg: RegConfig | None = None) -> ProMP:
    """Fit ``(mu_w, Sigma_w, Sigma_y)`` to demonstrations by (penalised) EM.

    The E-step computes the Gaussian posterior of each demonstration's weights;
    the M-step moment-matches the average of those posteriors. The ridge terms
    act as improper inverse-Wishart priors, so the penalised log-likelihood
    recorded in ``meta["loglik_trace"]`` never decreases.
    """
    reg = reg or RegConfig()
    if len(demos) == 0:
        raise ValueError("no demonstrations")
    D = demos.D if D is None else D
    if demos.D != D:
        raise ValueError(f"demonstrations have {demos.D} coordinates, expected {D}")
    M = basis.M
    n_w = D * M
    for t, _ in demos.trajectories:
        basis.check_time(t)
        if t.size < M:
            raise ValueError(f"each demonstration needs at least M={M} observations, got {t.size}")
    stats = _demo_stats(basis, demos)
    n = len(stats)
    N = sum(B.shape[0] for B, *_ in stats)
    meta: dict = {}
    diagonal = n < 2
    if diagonal:
        meta["warning"] = "fewer than 2 demonstrations: Sigma_w restricted to diagonal plus ridge"
        warnings.warn(meta["warning"], RuntimeWarning, stacklevel=2)

    # initialisation from per-demo ridge least squares
    W0 = []
    resid = np.zeros((D, D))
    for B, Y, BtB, BtY in stats:
        Wi = np.linalg.solve(BtB + reg.ls_ridge * np.eye(M), BtY)  # (M, D)
        W0.append(Wi.T.reshape(-1))
        R = Y - B @ Wi
        resid += R.T @ R
    W0 = np.asarray(W0)
    mu = W0.mean(axis=0)
    S0 = np.cov(W0, rowvar=False, bias=True).reshape(n_w, n_w) if n > 1 else np.zeros((n_w, n_w))
    eps_w = max(reg.ridge_scale * np.trace(S0) / n_w, reg.ridge_floor)
    eps_y = reg.sigma_y_floor
    Sigma = S0 + eps_w * np.eye(n_w)
    if diagonal:
        Sigma = np.diag(np.diag(Sigma))
    Sigma_y = resid / N + eps_y * np.eye(D)

    trace = []
    prev = -np.inf
    converged = False
    for it in range(reg.max_iters):
        P_w = _inv_spd(Sigma, "Sigma_w")
        P_y = _inv_spd(Sigma_y, "Sigma_y")
        _, logdet_w = np.linalg.slogdet(Sigma)
        _, logdet_y = np.linalg.slogdet(Sigma_y)
        ll = 0.0
        mus, covs = [], []
        Sy_acc = np.zeros((D, D))
        for B, Y, BtB, BtY in stats:
            L_i = B.shape[0]
            A = P_w + np.kron(P_y, BtB)
            cA = _chol(A, "posterior precision")
            b = (BtY @ P_y).T.reshape(-1)  # Phi^T Lambda y, row-blocked
            Cov_i = linalg.cho_solve((cA, True), np.eye(n_w))
            Cov_i = 0.5 * (Cov_i + Cov_i.T)
            mu_i = Cov_i @ (P_w @ mu + b)
            # log N(y; Phi mu, Phi Sigma Phi^T + Sigma_y (x) I) via Woodbury
            r = Y - B @ mu.reshape(D, M).T
            Rtr = (B.T @ r @ P_y).T.reshape(-1)
            quad = np.sum((r @ P_y) * r) - Rtr @ linalg.cho_solve((cA, True), Rtr)
            logdet_C = L_i * logdet_y + logdet_w + 2.0 * np.sum(np.log(np.diag(cA)))
            ll += -0.5 * (L_i * D * math.log(2 * math.pi) + logdet_C + quad)
            mus.append(mu_i)
            covs.append(Cov_i)
            Ri = Y - B @ mu_i.reshape(D, M).T
            S4 = Cov_i.reshape(D, M, D, M)
            Sy_acc += Ri.T @ Ri + np.einsum("dmen,mn->de", S4, BtB)
        penalised = ll - 0.5 * n * eps_w * np.trace(P_w) - 0.5 * N * eps_y * np.trace(P_y)
        trace.append(float(penalised))
        if it > 0 and penalised - prev < reg.tol:
            converged = True
            break
        prev = penalised
        # M-step
        mus = np.asarray(mus)
        mu = mus.mean(axis=0)
        dev = mus - mu
        S = (sum(covs) + dev.T @ dev) / n
        if diagonal:
            S = np.diag(np.diag(S))
        Sigma = 0.5 * (S + S.T) + eps_w * np.eye(n_w)
        Sigma_y = 0.5 * (Sy_acc + Sy_acc.T) / N + eps_y * np.eye(D)

    meta.update(loglik_trace=trace, iterations=len(trace), converged=converged,
                ridge=eps_w, n_demos=n)
    return ProMP(D, basis, mu, Sigma, Sigma_y, meta)


def _chol(A: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise NumericError(f"{what} is singular or not positive definite") from None


def _inv_spd(A: np.ndarray, what: str) -> np.ndarray:
    c = _chol(A, what)
    inv = linalg.cho_solve((c, True), np.eye(A.shape[0]))
    return 0.5 * (inv + inv.T)


# -- conditioning and divergences ---------------------------------------------------


def condition(p: ProMP, t: float, value, obs_cov) -> ProMP:
    """Condition the weight distribution on observing ``value = w phi_t + eps``."""
    value = np.atleast_1d(np.asarray(value, dtype=float))
    R = np.atleast_2d(np.asarray(obs_cov, dtype=float))
    if value.size != p.D or R.shape != (p.D, p.D):
        raise ValueError("value / obs_cov dimensions do not match D")
    Psi = _block_features(p.basis, p.D, t)
    S = p.Sigma_w
    SPt = S @ Psi.T
    innov = Psi @ SPt + R
    try:
        c = linalg.cho_factor(0.5 * (innov + innov.T), lower=True)
    except linalg.LinAlgError:
        raise NumericError("innovation covariance is singular") from None
    K = linalg.cho_solve(c, SPt.T).T
    mu = p.mu_w + K @ (value - Psi @ p.mu_w)
    # Joseph form keeps the result PSD
    A = np.eye(p.n_weights) - K @ Psi
    S_new = A @ S @ A.T + K @ R @ K.T
    return p.replace(mu_w=mu, Sigma_w=0.5 * (S_new + S_new.T))


def kl_terms(p: ProMP, p0: ProMP) -> tuple[float, float]:
    """Mean and covariance contributions to ``KL(p || p0)``."""
    if p.n_weights != p0.n_weights:
        raise ValueError("ProMPs have different weight dimensions")
    n = p.n_weights
    try:
        c0 = np.linalg.cholesky(p0.Sigma_w)
    except np.linalg.LinAlgError:
        raise NumericError("reference Sigma_w is singular; add ridge regularisation") from None
    d = linalg.solve_triangular(c0, p.mu_w - p0.mu_w, lower=True)
    mean_term = 0.5 * float(d @ d)
    sign, logdet = np.linalg.slogdet(p.Sigma_w)
    if sign <= 0:
        return mean_term, math.inf
    X = linalg.solve_triangular(c0, psd_factor(p.Sigma_w), lower=True)
    tr = float(np.sum(X * X))
    logdet0 = 2.0 * float(np.sum(np.log(np.diag(c0))))
    cov_term = 0.5 * (tr - n + logdet0 - logdet)
    return mean_term, max(cov_term, 0.0)


def kl_weights(p: ProMP, p0: ProMP) -> float:
    """Closed-form ``KL(N(mu_w, Sigma_w) || N(mu_w0, Sigma_w0))``."""
    m, c = kl_terms(p, p0)
    return m + c
