"""Double-loop solver: L-BFGS descent in the Gaussian parameters, exponential
multiplier ascent in the Lagrange multipliers."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from cpromp.errors import NumericError
from cpromp.objective import AdaptationProblem, CompiledLagrangian
from cpromp.params import CholeskyParams
from cpromp.promp import ProMP, kl_weights

__all__ = ["CholeskyParams", "SolverConfig", "AdaptationResult", "LBFGSTrace", "lbfgs_minimize", "emm_step",
           "adapt"]

log = logging.getLogger(__name__)

LAMBDA_MIN, LAMBDA_MAX = 1e-12, 1e12


@dataclass(frozen=True)
class SolverConfig:
    """Stopping rules of the inner (L-BFGS) and outer (multiplier) loops."""

    lbfgs_memory: int = 10
    inner_max_iters: int = 100
    inner_grad_tol: float = 1e-6
    inner_ftol: float = 1e-12
    violation_patience: int = 5
    outer_max_iters: int = 300
    constraint_tol: float = 1e-4
    theta_tol: float = 1e-6
    c1: float = 1e-4
    c2: float = 0.9
    ls_max_iters: int = 40

    def __post_init__(self):
        for name in ("lbfgs_memory", "inner_max_iters", "inner_grad_tol", "violation_patience", "outer_max_iters",
                     "constraint_tol", "theta_tol", "ls_max_iters"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.inner_ftol >= 0:  # 0 disables the relative-decrease stop
            raise ValueError("inner_ftol must be non-negative")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("line search constants need 0 < c1 < c2 < 1")


@dataclass
class LBFGSTrace:
    values: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    n_evals: int = 0
    status: str = "running"  # converged | max_iters | stopped | line_search_failed

    @property
    def n_iters(self) -> int:
        return max(len(self.values) - 1, 0)


def lbfgs_minimize(f_and_grad: Callable, x0, cfg: SolverConfig | None = None, stop: Callable | None = None,
                   max_iters: int | None = None):
    """Minimize a smooth function with L-BFGS and a strong-Wolfe line search.

    ``f_and_grad(x) -> (f, g)``. ``stop(x, f, g) -> bool`` is checked after every
    accepted step. Returns ``(x_best, trace)``; a failed line search ends the run
    with ``trace.status == "line_search_failed"`` instead of raising.
    """
    cfg = cfg or SolverConfig()
    max_iters = cfg.inner_max_iters if max_iters is None else max_iters
    trace = LBFGSTrace()

    def fg(x):
        f, g = f_and_grad(x)
        trace.n_evals += 1
        return float(f), np.asarray(g, dtype=float)

    x = np.array(x0, dtype=float)
    f, g = fg(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericError("objective is not finite at the starting point")
    trace.values.append(f)
    trace.grad_norms.append(float(np.linalg.norm(g)))
    S, Y = [], []
    for _ in range(max_iters):
        if np.linalg.norm(g) < cfg.inner_grad_tol:
            trace.status = "converged"
            return x, trace
        p = _two_loop(g, S, Y)
        if not g @ p < 0:  # memory produced a non-descent direction
            S, Y = [], []
            p = -g
        if not S:
            p = p / max(1.0, float(np.linalg.norm(p)))
        found = _strong_wolfe(fg, x, f, g, p, cfg)
        if found is None and S:
            S, Y = [], []
            p = -g / max(1.0, float(np.linalg.norm(g)))
            found = _strong_wolfe(fg, x, f, g, p, cfg)
        if found is None:
            trace.status = "line_search_failed"
            return x, trace
        step, f_new, g_new = found
        x_new = x + step * p
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            if len(S) > cfg.lbfgs_memory:
                S.pop(0)
                Y.pop(0)
        small = f - f_new <= cfg.inner_ftol * max(abs(f), abs(f_new), 1.0)
        x, f, g = x_new, f_new, g_new
        trace.values.append(f)
        trace.grad_norms.append(float(np.linalg.norm(g)))
        if stop is not None and stop(x, f, g):
            trace.status = "stopped"
            return x, trace
        if small:  # progress is at the level of rounding noise
            trace.status = "converged"
            return x, trace
    trace.status = "converged" if np.linalg.norm(g) < cfg.inner_grad_tol else "max_iters"
    return x, trace


def _strong_wolfe(fg, x, f0, g0, p, cfg: SolverConfig, a1: float = 1.0, a_max: float = 1e10):
    """Bracketing/zoom line search for the strong Wolfe conditions.

    Non-finite trial values count as "step too long". Returns ``(step, f, g)``;
    if the Wolfe conditions are not met within ``cfg.ls_max_iters`` trials the
    best point with sufficient decrease is returned, or ``None``.
    """
    d0 = float(g0 @ p)
    c1, c2 = cfg.c1, cfg.c2
    best = None
    evals = 0

    def phi(a):
        nonlocal best, evals
        evals += 1
        f, g = fg(x + a * p)
        d = float(g @ p)
        ok = np.isfinite(f) and np.all(np.isfinite(g))
        if ok and f <= f0 + c1 * a * d0 and (best is None or f < best[1]):
            best = (a, f, g)
        return (f if ok else math.inf), d if ok else math.nan, g

    def zoom(lo, f_lo, d_lo, hi, f_hi, d_hi):
        while evals < cfg.ls_max_iters:
            a = _interpolate(lo, f_lo, d_lo, hi, f_hi, d_hi)
            f, d, g = phi(a)
            if not np.isfinite(f) or f > f0 + c1 * a * d0 or f >= f_lo:
                hi, f_hi, d_hi = a, f, d
            else:
                if abs(d) <= -c2 * d0:
                    return a, f, g
                if d * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo = a, f, d
            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        return None

    a_prev, f_prev, d_prev = 0.0, f0, d0
    a = a1
    first = True
    while evals < cfg.ls_max_iters:
        f, d, g = phi(a)
        if not np.isfinite(f) or f > f0 + c1 * a * d0 or (not first and f >= f_prev):
            res = zoom(a_prev, f_prev, d_prev, a, f, d)
            break
        if abs(d) <= -c2 * d0:
            return a, f, g
        if d >= 0:
            res = zoom(a, f, d, a_prev, f_prev, d_prev)
            break
        a_prev, f_prev, d_prev = a, f, d
        a = min(2.0 * a, a_max)
        first = False
    else:
        res = None
    if res is not None:
        return res
    return best


def _interpolate(lo, f_lo, d_lo, hi, f_hi, d_hi):
    """Safeguarded cubic (or quadratic) minimizer inside the bracket, else bisection."""
    left, right = min(lo, hi), max(lo, hi)
    width = right - left
    a = None
    if np.isfinite(f_hi) and np.isfinite(d_hi):
        d1 = d_lo + d_hi - 3.0 * (f_lo - f_hi) / (lo - hi)
        rad = d1 * d1 - d_lo * d_hi
        if rad >= 0:
            d2 = math.copysign(math.sqrt(rad), hi - lo)
            den = d_hi - d_lo + 2.0 * d2
            if den != 0:
                a = hi - (hi - lo) * (d_hi + d2 - d1) / den
    elif np.isfinite(f_hi):
        den = 2.0 * (f_hi - f_lo - d_lo * (hi - lo))
        if den > 0:
            a = lo - d_lo * (hi - lo) ** 2 / den
    if a is None or not np.isfinite(a) or a < left + 0.1 * width or a > right - 0.1 * width:
        a = 0.5 * (lo + hi)
    return a


def _two_loop(g, S, Y):
    q = -g.copy()
    if not S:
        return q
    rho = [1.0 / (y @ s) for s, y in zip(S, Y)]
    a = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
        ai = r * (s @ q)
        a.append(ai)
        q -= ai * y
    q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    for (s, y, r), ai in zip(zip(S, Y, rho), reversed(a)):
        b = r * (y @ q)
        q += (ai - b) * s
    return q


def emm_step(lam, C, eta):
    """Multiplicative multiplier update ``lambda * exp(eta * C)``, clamped to [1e-12, 1e12].

    Works elementwise on arrays. Returns ``(new_lambda, clamped_mask)``.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("multipliers must be non-negative")
    # the clip only avoids overflow warnings; the result is clamped below anyway
    raw = lam * np.exp(np.clip(np.asarray(eta, dtype=float) * np.asarray(C, dtype=float), -700.0, 700.0))
    new = np.clip(raw, LAMBDA_MIN, LAMBDA_MAX)
    clamped = new != raw
    if new.ndim == 0:
        return float(new), bool(clamped)
    return new, clamped


@dataclass
class AdaptationResult:
    adapted: ProMP
    lambdas: np.ndarray
    residuals: np.ndarray
    labels: list
    iterations: int
    converged: bool
    status: str  # converged | max_outer_iters | suspected_infeasible | line_search_failed
    kl: float
    objective: float
    trace: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    theta: np.ndarray | None = None

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residuals)) if len(self.residuals) else 0.0

    def diagnostics(self) -> dict:
        return {
            "converged": self.converged,
            "status": self.status,
            "iterations": self.iterations,
            "kl": self.kl,
            "objective": self.objective,
            "max_residual": self.max_residual,
            "terms": [{"label": l, "lambda": float(lam), "residual": float(c)}
                      for l, lam, c in zip(self.labels, self.lambdas, self.residuals)],
            "trace": self.trace,
            "notes": self.notes,
        }


def adapt(problem: AdaptationProblem | CompiledLagrangian, cfg: SolverConfig | None = None,
          callback: Callable | None = None) -> AdaptationResult:
    """Adapt the original ProMP(s) of ``problem`` to satisfy its constraints.

    Inner loop: L-BFGS on the Lagrangian at fixed multipliers, warm-started, stopped
    by L-BFGS convergence, its iteration cap, or ``violation_patience``
    consecutive increases of the largest residual while it exceeds
    ``constraint_tol``. Outer loop: one exponential multiplier step per term. Converged once every residual is at most
    ``constraint_tol`` and the parameters moved less than ``theta_tol``.
    """
    cfg = cfg or SolverConfig()
    comp = problem if isinstance(problem, CompiledLagrangian) else CompiledLagrangian(problem)
    u = comp.u0()
    theta = comp.u_to_theta(u)
    lam = comp.lambda0.copy()
    etas = comp.etas
    trace, notes = [], []
    status = "max_outer_iters"
    converged = False
    n_iter = 0
    obj, C = comp.residuals_u(u)
    if comp.n_terms == 0:
        converged, status = True, "converged"
    clamp_streak = 0
    best_max = math.inf

    for r in range(cfg.outer_max_iters if comp.n_terms else 0):
        n_iter = r + 1
        state = {"prev": None, "ups": 0, "seen": {}}

        def f_and_grad(x):
            v, g, Cv, _ = comp.value_and_grad_u(x, lam)
            if len(state["seen"]) > 64:
                state["seen"].clear()
            state["seen"][x.tobytes()] = float(np.max(Cv))
            return v, g

        def stop(x, f, g):
            m = state["seen"].get(x.tobytes())
            if m is None:
                m = float(np.max(comp.residuals_u(x)[1]))
            # only growth of an actual violation (above the tolerance) counts
            if state["prev"] is not None and m > state["prev"] and m > cfg.constraint_tol:
                state["ups"] += 1
            else:
                state["ups"] = 0
            state["prev"] = m
            return state["ups"] >= cfg.violation_patience

        u, tr = lbfgs_minimize(f_and_grad, u, cfg, stop)
        new = comp.u_to_theta(u)
        dtheta = float(np.max(np.abs(new - theta)))
        theta = new
        obj, C = comp.residuals_u(u)
        mC = float(np.max(C))
        trace.append({"outer": r, "lagrangian": tr.values[-1], "objective": obj, "max_residual": mC,
                      "inner_iters": tr.n_iters, "inner_evals": tr.n_evals, "inner_status": tr.status,
                      "dtheta": dtheta})
        if callback is not None:
            callback(r, theta, lam, C)
        if mC <= cfg.constraint_tol and dtheta < cfg.theta_tol:
            converged, status = True, "converged"
            break
        lam, clamped = emm_step(lam, C, etas)
        if np.any(clamped) and not any(n.startswith("multiplier clamp") for n in notes):
            notes.append(f"multiplier clamp [{LAMBDA_MIN:g}, {LAMBDA_MAX:g}] first reached at outer iteration {r}")
        if np.any(clamped & (C > 0)):
            clamp_streak = clamp_streak + 1 if mC >= best_max - 1e-12 else 0
            if clamp_streak >= 5:
                status = "suspected_infeasible"
                notes.append(f"multipliers hit the upper clamp while the residual plateaued at {mC:.3g}")
                break
        best_max = min(best_max, mC)

    if not converged and status == "max_outer_iters":
        notes.append(f"outer iteration cap {cfg.outer_max_iters} reached (max residual {float(np.max(C)):.3g})")
    adapted = comp.to_promp(theta)
    try:
        kl = kl_weights(adapted, comp.problem.reference) if comp.problem.objective.variant != "combination" else obj
    except NumericError:
        kl = math.inf
    return AdaptationResult(adapted, lam, C, comp.labels, n_iter, converged, status, float(kl), float(obj),
                            trace, notes, theta)
