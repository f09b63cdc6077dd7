"""Randomized 2-D adaptation benchmarks with repellers, temporally unbound
waypoints or virtual walls.

Every environment starts from the same construction: a zero-mean, identity
weight-covariance 2-D Cartesian ProMP conditioned to start at ``(-3, y_start)``
and end at ``(3, y_end)``. Geometry is then sampled around its mean trajectory.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import multiprocessing as mp
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from cpromp.constraints import Constraint, Hyperplane, Repeller, UnboundWaypoint
from cpromp.errors import CProMPError, DomainError
from cpromp.objective import AdaptationProblem, CompiledLagrangian
from cpromp.optimizer import SolverConfig, adapt
from cpromp.promp import BasisConfig, ProMP, condition, kl_weights, sample_trajectories

log = logging.getLogger(__name__)

KINDS = ("repeller", "unbound-waypoint", "virtual-wall")
FAIL_THRESHOLD = 0.30
MAX_RETRIES = 100

ROW_FIELDS = ["kind", "count", "seed", "failed", "violation_rate", "normalized_kl", "outer_iters", "converged",
              "error"]
SUMMARY_FIELDS = ["kind", "count", "n", "failed", "failed_pct", "violations_mean_pct", "violations_std_pct",
                  "kl_mean", "kl_std", "converged", "union_bound_pct"]


@dataclass(frozen=True)
class BenchmarkConfig:
    """Fixed settings shared by every environment of a suite."""

    M: int = 15
    n_grid: int = 50
    alpha: float = 0.999
    eta: float = 300.0
    # one multiplier per unbound waypoint starts at a residual near 1, so its step
    # must stay below log(LAMBDA_MAX / lambda0) ~ 27.6 or the first update saturates
    eta_waypoint: float = 20.0
    start_noise: float = 0.01  # std of the start/end conditioning observations
    n_samples: int = 10_000
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(outer_max_iters=60))

    def basis(self) -> BasisConfig:
        return BasisConfig.uniform(self.M)


@dataclass(frozen=True)
class Environment:
    seed: int
    kind: str
    count: int
    original: ProMP
    start: tuple[float, float]
    end: tuple[float, float]
    obstacles: tuple = ()   # (center, radius)
    waypoints: tuple = ()   # (center, radius)
    walls: tuple = ()       # (normal, bias); allowed side is n^T (x - b) <= 0

    def constraints(self, alpha: float = 0.999, eta: float = 300.0) -> list[Constraint]:
        if self.kind == "repeller":
            return [Repeller(center=c, radius=r, alpha=alpha, eta=eta, name=f"obstacle{i}")
                    for i, (c, r) in enumerate(self.obstacles)]
        if self.kind == "unbound-waypoint":
            return [UnboundWaypoint(center=c, radius=r, alpha=alpha, eta=eta, name=f"waypoint{i}")
                    for i, (c, r) in enumerate(self.waypoints)]
        return [Hyperplane(normal=n, bias=b, alpha=alpha, eta=eta, name=f"wall{i}")
                for i, (n, b) in enumerate(self.walls)]

    def problem(self, cfg: BenchmarkConfig | None = None) -> AdaptationProblem:
        cfg = cfg or BenchmarkConfig()
        eta = cfg.eta_waypoint if self.kind == "unbound-waypoint" else cfg.eta
        return AdaptationProblem([self.original], self.constraints(cfg.alpha, eta), n_grid=cfg.n_grid)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "kind": self.kind, "count": self.count, "start": list(self.start),
                "end": list(self.end),
                "obstacles": [{"center": list(c), "radius": r} for c, r in self.obstacles],
                "waypoints": [{"center": list(c), "radius": r} for c, r in self.waypoints],
                "walls": [{"normal": list(n), "bias": list(b)} for n, b in self.walls],
                "original": self.original.to_dict()}


@dataclass(frozen=True)
class EvalMetrics:
    violation_rate: float
    normalized_kl: float
    failed: bool


def original_primitive(y_start: float, y_end: float, cfg: BenchmarkConfig | None = None) -> ProMP:
    """Zero-mean, identity-covariance 2-D ProMP pinned to ``(-3, y_start)`` and ``(3, y_end)``."""
    cfg = cfg or BenchmarkConfig()
    basis = cfg.basis()
    p = ProMP(2, basis, np.zeros(2 * cfg.M), np.eye(2 * cfg.M))
    obs = cfg.start_noise**2 * np.eye(2)
    p = condition(p, 0.0, [-3.0, y_start], obs)
    return condition(p, basis.T, [3.0, y_end], obs)


def _mean_point_and_normal(p: ProMP, t: float):
    """Mean position at ``t`` and the unit normal of the mean path there."""
    h = 1e-4 * p.T
    ts = np.clip([t - h, t, t + h], 0.0, p.T)
    pts = p.mean_trajectory(ts)
    tangent = pts[2] - pts[0]
    tangent /= np.linalg.norm(tangent)
    return pts[1], np.array([-tangent[1], tangent[0]])


def _rng(seed: int, kind: str, count: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), KINDS.index(kind), int(count)]))


def generate_environment(seed: int, kind: str, count: int, cfg: BenchmarkConfig | None = None) -> Environment:
    """Sample a benchmark environment; deterministic in ``(seed, kind, count)``.

    Geometry distributions: start/end heights ``U(-1, 1)``; obstacle radius
    ``U(0.3, 0.8)`` with center at a uniformly random time on the mean path,
    offset along the path normal by ``N(0, 0.5^2)`` and rejected if the disc
    covers the start or end point; waypoints of radius 0.3 placed the same
    way, pairwise at least 1.0 apart; walls with uniformly random normal
    direction placed ``U(0.5, 1.5)`` beyond the mean path point farthest along
    the normal, so the whole mean path (including start and end) is allowed.
    """
    if kind not in KINDS:
        raise DomainError(f"kind must be one of {KINDS}, got {kind!r}")
    if count not in (1, 2, 3):
        raise DomainError("count must be 1, 2 or 3")
    cfg = cfg or BenchmarkConfig()
    rng = _rng(seed, kind, count)
    y_s, y_e = rng.uniform(-1.0, 1.0, size=2)
    p = original_primitive(y_s, y_e, cfg)
    start, end = np.array([-3.0, y_s]), np.array([3.0, y_e])
    mean_path = p.mean_trajectory(np.linspace(0.0, p.T, 400))

    for _ in range(MAX_RETRIES):
        items = []
        ok = True
        for _ in range(count):
            if kind == "virtual-wall":
                ang = rng.uniform(0.0, 2.0 * math.pi)
                n = np.array([math.cos(ang), math.sin(ang)])
                margin = rng.uniform(0.5, 1.5)
                b = n * (np.max(mean_path @ n) + margin)
                items.append((tuple(n), tuple(b)))
                continue
            t = rng.uniform(0.0, p.T)
            point, normal = _mean_point_and_normal(p, t)
            center = point + rng.normal(0.0, 0.5) * normal
            radius = rng.uniform(0.3, 0.8) if kind == "repeller" else 0.3
            if kind == "repeller" and min(np.linalg.norm(center - start), np.linalg.norm(center - end)) <= radius:
                ok = False
                break
            if kind == "unbound-waypoint" and any(np.linalg.norm(center - np.asarray(c)) < 1.0 for c, _ in items):
                ok = False
                break
            items.append((tuple(center), float(radius)))
        if ok:
            geo = {"repeller": "obstacles", "unbound-waypoint": "waypoints", "virtual-wall": "walls"}[kind]
            return Environment(int(seed), kind, count, p, tuple(start), tuple(end), **{geo: tuple(items)})
    raise CProMPError(f"could not generate a valid {kind} environment for seed {seed} in {MAX_RETRIES} attempts")


def violations(env: Environment, X: np.ndarray) -> np.ndarray:
    """Per-sample violation flags for trajectories ``X`` of shape ``(n, n_t, 2)``."""
    if env.kind == "repeller":
        bad = np.zeros(len(X), dtype=bool)
        for c, r in env.obstacles:
            bad |= np.any(np.sum((X - np.asarray(c)) ** 2, axis=-1) < r * r, axis=1)
        return bad
    if env.kind == "unbound-waypoint":
        bad = np.zeros(len(X), dtype=bool)
        for c, r in env.waypoints:
            bad |= ~np.any(np.sum((X - np.asarray(c)) ** 2, axis=-1) <= r * r, axis=1)
        return bad
    bad = np.zeros(len(X), dtype=bool)
    for n, b in env.walls:
        bad |= np.any((X - np.asarray(b)) @ np.asarray(n) > 0.0, axis=1)
    return bad


def evaluate_adaptation(env: Environment, adapted: ProMP, n_samples: int = 10_000, seed: int = 0,
                        n_grid: int = 50) -> EvalMetrics:
    """Sampled violation rate on the grid, KL to the original divided by ``M``, and the failure flag."""
    if adapted.D != env.original.D or adapted.M != env.original.M:
        raise DomainError("adapted ProMP does not match the environment's primitive")
    times = adapted.basis.grid(n_grid)
    X = sample_trajectories(adapted, n_samples, times, seed=seed)
    rate = float(np.mean(violations(env, X)))
    nkl = max(kl_weights(adapted, env.original), 0.0) / adapted.M
    return EvalMetrics(rate, float(nkl), rate > FAIL_THRESHOLD)


def run_environment(seed: int, kind: str, count: int, cfg: BenchmarkConfig | None = None) -> dict:
    """Generate, adapt and evaluate one environment; errors become a failed row."""
    cfg = cfg or BenchmarkConfig()
    row = {"kind": kind, "count": count, "seed": seed}
    try:
        env = generate_environment(seed, kind, count, cfg)
        res = adapt(CompiledLagrangian(env.problem(cfg)), cfg.solver)
        met = evaluate_adaptation(env, res.adapted, cfg.n_samples, seed, cfg.n_grid)
        row.update(failed=met.failed, violation_rate=met.violation_rate, normalized_kl=met.normalized_kl,
                   outer_iters=res.iterations, converged=res.converged, error="")
    except (CProMPError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("environment %s/%d/%d failed: %s", kind, count, seed, exc)
        row.update(failed=True, violation_rate=math.nan, normalized_kl=math.nan, outer_iters=0, converged=False,
                   error=f"{type(exc).__name__}: {exc}")
    return row


def _worker(args):
    return run_environment(*args)


def env_seeds(master_seed: int, n_envs: int) -> list[int]:
    return [master_seed * 1_000_000 + i for i in range(n_envs)]


def run_suite(kind: str, counts: Sequence[int], n_envs: int, cfg: BenchmarkConfig | None = None,
              seed: int = 0, workers: int | None = None, progress=None) -> tuple[list[dict], list[dict]]:
    """Run ``n_envs`` environments per count; returns ``(rows, summary)``.

    ``workers`` defaults to the ``CPMP_THREADS`` environment variable (1 if unset);
    rows are sorted by ``(count, seed)`` so results do not depend on scheduling.
    """
    if kind not in KINDS:
        raise DomainError(f"kind must be one of {KINDS}, got {kind!r}")
    cfg = cfg or BenchmarkConfig()
    if workers is None:
        workers = int(os.environ.get("CPMP_THREADS", "1") or 1)
    jobs = [(s, kind, c, cfg) for c in counts for s in env_seeds(seed, n_envs)]
    rows = []
    if workers > 1:
        with mp.get_context("spawn").Pool(workers) as pool:
            for row in pool.imap_unordered(_worker, jobs):
                rows.append(row)
                if progress:
                    progress(row)
    else:
        for job in jobs:
            row = _worker(job)
            rows.append(row)
            if progress:
                progress(row)
    rows.sort(key=lambda r: (r["count"], r["seed"]))
    return rows, summarize(rows, cfg)


def summarize(rows: list[dict], cfg: BenchmarkConfig | None = None) -> list[dict]:
    """Per-count statistics; violation and KL statistics use the non-failed runs."""
    cfg = cfg or BenchmarkConfig()
    out = []
    for (kind, count) in sorted({(r["kind"], r["count"]) for r in rows}, key=lambda k: k[1]):
        rs = [r for r in rows if r["kind"] == kind and r["count"] == count]
        ok = [r for r in rs if not r["failed"]]
        v = np.array([r["violation_rate"] for r in ok]) * 100.0
        k = np.array([r["normalized_kl"] for r in ok])
        n_failed = sum(1 for r in rs if r["failed"])
        n_terms = count * (1 if kind == "unbound-waypoint" else cfg.n_grid)
        out.append({
            "kind": kind, "count": count, "n": len(rs), "failed": n_failed,
            "failed_pct": 100.0 * n_failed / len(rs),
            "violations_mean_pct": float(v.mean()) if len(v) else math.nan,
            "violations_std_pct": float(v.std()) if len(v) else math.nan,
            "kl_mean": float(k.mean()) if len(k) else math.nan,
            "kl_std": float(k.std()) if len(k) else math.nan,
            "converged": sum(1 for r in rs if r["converged"]),
            "union_bound_pct": min(100.0, 100.0 * (1.0 - cfg.alpha) * n_terms),
        })
    return out


def write_csv(path, rows: list[dict], fields: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in fields})


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 10))
    return v


def format_table(summary: list[dict]) -> str:
    """Aligned text table in the layout of the published results."""
    head = f"{'kind':<17}{'count':>5}{'n':>6}{'failed':>14}{'violations [%]':>20}{'normalized KL':>18}"
    lines = [head, "-" * len(head)]
    for s in summary:
        failed = f"{s['failed']} ({s['failed_pct']:.1f}%)"
        viol = f"{s['violations_mean_pct']:.2f} +- {s['violations_std_pct']:.2f}"
        kl = f"{s['kl_mean']:.2f} +- {s['kl_std']:.2f}"
        lines.append(f"{s['kind']:<17}{s['count']:>5}{s['n']:>6}{failed:>14}{viol:>20}{kl:>18}")
    return "\n".join(lines)
