"""Ready-made adaptation problems: a 1-D limits toy and a planar dual-arm task."""
from __future__ import annotations

import numpy as np

from cpromp.constraints import (
    Hyperplane,
    JointLimit,
    MutualAvoidance,
    NonConvexCorner,
    Repeller,
    Smoothness,
    UnboundWaypoint,
    Waypoint,
    smoothness_matrix,
    smoothness_moments,
)
from cpromp.kinematics import forward_kinematics
from cpromp.kinematics import KinematicChain
from cpromp.objective import AdaptationProblem, ObjectiveSpec
from cpromp.promp import BasisConfig, DemoSet, ProMP, condition, learn_em

# 1-D toy: wide prior pinned at a via-point, a rising lower limit early on and a band later.
TOY_VIA = (0.3, 1.0)
TOY_LOWER_SUPPORT = (0.0, 0.5)
TOY_BAND = (-1.0, 1.5)
TOY_BAND_SUPPORT = (0.6, 1.0)


def toy_lower_limit(t):
    return -3.0 + 5.0 * np.asarray(t, dtype=float)


def limits_toy_problem(kappa: float = 0.0, M: int = 15, n_grid: int = 50, alpha: float = 0.999,
                       eta: float = 0.5) -> AdaptationProblem:
    """Univariate primitive with a via-point, a time-varying lower limit and a two-sided band."""
    basis = BasisConfig.uniform(M)
    prior = ProMP(1, basis, np.zeros(M), 4.0 * np.eye(M))
    original = condition(prior, TOY_VIA[0], [TOY_VIA[1]], 1e-4 * np.eye(1))
    times = basis.grid(n_grid)
    early = JointLimit(joint=0, lower=0.0, support=TOY_LOWER_SUPPORT).support_indices(times)
    cons = [
        JointLimit(joint=0, lower=tuple(toy_lower_limit(times[early])), support=TOY_LOWER_SUPPORT, alpha=alpha,
                   eta=eta, name="rising-lower"),
        JointLimit(joint=0, lower=TOY_BAND[0], upper=TOY_BAND[1], support=TOY_BAND_SUPPORT, alpha=alpha, eta=eta,
                   name="band"),
    ]
    return AdaptationProblem([original], cons, objective=ObjectiveSpec(smoothness_kappa=kappa), n_grid=n_grid)


def simulate_demos(q_start, q_goal, n: int, rng: np.random.Generator, T: float = 1.0, steps: int = 200,
                   noise: float = 3.0, stiffness: float = 25.0, damping: float = 10.0) -> DemoSet:
    """Joint trajectories of a double-integrator tracking a smooth-step reference.

    The start is fixed and the accelerations receive white noise of intensity ``noise``.
    """
    q_start = np.asarray(q_start, dtype=float)
    q_goal = np.asarray(q_goal, dtype=float)
    dt = T / steps
    ts = np.linspace(0.0, T, steps + 1)
    s = 3 * (ts / T) ** 2 - 2 * (ts / T) ** 3
    ref = q_start + np.outer(s, q_goal - q_start)
    out = []
    for _ in range(n):
        q, v = q_start.copy(), np.zeros_like(q_start)
        Y = [q.copy()]
        for k in range(steps):
            acc = stiffness * (ref[k] - q) - damping * v + noise * rng.standard_normal(q.size) / np.sqrt(dt)
            v = v + dt * acc
            q = q + dt * v
            Y.append(q.copy())
        out.append((ts, np.array(Y)))
    return DemoSet(out)


DUAL_START = np.array([1.9, -0.2, -0.2, -0.2])
DUAL_GOAL = np.array([0.9, -0.5, -0.6, -0.6])


def dual_arm_chains() -> tuple[KinematicChain, KinematicChain]:
    """Two 4-link unit arms facing each other; the second is mirrored about x = 0."""
    links = (1.0, 1.0, 1.0, 1.0)
    return KinematicChain(links, (-2.0, 0.0, 0.0)), KinematicChain(links, (2.0, 0.0, np.pi))


def dual_arm_primitives(seed: int = 0, M: int = 8, n_demos: int = 30, noise: float = 3.0) -> list[ProMP]:
    """Independently learned primitives whose end effectors meet mid-motion.

    The second arm runs the negated joint trajectory of the first, which mirrors
    its motion; each primitive is conditioned on its final configuration.
    """
    rng = np.random.default_rng(seed)
    basis = BasisConfig.uniform(M)
    out = []
    for a, b in ((DUAL_START, DUAL_GOAL), (-DUAL_START, -DUAL_GOAL)):
        p = learn_em(simulate_demos(a, b, n_demos, rng, noise=noise), basis)
        out.append(condition(p, basis.T, b, 1e-6 * np.eye(len(b))))
    return out


def dual_arm_problem(variant: str = "joint-kl", seed: int = 0, d_end: float = 0.4, d_c: float = 0.8,
                     alpha: float = 0.999, eta: float = 50.0, n_grid: int = 50, M: int = 8) -> AdaptationProblem:
    """End effectors keep ``d_end`` apart; each end effector keeps ``d_c`` from the other arm's last joint."""
    kw = dict(alpha=alpha, eta=eta)
    cons = [
        MutualAvoidance(block1=0, poi1="end", block2=1, poi2="end", distance=d_end, name="end-end", **kw),
        MutualAvoidance(block1=0, poi1="link3", block2=1, poi2="end", distance=d_c, name="joint1-end2", **kw),
        MutualAvoidance(block1=0, poi1="end", block2=1, poi2="link3", distance=d_c, name="end1-joint2", **kw),
    ]
    return AdaptationProblem(dual_arm_primitives(seed, M), cons, chains=dual_arm_chains(),
                             objective=ObjectiveSpec(variant=variant), n_grid=n_grid)


def cross_correlation(p: ProMP, n_first: int) -> float:
    """Mean absolute weight correlation between the first ``n_first`` weights and the rest."""
    sd = np.sqrt(np.diag(p.Sigma_w))
    corr = p.Sigma_w / np.outer(sd, sd)
    return float(np.mean(np.abs(corr[:n_first, n_first:])))


GRADIENT_FAMILIES = ("joint_limit", "smoothness", "hyperplane", "waypoint", "repeller", "unbound_waypoint",
                     "corner", "mutual")


def random_promp(D: int, M: int, rng: np.random.Generator, scale: float = 0.3) -> ProMP:
    """ProMP with random mean and a well-conditioned random weight covariance."""
    basis = BasisConfig.uniform(M)
    n = D * M
    A = rng.standard_normal((n, n)) / np.sqrt(n)
    S = scale**2 * (A @ A.T + 0.5 * np.eye(n))
    return ProMP(D, basis, 0.5 * rng.standard_normal(n), S)


def random_gradient_problem(family: str, D: int = 2, M: int = 4, seed: int = 0, n_grid: int = 12):
    """Small random problem exercising one constraint family, plus a perturbed parameter point.

    Task-space families use a planar chain with ``D`` unit-ish links (``D >= 2``);
    ``mutual`` splits ``D`` joints into two arms. Returns ``(problem, theta, lambdas)``.
    """
    from cpromp.objective import CompiledLagrangian

    if family not in GRADIENT_FAMILIES:
        raise ValueError(f"family must be one of {GRADIENT_FAMILIES}")
    if family != "joint_limit" and family != "smoothness" and D < 2:
        raise ValueError("task-space families need D >= 2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, GRADIENT_FAMILIES.index(family), D, M]))
    chains = None
    kw = dict(alpha=float(rng.uniform(0.9, 0.999)))
    if family == "mutual":
        d1 = D // 2
        promps = [random_promp(d1, M, rng), random_promp(D - d1, M, rng)]
        chains = [KinematicChain(tuple(rng.uniform(0.5, 1.0, d1)), (-0.5, 0.0, 0.0)),
                  KinematicChain(tuple(rng.uniform(0.5, 1.0, D - d1)), (0.5, 0.0, np.pi))]
        cons = [MutualAvoidance(block1=0, poi1="end", block2=1, poi2="end", distance=0.5, **kw)]
        problem = AdaptationProblem(promps, cons, chains=chains, n_grid=n_grid)
    else:
        p = random_promp(D, M, rng)
        times = p.basis.grid(n_grid)
        if family == "joint_limit":
            j = int(rng.integers(D))
            m = p.mean_trajectory(times)[:, j]
            cons = [JointLimit(joint=j, lower=tuple(m - rng.uniform(0.2, 0.6, len(m))),
                               upper=tuple(m + rng.uniform(0.2, 0.6, len(m))), **kw)]
        elif family == "smoothness":
            ER = smoothness_moments(p, smoothness_matrix(p.basis))[0]
            cons = [Smoothness(bound=0.7 * ER, **kw)]
        else:
            chains = [KinematicChain(tuple(rng.uniform(0.5, 1.0, D)))]
            t = float(rng.uniform(0.2, 0.8))
            x = forward_kinematics(chains[0], p.mean_trajectory([t])[0], "end")
            sup = dict(support=(t - 0.2, t + 0.2))
            ang = rng.uniform(0, 2 * np.pi)
            nrm = np.array([np.cos(ang), np.sin(ang)])
            off = rng.normal(0.0, 0.2, 2)
            if family == "hyperplane":
                cons = [Hyperplane(normal=nrm, bias=x + 0.1 * nrm, **sup, **kw)]
            elif family == "waypoint":
                cons = [Waypoint(center=x + off, radius=0.3, **sup, **kw)]
            elif family == "repeller":
                cons = [Repeller(center=x + off, radius=0.3, **sup, **kw)]
            elif family == "unbound_waypoint":
                cons = [UnboundWaypoint(center=x + off, radius=0.3, **kw)]
            else:
                n2 = np.array([-nrm[1], nrm[0]])
                cons = [NonConvexCorner(normal1=nrm, bias1=x - 0.1 * nrm, normal2=n2, bias2=x - 0.1 * n2,
                                        pois=("end", f"link{D - 1}"), **sup, **kw)]
        problem = AdaptationProblem([p], cons, chains=chains, n_grid=n_grid)
    comp = CompiledLagrangian(problem)
    th = comp.theta0()
    n = comp.n
    k = n * (n - 1) // 2
    th = th + np.concatenate([0.2 * rng.standard_normal(n), 0.02 * rng.standard_normal(k),
                              0.1 * rng.standard_normal(n)])
    lam = rng.uniform(0.5, 2.0, comp.n_terms)
    return comp, th, lam
