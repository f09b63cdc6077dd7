import math

import numpy as np
import pytest

from cpromp.benchmark import (
    KINDS,
    ROW_FIELDS,
    SUMMARY_FIELDS,
    BenchmarkConfig,
    evaluate_adaptation,
    format_table,
    generate_environment,
    original_primitive,
    run_environment,
    run_suite,
    summarize,
    violations,
    write_csv,
)
from cpromp.errors import DomainError
from cpromp.optimizer import SolverConfig
from cpromp.promp import marginal_moments


def test_original_primitive_hits_endpoints():
    p = original_primitive(0.4, -0.7)
    np.testing.assert_allclose(marginal_moments(p, 0.0).mean, [-3.0, 0.4], atol=1e-3)
    np.testing.assert_allclose(marginal_moments(p, 1.0).mean, [3.0, -0.7], atol=1e-3)
    assert np.trace(marginal_moments(p, 0.0).cov) < 1e-3
    assert np.trace(marginal_moments(p, 0.5).cov) > 0.1


@pytest.mark.parametrize("kind", KINDS)
def test_generation_is_deterministic(kind):
    a = generate_environment(7, kind, 2)
    b = generate_environment(7, kind, 2)
    assert a.to_dict() == b.to_dict()
    assert generate_environment(8, kind, 2).to_dict() != a.to_dict()


def test_repellers_leave_endpoints_free():
    for seed in range(30):
        env = generate_environment(seed, "repeller", 3)
        assert len(env.obstacles) == 3
        for c, r in env.obstacles:
            assert 0.3 <= r <= 0.8
            for x in (env.start, env.end):
                assert np.linalg.norm(np.subtract(c, x)) > r


def test_waypoints_are_separated():
    for seed in range(30):
        env = generate_environment(seed, "unbound-waypoint", 3)
        cs = np.array([c for c, _ in env.waypoints])
        assert all(r == 0.3 for _, r in env.waypoints)
        d = np.linalg.norm(cs[:, None] - cs[None], axis=-1) + np.eye(3) * 10
        assert d.min() >= 1.0


def test_walls_allow_the_whole_mean_path():
    for seed in range(30):
        env = generate_environment(seed, "virtual-wall", 3)
        path = env.original.mean_trajectory(np.linspace(0, 1, 200))
        for n, b in env.walls:
            assert np.linalg.norm(n) == pytest.approx(1.0)
            g = (path - np.asarray(b)) @ np.asarray(n)
            assert g.max() <= -0.5 + 1e-6 and g.max() >= -1.5 - 1e-6


def test_generation_errors():
    with pytest.raises(DomainError):
        generate_environment(0, "maze", 1)
    with pytest.raises(DomainError):
        generate_environment(0, "repeller", 4)


def test_violation_indicators():
    env = generate_environment(0, "repeller", 1)
    (c, r), = env.obstacles
    inside = np.tile(np.asarray(c), (1, 5, 1))
    far = np.full((1, 5, 2), 100.0)
    np.testing.assert_array_equal(violations(env, np.concatenate([inside, far])), [True, False])

    env = generate_environment(0, "unbound-waypoint", 1)
    (c, r), = env.waypoints
    X = np.full((2, 5, 2), 100.0)
    X[0, 3] = c  # one visit anywhere in time is enough
    np.testing.assert_array_equal(violations(env, X), [False, True])

    env = generate_environment(0, "virtual-wall", 1)
    (n, b), = env.walls
    X = np.tile(np.asarray(b) - np.asarray(n), (2, 5, 1))
    X[1, 2] = np.asarray(b) + 0.1 * np.asarray(n)
    np.testing.assert_array_equal(violations(env, X), [False, True])


def test_evaluation_of_the_original():
    env = generate_environment(3, "repeller", 2)
    m = evaluate_adaptation(env, env.original, n_samples=2000)
    assert abs(m.normalized_kl) < 1e-10 and 0.0 <= m.violation_rate <= 1.0
    assert m.failed == (m.violation_rate > 0.3)


def test_single_environment_run():
    cfg = BenchmarkConfig(n_samples=2000, solver=SolverConfig(outer_max_iters=40))
    row = run_environment(1, "virtual-wall", 1, cfg)
    assert set(row) == set(ROW_FIELDS)
    assert row["error"] == "" and not row["failed"]
    assert row["violation_rate"] < 0.05 and row["normalized_kl"] > 0
    assert row == run_environment(1, "virtual-wall", 1, cfg)


def test_suite_failure_row_and_summary(monkeypatch):
    import cpromp.benchmark as bm

    def boom(*a, **k):
        raise DomainError("synthetic")

    monkeypatch.setattr(bm, "adapt", boom)
    rows, summary = run_suite("repeller", [1], 3, BenchmarkConfig(n_samples=100), workers=1)
    assert [r["seed"] for r in rows] == [0, 1, 2]
    assert all(r["failed"] and "synthetic" in r["error"] for r in rows)
    assert summary[0]["failed"] == 3 and math.isnan(summary[0]["kl_mean"])


def test_summary_statistics_and_outputs(tmp_path):
    rows = [
        {"kind": "repeller", "count": 1, "seed": 0, "failed": False, "violation_rate": 0.01, "normalized_kl": 0.2,
         "outer_iters": 5, "converged": True, "error": ""},
        {"kind": "repeller", "count": 1, "seed": 1, "failed": False, "violation_rate": 0.03, "normalized_kl": 0.4,
         "outer_iters": 7, "converged": True, "error": ""},
        {"kind": "repeller", "count": 1, "seed": 2, "failed": True, "violation_rate": 0.5, "normalized_kl": 9.0,
         "outer_iters": 60, "converged": False, "error": ""},
    ]
    s, = summarize(rows)
    assert set(s) == set(SUMMARY_FIELDS)
    assert s["n"] == 3 and s["failed"] == 1 and s["failed_pct"] == pytest.approx(100 / 3)
    assert s["violations_mean_pct"] == pytest.approx(2.0) and s["violations_std_pct"] == pytest.approx(1.0)
    assert s["kl_mean"] == pytest.approx(0.3) and s["converged"] == 2
    assert s["union_bound_pct"] == pytest.approx(5.0)

    write_csv(tmp_path / "rows.csv", rows, ROW_FIELDS)
    lines = (tmp_path / "rows.csv").read_text().splitlines()
    assert lines[0] == ",".join(ROW_FIELDS) and lines[3].startswith("repeller,1,2,1,0.5,9.0,60,0,")
    table = format_table([s])
    assert "1 (33.3%)" in table and "2.00 +- 1.00" in table and "0.30 +- 0.10" in table
