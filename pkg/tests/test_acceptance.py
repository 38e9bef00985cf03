"""Acceptance criteria, each run at its stated tolerance and time budget.

Every test prints one ``PASS``/``FAIL`` line; the lines are repeated in the
terminal summary by ``conftest.py``.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from contrastive_dynamics.experiments import (
    TAU_GRID,
    CompareConfig,
    cluster_flow_check,
    compare_dynamics,
    gradient_suite,
    ill_posedness_check,
    invariance_check,
    kernel_convergence,
    kernel_exactness_check,
    scaled_map_check,
    second_variation_suite,
    stationarity_suite,
    sweep_clusters,
    sweep_min_distance,
    sweep_tau_threshold,
)


def check(number, name, budget, run, verdict):
    """Run ``run()``, evaluate ``verdict(result) -> (ok, detail)`` and assert both it and the budget."""
    start = time.perf_counter()
    result = run()
    elapsed = time.perf_counter() - start
    ok, detail = verdict(result)
    in_time = elapsed < budget
    status = "PASS" if ok and in_time else "FAIL"
    line = f"criterion {number}: {status} {name} ({detail}; {elapsed:.1f}s of {budget}s)"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line
    assert in_time, line


class TestAcceptance:
    def test_01_gradient_correctness(self):
        check(1, "gradients vs finite differences", 10, lambda: gradient_suite(20),
              lambda r: (r["max"] <= 1e-5, f"max rel err {r['max']:.2e}"))

    def test_02_stationarity(self):
        check(2, "roots of unity and single point stationary", 5, lambda: stationarity_suite(range(2, 17)),
              lambda r: (max(r.values()) <= 1e-8, f"max tangential {max(r.values()):.2e}"))

    def test_03_second_variation(self):
        def verdict(r):
            values = [v for entry in r.values() for v in entry["values"]]
            return (len(values) == 200 and min(values) > 0,
                    f"{len(values)} directions, min {min(values):.2e}")

        check(3, "second variation positive", 10, lambda: second_variation_suite((2, 3), 100), verdict)

    def test_04_ill_posedness(self):
        def verdict(r):
            ok = r["inputs_differ"] > 0 and r["two_view_gap"] <= 1e-3 and r["latent_gap"] <= 1e-12
            return ok, f"two-view gap {r['two_view_gap']:.2e}, latent gap {r['latent_gap']:.2e}"

        check(4, "identical pushforwards give equal losses", 20, lambda: ill_posedness_check(mc_samples=10_000),
              verdict)

    def test_05_kernel_exactness(self):
        check(5, "analytic kernel equals weight-gradient Gram", 10, lambda: kernel_exactness_check(10),
              lambda r: (r["max_error"] <= 1e-12 and r["max_off_block"] == 0.0,
                         f"max err {r['max_error']:.2e}, off-block {r['max_off_block']}"))

    def test_06_infinite_width(self):
        def verdict(r):
            ratios = list(r["ratios"].values())
            return all(2.5 <= q <= 6.5 for q in ratios), "ratios " + ", ".join(f"{q:.2f}" for q in ratios)

        check(6, "finite-width kernel converges", 60,
              lambda: kernel_convergence((256, 4096), (0.0, np.pi / 4, np.pi / 2), seeds=20), verdict)

    def test_07_invariance(self):
        check(7, "invariance preserved by vanilla, lost by weight-space", 60, lambda: invariance_check(10, 500),
              lambda r: (r["duplicates_identical"] and r["broken_seeds"] >= 8,
                         f"duplicates identical={r['duplicates_identical']}, broken {r['broken_seeds']}/10"))

    def test_08_clustered_flow(self):
        check(8, "clustered-flow approximation", 30, lambda: cluster_flow_check((0.1, 0.05, 0.01)),
              lambda r: (r["zero_noise_spread"] <= 1e-10 and 0.7 <= r["slope"] <= 1.3,
                         f"zero-noise spread {r['zero_noise_spread']:.1e}, slope {r['slope']:.3f}"))

    def test_09_loss_sweeps(self):
        def run():
            return (sweep_clusters(range(1, 65), [0.05, 0.1]), sweep_min_distance(8, None, [0.1]),
                    sweep_tau_threshold(TAU_GRID))

        def verdict(r):
            clusters, distance, tau = r
            ok = (all(s.non_increasing() and s.plateau is not None for s in clusters)
                  and all(s.non_increasing() and s.plateau is not None for s in distance)
                  and tau.r2 >= 0.95)
            plateaus = ", ".join(f"{s.label} K={s.plateau:g}" for s in clusters if s.plateau is not None)
            return ok, f"plateaus {plateaus}; threshold {distance[0].plateau:.3f}; R^2 {tau.r2:.3f}"

        check(9, "loss sweeps", 120, run, verdict)

    @pytest.mark.slow
    def test_10_dynamics_comparison(self):
        def verdict(reports):
            passed = sum(r.passed for r in reports)
            return passed >= 8, f"{passed}/10 seeds reach both milestones"

        check(10, "kernel path clusters, vanilla path disperses", 180,
              lambda: [compare_dynamics(CompareConfig(seed=s)) for s in range(10)], verdict)

    def test_11_scaled_map(self):
        def verdict(r):
            norms = np.array(r["norms"])
            return (bool(np.all(np.diff(norms) <= 0)) and norms[-1] < 1e-10,
                    f"k={r['scales'][-1]:g} norm {norms[-1]:.1e}")

        check(11, "scaled-map gradient decay", 5, scaled_map_check, verdict)
