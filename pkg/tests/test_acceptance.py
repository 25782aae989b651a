"""Numbered acceptance criteria; each records a PASS/FAIL line shown in the run summary."""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from helpers import analytic_adjacency, central_cut, chain_distance, jitter, relative_pose_error

from fragsolve.dataset_io import (
    RenderScale,
    discover_groups,
    load_group,
    load_group_2d,
    load_solution,
    mm_to_px,
    save_group_2d,
    save_solution,
)
from fragsolve.fragments import Fragment2D, Pose2D, Puzzle, Solution
from fragsolve.geometry import Polyline, douglas_peucker, procrustes_two_point
from fragsolve.metrics import MetricsConfig, build_mating_graph, evaluate
from fragsolve.puzzle_gen import GenConfig, generate_puzzle, synthetic_image
from fragsolve.solver_genetic import GeneticConfig, evolve_generation, gt_fitness, initial_population, solve_genetic
from fragsolve.solver_greedy import GreedyAssembler, GreedyConfig, segment_contour, solve_greedy


def _metric_vector(rep):
    return np.array([rep.q_pos, rep.rmse_translation, rep.rmse_rotation, rep.precision, rep.recall, rep.f1])


def test_criterion_01_metric_identity(acceptance):
    t0 = time.perf_counter()
    failures = []
    for k in range(50):
        cfg = GenConfig(n_cuts=1 + k % 6, erosion_px=(k % 4) * 2, erosion_jitter=0.5 * (k % 2), seed=1000 + k)
        img = synthetic_image(192 + 32 * (k % 3), 224, seed=k)
        puzzle = generate_puzzle(img, cfg, group_id=f"g{k}")
        rep = evaluate(puzzle.ground_truth, puzzle)
        integer_angles = all(float(p.theta_deg).is_integer() for p in puzzle.ground_truth.poses.values())
        q_ok = rep.q_pos == 1.0 if integer_angles else abs(rep.q_pos - 1.0) <= 0.02
        if not (q_ok and rep.rmse_translation == 0 and rep.rmse_rotation == 0 and rep.precision == rep.recall == rep.f1 == 1.0):
            failures.append((k, _metric_vector(rep)))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    acceptance(1, ok, f"50 puzzles, {len(failures)} mismatches, {elapsed:.1f}s (limit 120s)")
    assert ok, failures


def test_criterion_02_gauge_invariance(acceptance):
    worst = np.zeros(6)
    for k in range(20):
        img = synthetic_image(160, 160, seed=50 + k)
        puzzle = generate_puzzle(img, GenConfig(n_cuts=2 + k % 3, erosion_px=k % 3, seed=200 + k))
        rng = np.random.default_rng(k)
        noisy = jitter(puzzle.ground_truth, rng, 3.0, 3.0)
        base = _metric_vector(evaluate(noisy, puzzle))
        for _ in range(10):
            g = Pose2D(rng.uniform(-500, 500), rng.uniform(-500, 500), rng.uniform(-180, 180)).to_transform()
            moved = Solution({fid: Pose2D.from_transform(g.compose(p.to_transform())) for fid, p in noisy.poses.items()})
            worst = np.maximum(worst, np.abs(_metric_vector(evaluate(moved, puzzle)) - base))
    ok = worst[0] <= 0.02 and np.all(worst[1:] <= 1e-6)
    acceptance(2, ok, f"max |dQ|={worst[0]:.2g}, max other diff={worst[1:].max():.2g}")
    assert ok, worst


def test_criterion_03_monotone_degradation(acceptance):
    sigmas = [0.0, 2.0, 8.0, 32.0]
    q = {s: [] for s in sigmas}
    rt = {s: [] for s in sigmas}
    rr = {s: [] for s in sigmas}
    for seed in range(20):
        img = synthetic_image(160, 160, seed=seed)
        puzzle = generate_puzzle(img, GenConfig(n_cuts=3, seed=300 + seed))
        for s in sigmas:
            rep = evaluate(jitter(puzzle.ground_truth, np.random.default_rng([seed, int(s)]), s, s), puzzle)
            q[s].append(rep.q_pos)
            rt[s].append(rep.rmse_translation)
            rr[s].append(rep.rmse_rotation)
    mq = [float(np.median(q[s])) for s in sigmas]
    mt = [float(np.median(rt[s])) for s in sigmas]
    mr = [float(np.median(rr[s])) for s in sigmas]
    ok = all(a > b for a, b in zip(mq, mq[1:])) and all(a < b for a, b in zip(mt, mt[1:])) and all(
        a < b for a, b in zip(mr, mr[1:])
    )
    acceptance(
        3,
        ok,
        "median Q " + "/".join(f"{v:.3f}" for v in mq) + ", RMSE_t " + "/".join(f"{v:.1f}" for v in mt),
    )
    assert ok, (mq, mt, mr)


def test_criterion_04_mating_graph_oracle(acceptance):
    mismatches = []
    for k in range(20):
        img = synthetic_image(192, 192, seed=k)
        puzzle = generate_puzzle(img, GenConfig(n_cuts=1 + k % 4, seed=400 + k))
        graph = set(build_mating_graph(puzzle.fragments, puzzle.ground_truth).edges)
        oracle = analytic_adjacency(puzzle.extras)
        if graph != oracle:
            mismatches.append((k, graph ^ oracle))
    ok = not mismatches
    acceptance(4, ok, f"20 instances, {len(mismatches)} graph mismatches")
    assert ok, mismatches


def test_criterion_05_geometry_oracles(acceptance):
    rng = np.random.default_rng(5)
    worst_dp = -math.inf
    for i in range(100):
        n = int(rng.integers(3, 60))
        pts = np.cumsum(rng.normal(0, 3, (n, 2)), axis=0)
        eps = float(rng.uniform(0.2, 5.0))
        simple = douglas_peucker(Polyline(pts), eps).points
        worst_dp = max(worst_dp, float((chain_distance(pts, simple) - eps).max()))
    worst_pc = 0.0
    for _ in range(1000):
        s1, s2, d1, d2 = rng.uniform(-100, 100, (4, 2))
        a = procrustes_two_point(s1, s2, d1, d2)
        b = procrustes_two_point(s1, s2, d1, d2, method="relaxation")
        probe = np.vstack([s1, s2])
        worst_pc = max(worst_pc, float(np.abs(a.apply(probe) - b.apply(probe)).max()))
    ok = worst_dp <= 1e-9 and worst_pc < 1e-6
    acceptance(5, ok, f"DP max excess {worst_dp:.2g} px; closed form vs relaxation {worst_pc:.2g}")
    assert ok


@pytest.fixture(scope="module")
def bisected_square():
    img = synthetic_image(64, 64, seed=0)
    return generate_puzzle(img, GenConfig(n_cuts=1, seed=0), cuts=[((0.0, 32.0), (64.0, 32.0))])


def test_criterion_06_genetic_sanity(acceptance, bisected_square):
    puzzle = bisected_square
    target = gt_fitness(puzzle)
    near, monotone = 0, 0
    finals = []
    for seed in range(10):
        res = solve_genetic(puzzle, GeneticConfig(population=64, generations=500, seed=seed))
        finals.append(res.fitness)
        near += res.fitness <= 1.05 * target
        monotone += all(a >= b for a, b in zip(res.trace, res.trace[1:]))
    cfg = GeneticConfig(population=64, seed=0)
    rng = np.random.default_rng(0)
    pop = initial_population(puzzle, cfg, rng)
    new_pop, _ = evolve_generation(pop, puzzle, cfg, rng)
    replaced = sum(not any(c is p for p in pop) for c in new_pop)
    ok = near >= 8 and monotone == 10 and replaced == 16
    acceptance(6, ok, f"GT fitness {target:.0f}; within 5% in {near}/10; monotone {monotone}/10; replaced {replaced}/64")
    assert ok, finals


def test_criterion_07_greedy_exactness(acceptance):
    two_ok = 0
    worst = (0.0, 0.0)
    for seed in range(10):
        img = synthetic_image(128, 128, seed=seed)
        puzzle = generate_puzzle(img, GenConfig(n_cuts=1, seed=seed), cuts=central_cut(128, np.random.default_rng(seed)))
        sol = solve_greedy(puzzle, GreedyConfig(seed=seed)).solution
        rep = evaluate(sol, puzzle)
        a, b = sorted(puzzle.ids, key=lambda i: (-puzzle.fragment(i).area, i))
        et, er = relative_pose_error(sol, puzzle.ground_truth, a, b)
        worst = (max(worst[0], et), max(worst[1], er))
        two_ok += et <= 2.0 and er <= 2.0 and rep.q_pos >= 0.95 and rep.f1 == 1.0

    img = synthetic_image(256, 256, seed=0)
    gen_seed = next(s for s in range(1000) if len(generate_puzzle(img, GenConfig(n_cuts=3, seed=s))) == 5)
    puzzle5 = generate_puzzle(img, GenConfig(n_cuts=3, seed=gen_seed))
    f1s = [evaluate(solve_greedy(puzzle5, GreedyConfig(seed=s)).solution, puzzle5).f1 for s in range(10)]
    five_ok = sum(f >= 0.6 for f in f1s)
    ok = two_ok == 10 and five_ok >= 7
    acceptance(
        7,
        ok,
        f"2-piece exact {two_ok}/10 (worst {worst[0]:.2f}px/{worst[1]:.2f}deg); 5-piece F1>=0.6 {five_ok}/10",
    )
    assert ok


def test_criterion_08_round_trips(acceptance, tmp_path):
    rng = np.random.default_rng(8)
    bad = []
    for k in range(100):
        if k % 10 == 0:
            img = synthetic_image(96, 96, seed=k)
            puzzle = generate_puzzle(img, GenConfig(n_cuts=1 + k % 3, erosion_px=k % 3, seed=k))
            loaded = load_group_2d(save_group_2d(puzzle, tmp_path / f"g{k}"))
            same = loaded.ids == puzzle.ids and all(
                np.array_equal(loaded.fragment(i).rgba, puzzle.fragment(i).rgba)
                and loaded.ground_truth.poses[i] == puzzle.ground_truth.poses[i]
                for i in puzzle.ids
            )
            if not same:
                bad.append(("group", k))
        n = int(rng.integers(1, 12))
        sol = Solution(
            {
                f"p{i:02d}": Pose2D(*rng.normal(0, 10 ** rng.uniform(-3, 4), 2), float(rng.uniform(-180, 180)))
                for i in range(n)
            }
        )
        path = tmp_path / f"s{k}.txt"
        save_solution(sol, path)
        back = load_solution(path)
        for fid, p in sol.poses.items():
            q = back.poses[fid]
            for u, v in ((p.x, q.x), (p.y, q.y), (p.theta_deg, q.theta_deg)):
                if abs(u - v) > 1e-8 * max(1.0, abs(u)):
                    bad.append(("solution", k, fid))
    factor = float(mm_to_px(1.0, RenderScale(2000, 0.01, 2.714)))
    ok = not bad and round(factor, 3) == 7.369
    acceptance(8, ok, f"{100 - len(bad)}/100 round trips lossless; mm->px factor {factor:.4f}")
    assert ok, bad


def _dataset_root():
    env = os.environ.get("FRAGSOLVE_REPAIR_2D")
    if env:
        return Path(env)
    default = Path(__file__).parent / "data" / "repair2d_test"
    return default if default.exists() else None


@pytest.mark.extended
def test_criterion_09_dataset_bands(acceptance):
    root = _dataset_root()
    if root is None:
        acceptance(9, None, "released 2D test split not present")
        pytest.skip("released 2D test split not present (set FRAGSOLVE_REPAIR_2D)")
    published = {"genetic": (0.047, 0.394), "greedy": (0.023, 0.351)}
    lines = []
    for method, (_, f1_ref) in published.items():
        qs, f1s = [], []
        for gdir in discover_groups(root):
            puzzle = load_group(gdir)
            if method == "genetic":
                sol = solve_genetic(puzzle, GeneticConfig(population=256, generations=2000)).solution
            else:
                sol = solve_greedy(puzzle, GreedyConfig()).solution
            rep = evaluate(sol, puzzle)
            qs.append(rep.q_pos)
            f1s.append(rep.f1)
        q, f1 = float(np.mean(qs)), float(np.mean(f1s))
        in_band = 0 <= q <= 0.15 and abs(f1 - f1_ref) <= 0.20
        lines.append(f"{method}: Q={q:.3f} F1={f1:.3f} {'in band' if in_band else 'OUT OF BAND'}")
    # band misses are reported, not failed
    acceptance(9, True, "; ".join(lines))


def test_criterion_10_performance(acceptance):
    import cv2

    rng = np.random.default_rng(10)
    frags, gt, sol = [], {}, {}
    for i in range(20):
        mask = np.zeros((2000, 2000), np.uint8)
        pts = (rng.uniform(0, 1, (10, 2)) * 1999).astype(np.int32)
        cv2.fillPoly(mask, [cv2.convexHull(pts)], 1)
        rgba = np.zeros((2000, 2000, 4), np.uint8)
        rgba[..., 3] = mask * 255
        rgba[..., :3] = 128
        f = Fragment2D(f"f{i:02d}", rgba)
        frags.append(f)
        r, c = divmod(i, 5)
        gt[f.id] = Pose2D(c * 1900.0, -r * 1900.0, float(rng.uniform(-180, 180)))
    sol = jitter(Solution(gt), rng, 5.0, 2.0)
    puzzle = Puzzle("big", frags, Solution(gt))
    t0 = time.perf_counter()
    evaluate(sol, puzzle, MetricsConfig())
    t_eval = time.perf_counter() - t0

    img = synthetic_image(768, 768, seed=1)
    big = next(
        p
        for s in range(100)
        for p in [generate_puzzle(img, GenConfig(n_cuts=8, seed=s))]
        if len(p) >= 20 and sum(len(segment_contour(f)) <= 8 for f in p.fragments) >= 20
    )
    chosen = [f for f in big.fragments if len(segment_contour(f)) <= 8][:20]
    sub = Puzzle("step", chosen, Solution({f.id: big.ground_truth.poses[f.id] for f in chosen}))
    asm = GreedyAssembler(sub, GreedyConfig(), {f.id: sub.ground_truth.poses[f.id] for f in chosen[:10]})
    t0 = time.perf_counter()
    asm.step()
    t_step = time.perf_counter() - t0
    ok = t_eval < 10 and t_step < 5
    acceptance(10, ok, f"eval 20x2000px: {t_eval:.2f}s (<10); greedy step 10x10: {t_step:.2f}s (<5)")
    assert ok
