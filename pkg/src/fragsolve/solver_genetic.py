"""Genetic reconstruction: evolve whole-puzzle pose matrices.

A chromosome is an N x 3 array whose rows are (x, y, theta_deg) for the
fragments in lexicographic id order. Fitness (lower is better) is a weighted
sum of the axis-aligned bounding-box area of the placed fragments and their
total pairwise overlap.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fragments import Pose2D, Puzzle, Solution, place
from .geometry import normalize_angle, raster_intersection_area, union_bbox_area
from .puzzle_gen import scramble

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeneticConfig:
    population: int = 64
    generations: int = 500
    sigma_t: float = 5.0
    sigma_theta: float = 5.0
    lambda_bbox: float = 1.0
    lambda_overlap: float = 4.0
    seed: int = 0
    # "circular" averages angles on the circle; "literal" takes the plain mean
    angle_mean: str = "circular"
    threads: int = 1

    def __post_init__(self):
        if self.population < 8 or self.population % 4:
            raise ValueError("population must be >= 8 and a multiple of 4")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if self.sigma_t < 0 or self.sigma_theta < 0:
            raise ValueError("mutation sigmas must be >= 0")
        if self.lambda_bbox < 0 or self.lambda_overlap < 0 or self.lambda_bbox + self.lambda_overlap <= 0:
            raise ValueError("weights must be >= 0 with a positive sum")
        if self.angle_mean not in ("circular", "literal"):
            raise ValueError(f"unknown angle_mean {self.angle_mean!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class GeneticResult:
    solution: Solution
    chromosome: np.ndarray
    fitness: float
    trace: list[float] = field(default_factory=list)

    def trace_csv(self) -> str:
        lines = ["generation,best_fitness"]
        lines += [f"{g},{f!r}" for g, f in enumerate(self.trace)]
        return "\n".join(lines) + "\n"


def _check_2d(puzzle: Puzzle) -> None:
    if puzzle.dimension != "2D":
        raise ValueError("the genetic solver handles 2D puzzles only")


def chromosome_from_solution(solution: Solution, ids) -> np.ndarray:
    return np.array([[solution.poses[i].x, solution.poses[i].y, solution.poses[i].theta_deg] for i in ids], dtype=float)


def chromosome_to_solution(chrom: np.ndarray, ids) -> Solution:
    return Solution({fid: Pose2D(float(x), float(y), normalize_angle(float(t))) for fid, (x, y, t) in zip(ids, chrom)})


def fitness_terms(chrom: np.ndarray, puzzle: Puzzle) -> tuple[int, int]:
    """(bounding-box area, summed pairwise overlap) in world cells."""
    _check_2d(puzzle)
    chrom = np.asarray(chrom, dtype=float)
    if chrom.shape != (len(puzzle), 3):
        raise ValueError(f"chromosome shape {chrom.shape} does not match {len(puzzle)} fragments")
    masks = [place(f, Pose2D(float(x), float(y), float(t))) for f, (x, y, t) in zip(puzzle.fragments, chrom)]
    overlap = 0
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            overlap += raster_intersection_area(masks[i], masks[j])
    return union_bbox_area(masks), overlap


def fitness(chrom: np.ndarray, puzzle: Puzzle, config: GeneticConfig | None = None) -> float:
    config = config or GeneticConfig()
    bbox, overlap = fitness_terms(chrom, puzzle)
    return config.lambda_bbox * bbox + config.lambda_overlap * overlap


def _evaluate_all(chroms, puzzle, config) -> list[float]:
    if config.threads > 1 and len(chroms) > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            return list(pool.map(lambda c: fitness(c, puzzle, config), chroms))
    return [fitness(c, puzzle, config) for c in chroms]


def crossover(a: np.ndarray, b: np.ndarray, angle_mean: str = "circular") -> np.ndarray:
    """Element-wise mean of two parents; angles averaged on the circle by default."""
    child = 0.5 * (a + b)
    if angle_mean == "circular":
        ra, rb = np.radians(a[:, 2]), np.radians(b[:, 2])
        s, c = np.sin(ra) + np.sin(rb), np.cos(ra) + np.cos(rb)
        # antipodal parents have no circular mean; keep the literal one there
        ok = np.hypot(s, c) > 1e-12
        child[ok, 2] = np.degrees(np.arctan2(s[ok], c[ok]))
    return child


def evolve_generation(
    population: list[np.ndarray],
    puzzle: Puzzle,
    config: GeneticConfig,
    rng: np.random.Generator,
    scores: list[float] | None = None,
) -> tuple[list[np.ndarray], list[float]]:
    """One elitist generation step.

    The population is ranked by fitness (stable sort); the M/4 worst are
    replaced by offspring of two distinct parents drawn uniformly from the
    M/2 fittest. Returns the new population ranked best-first together with
    its fitness values. ``scores`` may carry fitness values already known for
    ``population``.
    """
    m = len(population)
    if m != config.population:
        raise ValueError(f"population has {m} members, expected {config.population}")
    if scores is None:
        scores = _evaluate_all(population, puzzle, config)
    order = np.argsort(np.asarray(scores), kind="stable")
    ranked = [population[i] for i in order]
    ranked_scores = [float(scores[i]) for i in order]
    n_keep = m - m // 4
    children = []
    for _ in range(m // 4):
        i, j = rng.choice(m // 2, size=2, replace=False)
        child = crossover(ranked[i], ranked[j], config.angle_mean)
        noise = rng.normal(0.0, 1.0, size=child.shape) * [config.sigma_t, config.sigma_t, config.sigma_theta]
        child = child + noise
        child[:, 2] = [normalize_angle(t) for t in child[:, 2]]
        children.append(child)
    child_scores = _evaluate_all(children, puzzle, config)
    new_pop = ranked[:n_keep] + children
    new_scores = ranked_scores[:n_keep] + child_scores
    order = np.argsort(np.asarray(new_scores), kind="stable")
    return [new_pop[i] for i in order], [new_scores[i] for i in order]


def initial_population(puzzle: Puzzle, config: GeneticConfig, rng: np.random.Generator) -> list[np.ndarray]:
    seeds = rng.integers(0, 2**63 - 1, size=config.population)
    return [chromosome_from_solution(scramble(puzzle, int(s)), puzzle.ids) for s in seeds]


def solve_genetic(puzzle: Puzzle, config: GeneticConfig | None = None) -> GeneticResult:
    """Run the fixed generation budget and return the best chromosome found.

    ``trace[g]`` is the best fitness after ``g`` generations (``trace[0]`` is
    the random initial population).
    """
    config = config or GeneticConfig()
    _check_2d(puzzle)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed) & (2**64 - 1), 0x6E]))
    population = initial_population(puzzle, config, rng)
    scores = _evaluate_all(population, puzzle, config)
    order = np.argsort(np.asarray(scores), kind="stable")
    population = [population[i] for i in order]
    scores = [scores[i] for i in order]
    trace = [float(scores[0])]
    for gen in range(config.generations):
        population, scores = evolve_generation(population, puzzle, config, rng, scores)
        trace.append(float(scores[0]))
        if gen % 100 == 0:
            log.debug("generation %d best %.1f", gen, scores[0])
    best = population[0]
    return GeneticResult(chromosome_to_solution(best, puzzle.ids), best.copy(), float(scores[0]), trace)


def gt_fitness(puzzle: Puzzle, config: GeneticConfig | None = None) -> float:
    if puzzle.ground_truth is None:
        raise ValueError("puzzle has no ground truth")
    return fitness(chromosome_from_solution(puzzle.ground_truth, puzzle.ids), puzzle, config)


__all__ = [
    "GeneticConfig",
    "GeneticResult",
    "chromosome_from_solution",
    "chromosome_to_solution",
    "crossover",
    "evolve_generation",
    "fitness",
    "fitness_terms",
    "gt_fitness",
    "initial_population",
    "solve_genetic",
]
