"""Reassembly of fragmented 2D/3D objects: data handling, puzzle generation, two solvers and metrics."""

__version__ = "0.1.0"

from .fragments import Fragment2D, Fragment3D, Pose2D, Pose3D, Puzzle, Solution
from .metrics import MetricsConfig, evaluate
from .puzzle_gen import GenConfig, generate_puzzle
from .solver_genetic import GeneticConfig, solve_genetic
from .solver_greedy import GreedyConfig, solve_greedy

__all__ = [
    "Fragment2D",
    "Fragment3D",
    "GenConfig",
    "GeneticConfig",
    "GreedyConfig",
    "MetricsConfig",
    "Pose2D",
    "Pose3D",
    "Puzzle",
    "Solution",
    "evaluate",
    "generate_puzzle",
    "solve_genetic",
    "solve_greedy",
]
