"""Compositing placed fragments into one image."""

from __future__ import annotations

import numpy as np

from .fragments import Fragment2D, Pose2D, Puzzle, Solution, place_rgba


def composite(
    fragments: list[Fragment2D],
    poses: dict[str, Pose2D],
    margin: int = 10,
    bounds: tuple[int, int, int, int] | None = None,
) -> tuple[np.ndarray, tuple[int, int]]:
    """Paint fragments (in id order) on a canvas sized to fit all of them.

    Returns the RGBA canvas and the world (row, col) of its top-left cell.
    ``bounds`` = (row0, col0, row1, col1) forces a canvas extent instead.
    """
    placed = [(place_rgba(f, poses[f.id])) for f in sorted(fragments, key=lambda f: f.id)]
    if bounds is None:
        boxes = np.array([pm.tight().bounds for _, pm in placed if not pm.is_empty()])
        if len(boxes) == 0:
            return np.zeros((2 * margin + 1, 2 * margin + 1, 4), np.uint8), (-margin, -margin)
        bounds = (
            int(boxes[:, 0].min()) - margin,
            int(boxes[:, 1].min()) - margin,
            int(boxes[:, 2].max()) + margin,
            int(boxes[:, 3].max()) + margin,
        )
    r0, c0, r1, c1 = bounds
    canvas = np.zeros((r1 - r0, c1 - c0, 4), np.uint8)
    for rgba, pm in placed:
        pr0, pc0, pr1, pc1 = pm.bounds
        ir0, ic0 = max(pr0, r0), max(pc0, c0)
        ir1, ic1 = min(pr1, r1), min(pc1, c1)
        if ir0 >= ir1 or ic0 >= ic1:
            continue
        src = (slice(ir0 - pr0, ir1 - pr0), slice(ic0 - pc0, ic1 - pc0))
        dst = canvas[ir0 - r0 : ir1 - r0, ic0 - c0 : ic1 - c0]
        cover = pm.mask[src]
        dst[cover] = rgba[src][cover]
    return canvas, (r0, c0)


def render_solution(puzzle: Puzzle, solution: Solution, margin: int = 10) -> np.ndarray:
    frags = [f for f in puzzle.fragments if f.id in solution.poses]
    canvas, _ = composite(frags, solution.poses, margin=margin)
    return canvas


def render_side_by_side(puzzle: Puzzle, solution: Solution, margin: int = 10, gap: int = 20) -> np.ndarray:
    """Solution on the left, ground truth on the right."""
    left = render_solution(puzzle, solution, margin)
    right = render_solution(puzzle, puzzle.ground_truth, margin)
    h = max(left.shape[0], right.shape[0])
    out = np.zeros((h, left.shape[1] + gap + right.shape[1], 4), np.uint8)
    out[: left.shape[0], : left.shape[1]] = left
    out[: right.shape[0], left.shape[1] + gap :] = right
    return out
