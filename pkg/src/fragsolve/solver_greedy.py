"""Greedy geometric assembly from contour segments.

Each fragment contour is simplified, pushed half a pixel outward so that the
contours of two abutting fragments coincide on their common cut, and split at
high-curvature vertices into segments. A candidate mate of two segments is
scored by placing the second fragment with the two-point spring alignment of
the segment endpoints (in reversed order) and measuring the IoU of the two
bodies; lower is better. Starting from a random seed fragment, the best
candidate over all (placed, unplaced) segment pairs is committed each step.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import cv2
import numpy as np

from .fragments import Fragment2D, Pose2D, Puzzle, Solution, extract_contour, place
from .geometry import (
    PlacedMask,
    Polyline,
    discrete_curvature,
    douglas_peucker,
    offset_polygon,
    procrustes_two_point,
    raster_intersection_area,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GreedyConfig:
    dp_epsilon: float = 1.0
    # 1/px, same estimator as geometry.discrete_curvature
    curvature_threshold: float = 0.002
    min_segment_len: float = 15.0
    seed: int = 0
    top_k: int = 32
    max_length_ratio: float = 2.0
    # candidates whose IoU is within this of the best are ranked by compactness
    iou_tolerance: float = 0.01
    # skip placements overlapping the rest of the assembly by more than this fraction of the new fragment
    max_assembly_overlap: float = 0.05
    contour_offset: float = 0.5
    # bounds how far the offset may push an acute vertex (multiples of contour_offset)
    offset_max_miter: float = 8.0

    def __post_init__(self):
        if self.dp_epsilon <= 0:
            raise ValueError("dp_epsilon must be > 0")
        if self.curvature_threshold <= 0:
            raise ValueError("curvature_threshold must be > 0")
        if self.min_segment_len < 0:
            raise ValueError("min_segment_len must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_length_ratio < 1:
            raise ValueError("max_length_ratio must be >= 1")


@dataclass(frozen=True)
class ContourSegment:
    """Vertices ``start..end`` (inclusive, indices modulo the vertex count) of a simplified contour."""

    fragment_id: str
    index: int
    start: int
    end: int
    points: np.ndarray
    length: float

    @property
    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points[0], self.points[-1]


def simplified_contour(frag: Fragment2D, config: GreedyConfig) -> Polyline:
    contour = douglas_peucker(extract_contour(frag), config.dp_epsilon)
    pts = contour.points
    if config.contour_offset and len(pts) >= 3:
        pts = offset_polygon(pts, config.contour_offset, config.offset_max_miter)
    return Polyline(pts, closed=True)


def _chain(pts: np.ndarray, a: int, b: int) -> np.ndarray:
    return pts[np.arange(a, b + 1) % len(pts)]


def _chain_length(pts: np.ndarray, a: int, b: int) -> float:
    c = _chain(pts, a, b)
    return float(np.hypot(*np.diff(c, axis=0).T).sum())


def split_vertices(contour: Polyline, config: GreedyConfig) -> list[int]:
    """Split points after curvature thresholding and short-segment merging."""
    pts = contour.points
    n = len(pts)
    if n < 3:
        return []
    kappa = discrete_curvature(contour)
    cuts = [int(i) for i in np.flatnonzero(np.abs(kappa) > config.curvature_threshold)]
    # merge: drop the split vertex joining the shortest segment to its shorter neighbour
    while len(cuts) > 1:
        k = len(cuts)
        lengths = [_chain_length(pts, cuts[i], cuts[(i + 1) % k] + (n if i == k - 1 else 0)) for i in range(k)]
        i = int(np.argmin(lengths))
        if lengths[i] >= config.min_segment_len:
            break
        prev_len, next_len = lengths[i - 1], lengths[(i + 1) % k]
        if k == 2:
            drop = i
        else:
            drop = i if prev_len <= next_len else (i + 1) % k
        del cuts[drop]
    return cuts


def segment_contour(frag: Fragment2D, config: GreedyConfig | None = None) -> list[ContourSegment]:
    """Cut the fragment outline into segments at high-curvature vertices.

    Neighbouring segments share their split vertex. With no vertex above the
    threshold the result is a single segment covering the whole closed
    contour (its first and last points coincide).
    """
    config = config or GreedyConfig()
    contour = simplified_contour(frag, config)
    pts = contour.points
    n = len(pts)
    cuts = split_vertices(contour, config)
    if len(cuts) < 2:
        a = cuts[0] if cuts else 0
        chain = _chain(pts, a, a + n)
        return [ContourSegment(frag.id, 0, a, a + n, chain, _chain_length(pts, a, a + n))]
    segs = []
    for i, a in enumerate(cuts):
        b = cuts[i + 1] if i + 1 < len(cuts) else cuts[0] + n
        segs.append(ContourSegment(frag.id, i, a, b, _chain(pts, a, b), _chain_length(pts, a, b)))
    return segs


def _length_ok(seg_a: ContourSegment, seg_b: ContourSegment, max_ratio: float) -> bool:
    lo, hi = sorted((seg_a.length, seg_b.length))
    return lo > 0 and hi / lo <= max_ratio


def _iou(a: PlacedMask, b: PlacedMask) -> float:
    inter = raster_intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union if union else 0.0


def relative_placements(seg_a: ContourSegment, seg_b: ContourSegment, order: str = "both") -> list[Pose2D]:
    """Poses of fragment B in fragment A's local frame that mate the two segments.

    ``order`` is "reversed" (B's end to A's start), "forward", or "both".
    """
    a1, a2 = seg_a.endpoints
    b1, b2 = seg_b.endpoints
    pairs = []
    if order in ("reversed", "both"):
        pairs.append((b2, b1))
    if order in ("forward", "both"):
        pairs.append((b1, b2))
    if order not in ("reversed", "forward", "both"):
        raise ValueError(f"unknown order {order!r}")
    out = []
    for s1, s2 in pairs:
        try:
            out.append(Pose2D.from_transform(procrustes_two_point(s1, s2, a1, a2)))
        except ValueError:
            continue
    return out


def segment_compatibility(
    seg_a: ContourSegment,
    frag_a: Fragment2D,
    pose_a: Pose2D,
    seg_b: ContourSegment,
    frag_b: Fragment2D,
    config: GreedyConfig | None = None,
    order: str = "both",
) -> tuple[Pose2D, float] | None:
    """World pose for B mating ``seg_b`` onto ``seg_a`` and the IoU of A and B there.

    Returns None when the pair fails the length-ratio gate or the endpoints
    are degenerate. With ``order="both"`` the lower-IoU endpoint order wins.
    """
    config = config or GreedyConfig()
    if not _length_ok(seg_a, seg_b, config.max_length_ratio):
        return None
    mask_a = place(frag_a, pose_a)
    best = None
    for rel in relative_placements(seg_a, seg_b, order):
        world = Pose2D.from_transform(pose_a.to_transform().compose(rel.to_transform()))
        score = _iou(mask_a, place(frag_b, world))
        if best is None or score < best[1]:
            best = (world, score)
    return best


@dataclass
class GreedyResult:
    solution: Solution
    seed_fragment: str
    log: list[dict] = field(default_factory=list)

    def log_jsonl(self) -> str:
        return "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in self.log)


class _PairCache:
    """Relative mates and their IoU, computed with A at the identity pose."""

    def __init__(self, puzzle: Puzzle, config: GreedyConfig):
        self.puzzle = puzzle
        self.config = config
        self.home = {}
        self.store = {}

    def _home(self, fid: str) -> PlacedMask:
        if fid not in self.home:
            self.home[fid] = place(self.puzzle.fragment(fid), Pose2D(0.0, 0.0, 0.0))
        return self.home[fid]

    def get(self, seg_a: ContourSegment, seg_b: ContourSegment):
        key = (seg_a.fragment_id, seg_a.index, seg_b.fragment_id, seg_b.index)
        if key not in self.store:
            best = None
            frag_b = self.puzzle.fragment(seg_b.fragment_id)
            for rel in relative_placements(seg_a, seg_b, "both"):
                score = _iou(self._home(seg_a.fragment_id), place(frag_b, rel))
                if best is None or score < best[1]:
                    best = (rel, score)
            self.store[key] = best
        return self.store[key]


def _fill_ratio(hull_pts: np.ndarray, assembly_area: int, mask: PlacedMask) -> float:
    """Occupied area over the minimum-area rectangle around the assembly plus the candidate."""
    rows, cols = np.nonzero(mask.mask)
    cand = np.column_stack([cols + mask.col0, rows + mask.row0]).astype(np.float32)
    pts = np.vstack([hull_pts, cand]).astype(np.float32)
    (_, _), (w, h), _ = cv2.minAreaRect(pts)
    rect = (w + 1.0) * (h + 1.0)
    return (assembly_area + mask.area) / rect


def _hull(points: np.ndarray) -> np.ndarray:
    return cv2.convexHull(points.astype(np.float32)).reshape(-1, 2)


def _mask_points(mask: PlacedMask) -> np.ndarray:
    rows, cols = np.nonzero(mask.mask)
    return np.column_stack([cols + mask.col0, rows + mask.row0])


def _far_poses(puzzle: Puzzle, placed_masks: dict, missing: list[str]) -> dict[str, Pose2D]:
    if placed_masks:
        right = max(m.col0 + m.shape[1] for m in placed_masks.values())
    else:
        right = 0
    x = float(right)
    out = {}
    for fid in missing:
        d = puzzle.fragment(fid).diameter
        x += 2.0 * d + 10.0
        out[fid] = Pose2D(x, 0.0, 0.0)
    return out


class GreedyAssembler:
    """Mutable state of one greedy assembly; ``step`` commits one fragment."""

    def __init__(self, puzzle: Puzzle, config: GreedyConfig, placed: dict[str, Pose2D]):
        if puzzle.dimension != "2D":
            raise ValueError("the greedy solver handles 2D puzzles only")
        if not placed:
            raise ValueError("need at least one placed fragment")
        self.puzzle = puzzle
        self.config = config
        self.ids = puzzle.ids
        self.segments = {}
        for fid in self.ids:
            try:
                self.segments[fid] = segment_contour(puzzle.fragment(fid), config)
            except ValueError as exc:
                log.warning("fragment %s: %s", fid, exc)
                self.segments[fid] = []
        self.poses = dict(placed)
        self.masks = {fid: place(puzzle.fragment(fid), pose) for fid, pose in self.poses.items()}
        pts = np.vstack([_mask_points(m) for m in self.masks.values()])
        self.hull = _hull(pts)
        self.assembly_area = sum(m.area for m in self.masks.values())
        self.consumed: set[tuple[str, int]] = set()
        self.cache = _PairCache(puzzle, config)
        self.log: list[dict] = []

    @property
    def done(self) -> bool:
        return len(self.poses) == len(self.ids)

    def candidates(self) -> list[tuple]:
        """(iou, placed id, segment, unplaced id, segment, relative pose), best first."""
        out = []
        for fa in sorted(self.poses):
            for sa in self.segments[fa]:
                if (fa, sa.index) in self.consumed:
                    continue
                for fb in self.ids:
                    if fb in self.poses:
                        continue
                    for sb in self.segments[fb]:
                        if (fb, sb.index) in self.consumed or not _length_ok(sa, sb, self.config.max_length_ratio):
                            continue
                        hit = self.cache.get(sa, sb)
                        if hit is not None:
                            out.append((hit[1], fa, sa.index, fb, sb.index, hit[0]))
        out.sort(key=lambda c: c[:5])
        return out

    def step(self) -> dict | None:
        """Commit the best admissible candidate; None when nothing can be placed."""
        cands = self.candidates()
        survivors = []
        for iou, fa, ia, fb, ib, rel in cands[: self.config.top_k]:
            world = Pose2D.from_transform(self.poses[fa].to_transform().compose(rel.to_transform()))
            mask = place(self.puzzle.fragment(fb), world)
            clash = sum(raster_intersection_area(mask, m) for f, m in self.masks.items() if f != fa)
            if clash > self.config.max_assembly_overlap * max(mask.area, 1):
                continue
            survivors.append((iou, fa, ia, fb, ib, world, mask))
        if not survivors:
            return None
        floor = min(c[0] for c in survivors)
        close = [c for c in survivors if c[0] <= floor + self.config.iou_tolerance]
        scored = [(-_fill_ratio(self.hull, self.assembly_area, c[6]), c[0], c[1:5], c) for c in close]
        scored.sort(key=lambda t: t[:3])
        neg_fill, _, _, choice = scored[0]
        iou, fa, ia, fb, ib, world, mask = choice
        self.poses[fb] = world
        self.masks[fb] = mask
        self.consumed.update({(fa, ia), (fb, ib)})
        self.hull = _hull(np.vstack([self.hull, _mask_points(mask)]))
        self.assembly_area += mask.area
        entry = {
            "step": len(self.log) + 1,
            "placed": fb,
            "onto": fa,
            "segment_onto": ia,
            "segment_placed": ib,
            "iou": iou,
            "fill_ratio": -neg_fill,
            "candidates": len(cands),
            "pose": [world.x, world.y, world.theta_deg],
        }
        self.log.append(entry)
        log.debug("step %d: %s onto %s (iou %.4f)", entry["step"], fb, fa, iou)
        return entry

    def solution(self) -> Solution:
        missing = [fid for fid in self.ids if fid not in self.poses]
        poses = dict(self.poses)
        poses.update(_far_poses(self.puzzle, self.masks, missing))
        return Solution(poses, unplaced=frozenset(missing))


def solve_greedy(puzzle: Puzzle, config: GreedyConfig | None = None) -> GreedyResult:
    """Grow an assembly from a random seed fragment, one best mate at a time.

    Each step ranks all (placed segment, unplaced segment) pairs that pass
    the length-ratio gate by IoU, walks the ``top_k`` best, discards those
    that overlap the rest of the assembly, and among survivors within
    ``iou_tolerance`` of the lowest IoU commits the most compact assembly.
    Used segments are not mated again. Fragments that never find a mate are
    parked far to the right and flagged unplaced.
    """
    config = config or GreedyConfig()
    if puzzle.dimension != "2D":
        raise ValueError("the greedy solver handles 2D puzzles only")
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed) & (2**64 - 1), 0x67]))
    seed_id = puzzle.ids[int(rng.integers(len(puzzle)))]
    asm = GreedyAssembler(puzzle, config, {seed_id: Pose2D(0.0, 0.0, 0.0)})
    while not asm.done and asm.step() is not None:
        pass
    return GreedyResult(asm.solution(), seed_id, asm.log)


__all__ = [
    "ContourSegment",
    "GreedyAssembler",
    "GreedyConfig",
    "GreedyResult",
    "relative_placements",
    "segment_compatibility",
    "segment_contour",
    "simplified_contour",
    "solve_greedy",
    "split_vertices",
]
