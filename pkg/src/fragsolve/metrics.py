"""Reassembly scores for 2D and 3D solutions.

All scores are computed after removing the global rigid gauge: the solution
is moved so that its largest fragment (the anchor) sits exactly on its
ground-truth pose.

* ``q_pos``: area-weighted fraction of every fragment's footprint that lands
  on its ground-truth footprint.
* ``rmse_translation`` / ``rmse_rotation``: ``(1/sqrt(n)) * sum_i |error_i|``
  (``classic_rmse=True`` gives ``sqrt(mean |error_i|^2)`` instead).
* ``precision`` / ``recall`` / ``f1``: area-weighted agreement of the solution
  and ground-truth mating graphs. Precision divides the matched edge weight
  by the ground-truth edge weight and recall by the solution edge weight.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations

import numpy as np
from scipy.spatial import cKDTree

from .fragments import (
    Fragment2D,
    Fragment3D,
    Pose2D,
    Pose3D,
    Puzzle,
    Solution,
    fragment_area,
    place,
    voxel_codes,
)
from .geometry import PlacedMask, angle_difference, masks_intersect, raster_intersection_area

CSV_COLUMNS = ["group", "method", "q_pos", "rmse_rot_deg", "rmse_trans", "precision", "recall", "f1"]


@dataclass(frozen=True)
class MetricsConfig:
    # None -> 4 px in 2D, 2 mm in 3D
    neighbor_tau: float | None = None
    # world cells per fragment pixel for raster metrics
    raster_scale: float = 1.0
    voxel_mm: float = 1.0
    rmse_after_anchor: bool = True
    classic_rmse: bool = False
    # "geodesic" (degrees) or "chordal" (Frobenius norm of R_hat - R_gt)
    rotation_distance: str = "geodesic"

    def __post_init__(self):
        if self.neighbor_tau is not None and self.neighbor_tau <= 0:
            raise ValueError("neighbor_tau must be positive")
        if self.voxel_mm <= 0 or self.raster_scale <= 0:
            raise ValueError("voxel_mm and raster_scale must be positive")
        if self.rotation_distance not in ("geodesic", "chordal"):
            raise ValueError(f"unknown rotation distance {self.rotation_distance!r}")

    def tau(self, dimension: str) -> float:
        if self.neighbor_tau is not None:
            return self.neighbor_tau
        return 2.0 if dimension == "3D" else 4.0


@dataclass(frozen=True)
class MatingGraph:
    nodes: tuple
    edges: frozenset

    def __post_init__(self):
        nodes = tuple(sorted(self.nodes))
        edges = frozenset(tuple(sorted(e)) for e in self.edges)
        known = set(nodes)
        for a, b in edges:
            if a == b:
                raise ValueError(f"self-loop on {a!r}")
            if a not in known or b not in known:
                raise ValueError(f"edge {(a, b)} references an unknown node")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)

    def neighbors(self, node) -> set:
        return {b if a == node else a for a, b in self.edges if node in (a, b)}


@dataclass
class MetricsReport:
    q_pos: float
    rmse_translation: float
    rmse_rotation: float
    precision: float
    recall: float
    f1: float
    anchor: str
    n_fragments: int
    unplaced: int = 0
    dimension: str = "2D"
    config: dict = field(default_factory=dict)

    def row(self, group: str, method: str) -> dict:
        return {
            "group": group,
            "method": method,
            "q_pos": self.q_pos,
            "rmse_rot_deg": self.rmse_rotation,
            "rmse_trans": self.rmse_translation,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Anchor alignment
# ---------------------------------------------------------------------------


def fragment_areas(fragments, config: MetricsConfig | None = None) -> dict[str, float]:
    config = config or MetricsConfig()
    return {f.id: fragment_area(f, voxel_mm=config.voxel_mm) for f in fragments}


def choose_anchor(areas: dict[str, float], candidates=None) -> str:
    """Largest fragment; ties go to the smallest id."""
    ids = sorted(candidates if candidates is not None else areas)
    if not ids:
        raise ValueError("no anchor candidates")
    return min(ids, key=lambda i: (-areas[i], i))


def anchor_align(solution: Solution, gt: Solution, fragments, anchor: str | None = None, config=None) -> Solution:
    """Move the whole solution rigidly so the anchor matches its ground-truth pose."""
    if anchor is None:
        anchor = choose_anchor(fragment_areas(fragments, config))
    if anchor not in solution.poses:
        raise ValueError(f"solution has no pose for anchor {anchor!r}")
    if anchor not in gt.poses:
        raise ValueError(f"ground truth has no pose for anchor {anchor!r}")
    sa, ga = solution.poses[anchor], gt.poses[anchor]
    poses = {}
    if isinstance(ga, Pose3D):
        g = ga.compose(sa.inverse())
        for fid, p in solution.poses.items():
            poses[fid] = g.compose(p)
    else:
        g = ga.to_transform().compose(sa.to_transform().inverse())
        for fid, p in solution.poses.items():
            poses[fid] = Pose2D.from_transform(g.compose(p.to_transform()))
    poses[anchor] = ga
    return Solution(poses, solution.unplaced)


# ---------------------------------------------------------------------------
# Position score
# ---------------------------------------------------------------------------


def _q_pos_terms_2d(fragments, sol_masks, gt_masks, skip) -> dict[str, float]:
    terms = {}
    for f in fragments:
        if f.id in skip:
            terms[f.id] = 0.0
            continue
        sol_area = sol_masks[f.id].area
        if sol_area == 0:
            raise ValueError(f"fragment {f.id} has zero area at its solution pose")
        terms[f.id] = raster_intersection_area(sol_masks[f.id], gt_masks[f.id]) / sol_area
    return terms


def _q_pos_terms_3d(fragments, sol_codes, gt_codes, skip) -> dict[str, float]:
    terms = {}
    for f in fragments:
        if f.id in skip:
            terms[f.id] = 0.0
            continue
        s = sol_codes[f.id]
        if len(s) == 0:
            raise ValueError(f"fragment {f.id} has zero volume")
        terms[f.id] = len(np.intersect1d(s, gt_codes[f.id], assume_unique=True)) / len(s)
    return terms


def _weighted(terms: dict[str, float], areas: dict[str, float]) -> float:
    total = sum(areas[i] for i in sorted(terms))
    if total <= 0:
        raise ValueError("total fragment area is zero")
    return sum(areas[i] * terms[i] for i in sorted(terms)) / total


def q_pos(solution: Solution, gt: Solution, fragments, config: MetricsConfig | None = None, aligned: bool = False) -> float:
    """Area-weighted overlap of each fragment with its own ground-truth footprint."""
    config = config or MetricsConfig()
    areas = fragment_areas(fragments, config)
    if not aligned:
        solution = anchor_align(solution, gt, fragments, config=config)
    frags = sorted(fragments, key=lambda f: f.id)
    if isinstance(frags[0], Fragment3D):
        sol = {f.id: voxel_codes(solution.poses[f.id].apply(f.points), config.voxel_mm) for f in frags}
        ref = {f.id: voxel_codes(gt.poses[f.id].apply(f.points), config.voxel_mm) for f in frags}
        terms = _q_pos_terms_3d(frags, sol, ref, solution.unplaced)
    else:
        sol = {f.id: place(f, solution.poses[f.id], config.raster_scale) for f in frags}
        ref = {f.id: place(f, gt.poses[f.id], config.raster_scale) for f in frags}
        terms = _q_pos_terms_2d(frags, sol, ref, solution.unplaced)
    return _weighted(terms, areas)


# ---------------------------------------------------------------------------
# Pose errors
# ---------------------------------------------------------------------------


def _aggregate(errors: list[float], classic: bool) -> float:
    n = len(errors)
    if n == 0:
        raise ValueError("no fragments to score")
    e = np.asarray(errors, dtype=float)
    if classic:
        return float(math.sqrt(np.mean(e**2)))
    return float(e.sum() / math.sqrt(n))


def _maybe_align(solution, gt, config, fragments):
    if not config.rmse_after_anchor:
        return solution
    if fragments is None:
        raise ValueError("anchor alignment needs the fragments (or set rmse_after_anchor=False)")
    return anchor_align(solution, gt, fragments, config=config)


def translation_errors(solution: Solution, gt: Solution) -> list[float]:
    errs = []
    for fid in sorted(gt.poses):
        s, g = solution.poses[fid], gt.poses[fid]
        errs.append(float(np.linalg.norm(np.asarray(s.translation) - np.asarray(g.translation))))
    return errs


def rotation_errors(solution: Solution, gt: Solution, distance: str = "geodesic") -> list[float]:
    errs = []
    for fid in sorted(gt.poses):
        s, g = solution.poses[fid], gt.poses[fid]
        if isinstance(g, Pose3D):
            if distance == "chordal":
                errs.append(float(np.linalg.norm(s.rotation - g.rotation)))
            else:
                c = (np.trace(s.rotation.T @ g.rotation) - 1.0) / 2.0
                errs.append(math.degrees(math.acos(min(1.0, max(-1.0, c)))))
        else:
            errs.append(angle_difference(s.theta_deg, g.theta_deg))
    return errs


def rmse_translation(solution: Solution, gt: Solution, config: MetricsConfig | None = None, fragments=None) -> float:
    config = config or MetricsConfig()
    solution = _maybe_align(solution, gt, config, fragments)
    return _aggregate(translation_errors(solution, gt), config.classic_rmse)


def rmse_rotation(solution: Solution, gt: Solution, config: MetricsConfig | None = None, fragments=None) -> float:
    config = config or MetricsConfig()
    solution = _maybe_align(solution, gt, config, fragments)
    return _aggregate(rotation_errors(solution, gt, config.rotation_distance), config.classic_rmse)


# ---------------------------------------------------------------------------
# Mating graphs
# ---------------------------------------------------------------------------


def dilation_radius(tau: float) -> int:
    return math.ceil(tau / 2.0) + 1


def mating_graph_2d(placed: dict[str, PlacedMask], tau: float) -> MatingGraph:
    """Edge between two fragments iff their masks, each dilated by ceil(tau/2)+1 cells, intersect."""
    r = dilation_radius(tau)
    grown = {fid: placed[fid].tight().dilate(r) for fid in sorted(placed)}
    edges = set()
    for a, b in combinations(sorted(grown), 2):
        if masks_intersect(grown[a], grown[b]):
            edges.add((a, b))
    return MatingGraph(tuple(sorted(placed)), frozenset(edges))


def mating_graph_3d(points: dict[str, np.ndarray], tau: float) -> MatingGraph:
    """Edge iff the minimum point-to-point distance is below tau."""
    trees = {fid: cKDTree(points[fid]) for fid in sorted(points)}
    edges = set()
    for a, b in combinations(sorted(points), 2):
        d, _ = trees[b].query(points[a], k=1, distance_upper_bound=tau)
        if np.any(d < tau):
            edges.add((a, b))
    return MatingGraph(tuple(sorted(points)), frozenset(edges))


def build_mating_graph(fragments, solution: Solution, config: MetricsConfig | None = None, exclude=()) -> MatingGraph:
    """Mating graph of fragments placed at ``solution``; ``exclude`` ids are left out."""
    config = config or MetricsConfig()
    frags = [f for f in sorted(fragments, key=lambda f: f.id) if f.id not in set(exclude)]
    if frags and isinstance(frags[0], Fragment3D):
        pts = {f.id: solution.poses[f.id].apply(f.points) for f in frags}
        return mating_graph_3d(pts, config.tau("3D"))
    placed = {f.id: place(f, solution.poses[f.id], config.raster_scale) for f in frags}
    return mating_graph_2d(placed, config.tau("2D") * config.raster_scale)


def precision_recall_f1(m_sol: MatingGraph, m_gt: MatingGraph, areas: dict[str, float]) -> tuple[float, float, float]:
    """Area-weighted edge agreement; empty denominators give 0."""

    def weight(edges) -> float:
        return float(sum(areas[a] + areas[b] for a, b in sorted(edges)))

    matched = weight(m_sol.edges & m_gt.edges)
    gt_w, sol_w = weight(m_gt.edges), weight(m_sol.edges)
    p = matched / gt_w if gt_w > 0 else 0.0
    r = matched / sol_w if sol_w > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


# ---------------------------------------------------------------------------
# Full evaluation
# ---------------------------------------------------------------------------


def _fill_missing(solution: Solution, puzzle: Puzzle) -> Solution:
    """Give fragments without a pose a far-away, upside-down placeholder (flagged unplaced)."""
    missing = [fid for fid in puzzle.ids if fid not in solution.poses]
    if not missing:
        return solution
    gt = puzzle.ground_truth
    poses = dict(solution.poses)
    if puzzle.dimension == "3D":
        span = max(float(np.ptp(f.points, axis=0).max()) for f in puzzle.fragments)
        far = max(float(np.abs(gt.poses[i].translation).max()) for i in gt.poses) + 10 * span
        flip = np.diag([1.0, -1.0, -1.0])
        for fid in missing:
            g = gt.poses[fid]
            poses[fid] = Pose3D(g.rotation @ flip, g.translation + far)
    else:
        span = max(f.diameter for f in puzzle.fragments)
        far = max(max(abs(gt.poses[i].x), abs(gt.poses[i].y)) for i in gt.poses) + 10 * span
        for fid in missing:
            g = gt.poses[fid]
            poses[fid] = Pose2D(g.x + far, g.y + far, g.theta_deg + 180.0)
    return Solution(poses, solution.unplaced | set(missing))


def evaluate(solution: Solution, puzzle: Puzzle, config: MetricsConfig | None = None) -> MetricsReport:
    """Compute every score for one solution of one puzzle.

    Fragments flagged unplaced (or missing from the solution) contribute a
    zero position term and no solution-graph edges. The anchor is the
    largest fragment that was actually placed. Without an explicit
    ``neighbor_tau`` a value recorded with the group (``extras["neighbor_tau"]``)
    takes precedence over the built-in default.
    """
    config = config or MetricsConfig()
    if config.neighbor_tau is None and puzzle.extras.get("neighbor_tau"):
        config = replace(config, neighbor_tau=float(puzzle.extras["neighbor_tau"]))
    gt = puzzle.ground_truth
    if gt is None:
        raise ValueError(f"puzzle {puzzle.group_id} has no ground truth")
    placed_ids = [fid for fid in puzzle.ids if fid in solution.poses and fid not in solution.unplaced]
    if not placed_ids:
        raise ValueError("solution places no fragment")
    unknown = set(solution.poses) - set(puzzle.ids)
    if unknown:
        raise ValueError(f"solution has poses for unknown fragments {sorted(unknown)}")
    solution = _fill_missing(solution, puzzle)
    areas = fragment_areas(puzzle.fragments, config)
    anchor = choose_anchor(areas, placed_ids)
    aligned = anchor_align(solution, gt, puzzle.fragments, anchor=anchor)
    frags = puzzle.fragments
    skip = solution.unplaced

    if puzzle.dimension == "3D":
        sol_pts = {f.id: aligned.poses[f.id].apply(f.points) for f in frags}
        gt_pts = {f.id: gt.poses[f.id].apply(f.points) for f in frags}
        sol_codes = {fid: voxel_codes(p, config.voxel_mm) for fid, p in sol_pts.items()}
        gt_codes = {fid: voxel_codes(p, config.voxel_mm) for fid, p in gt_pts.items()}
        q = _weighted(_q_pos_terms_3d(frags, sol_codes, gt_codes, skip), areas)
        tau = config.tau("3D")
        m_sol = mating_graph_3d({k: v for k, v in sol_pts.items() if k not in skip}, tau)
        m_gt = mating_graph_3d(gt_pts, tau)
    else:
        s = config.raster_scale
        sol_masks = {f.id: place(f, aligned.poses[f.id], s) for f in frags}
        gt_masks = {f.id: place(f, gt.poses[f.id], s) for f in frags}
        q = _weighted(_q_pos_terms_2d(frags, sol_masks, gt_masks, skip), areas)
        tau = config.tau("2D") * s
        m_sol = mating_graph_2d({k: v for k, v in sol_masks.items() if k not in skip}, tau)
        m_gt = mating_graph_2d(gt_masks, tau)

    p, r, f1 = precision_recall_f1(m_sol, m_gt, areas)
    pose_src = aligned if config.rmse_after_anchor else solution
    rt = _aggregate(translation_errors(pose_src, gt), config.classic_rmse)
    rr = _aggregate(rotation_errors(pose_src, gt, config.rotation_distance), config.classic_rmse)
    return MetricsReport(
        q_pos=q,
        rmse_translation=rt,
        rmse_rotation=rr,
        precision=p,
        recall=r,
        f1=f1,
        anchor=anchor,
        n_fragments=len(frags),
        unplaced=len(skip),
        dimension=puzzle.dimension,
        config=asdict(config),
    )
