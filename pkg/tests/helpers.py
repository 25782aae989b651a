"""Independent oracles and fixtures shared by the test modules."""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np
from shapely.geometry import Polygon, box

from fragsolve.fragments import Fragment2D, Pose2D, Solution


def shapely_cells(extras) -> dict:
    """Exact arrangement cells rebuilt from the stored cut chords by half-plane clipping."""
    h, w = extras["image_shape"][:2]
    cuts = extras["cuts"]
    big = 10.0 * (h + w)
    cells = {}
    for fid, code in extras["face_codes"].items():
        poly = box(0, 0, w, h)
        for k, ((x1, y1), (x2, y2)) in enumerate(cuts):
            d = np.array([x2 - x1, y2 - y1], float)
            d /= np.linalg.norm(d)
            n = np.array([-d[1], d[0]])
            if not (code >> k) & 1:
                n = -n
            p1 = np.array([x1, y1])
            half = Polygon([p1 - big * d, p1 + big * d, p1 + big * d + big * n, p1 - big * d + big * n])
            poly = poly.intersection(half)
        cells[fid] = poly
    return cells


def analytic_adjacency(extras) -> set:
    cells = shapely_cells(extras)
    return {(a, b) for a, b in combinations(sorted(cells), 2) if cells[a].distance(cells[b]) < 1e-9}


def central_cut(size: int, rng: np.random.Generator):
    """One chord through a random point of the central third of a size x size square."""
    c = size / 2 + rng.uniform(-size / 6, size / 6, 2)
    th = rng.uniform(0, math.pi)
    d = np.array([math.cos(th), math.sin(th)])
    ts = []
    for k in range(2):
        if abs(d[k]) > 1e-12:
            for b in (0, size):
                t = (b - c[k]) / d[k]
                if -1e-9 <= (c + t * d)[1 - k] <= size + 1e-9:
                    ts.append(t)
    p, q = c + min(ts) * d, c + max(ts) * d
    return [(tuple(p), tuple(q))]


def relative_pose_error(sol: Solution, gt: Solution, a: str, b: str) -> tuple[float, float]:
    """Translation (px) and rotation (deg) error of b's pose expressed in a's frame."""
    r = sol.poses[a].to_transform().inverse().compose(sol.poses[b].to_transform())
    g = gt.poses[a].to_transform().inverse().compose(gt.poses[b].to_transform())
    dth = (r.theta_deg - g.theta_deg + 180.0) % 360.0 - 180.0
    return float(math.hypot(r.tx - g.tx, r.ty - g.ty)), abs(dth)


def paint_count(masks) -> tuple[int, int]:
    """Bounding-box area and sum over cells of C(k, 2) on one dense canvas."""
    r0 = min(m.row0 for m in masks)
    c0 = min(m.col0 for m in masks)
    r1 = max(m.row0 + m.mask.shape[0] for m in masks)
    c1 = max(m.col0 + m.mask.shape[1] for m in masks)
    canvas = np.zeros((r1 - r0, c1 - c0), np.int64)
    for m in masks:
        canvas[m.row0 - r0 : m.row0 - r0 + m.mask.shape[0], m.col0 - c0 : m.col0 - c0 + m.mask.shape[1]] += m.mask
    rows = np.flatnonzero(canvas.any(axis=1))
    cols = np.flatnonzero(canvas.any(axis=0))
    bbox = (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1)
    pairs = int((canvas * (canvas - 1) // 2).sum())
    return int(bbox), pairs


def chain_distance(points: np.ndarray, chain: np.ndarray) -> np.ndarray:
    """Distance from every point to the nearest segment of the chain, by brute force."""
    out = np.full(len(points), np.inf)
    for a, b in zip(chain[:-1], chain[1:]):
        ab = b - a
        for i, p in enumerate(points):
            t = 0.0 if not ab.any() else min(1.0, max(0.0, float((p - a) @ ab) / float(ab @ ab)))
            out[i] = min(out[i], float(np.hypot(*(p - a - t * ab))))
    return out


def rect_fragment(fid: str, h: int, w: int, color=(180, 90, 40)) -> Fragment2D:
    return Fragment2D.from_mask(fid, np.ones((h, w), bool), color=color)


def disk_fragment(fid: str, radius: int) -> Fragment2D:
    yy, xx = np.mgrid[0 : 2 * radius + 1, 0 : 2 * radius + 1]
    mask = (yy - radius) ** 2 + (xx - radius) ** 2 <= radius**2
    return Fragment2D.from_mask(fid, mask)


def jitter(solution: Solution, rng: np.random.Generator, sigma_t: float, sigma_r: float) -> Solution:
    return Solution(
        {
            fid: Pose2D(p.x + rng.normal(0, sigma_t), p.y + rng.normal(0, sigma_t), p.theta_deg + rng.normal(0, sigma_r))
            for fid, p in solution.poses.items()
        }
    )
