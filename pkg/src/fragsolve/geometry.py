"""Geometric primitives shared by the solvers, the generator and the metrics.

Conventions used throughout the package:

* world coordinates are Y-up, angles are in degrees and positive angles turn
  counter-clockwise;
* rasters live on an integer world grid: cell ``(row, col)`` has its centre at
  ``x = col + 0.5, y = -(row + 0.5)``, so arrays keep the usual image
  orientation (row 0 on top).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


def normalize_angle(theta_deg: float) -> float:
    """Wrap an angle in degrees to the half-open interval (-180, 180]."""
    a = math.fmod(float(theta_deg), 360.0)
    if a <= -180.0:
        a += 360.0
    elif a > 180.0:
        a -= 360.0
    return a + 0.0


def angle_difference(a_deg: float, b_deg: float) -> float:
    """Absolute angular distance between two angles, in [0, 180]."""
    return abs(normalize_angle(a_deg - b_deg))


def cos_sin_deg(theta_deg: float) -> tuple[float, float]:
    """cos/sin of an angle in degrees, exact on multiples of 90."""
    a = normalize_angle(theta_deg)
    quarter = a / 90.0
    if quarter == round(quarter):
        return {0: (1.0, 0.0), 1: (0.0, 1.0), 2: (-1.0, 0.0), -1: (0.0, -1.0)}[int(quarter)]
    r = math.radians(a)
    return math.cos(r), math.sin(r)


# ---------------------------------------------------------------------------
# Polylines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Polyline:
    """Ordered vertices; a closed polyline does not repeat its first vertex."""

    points: np.ndarray
    closed: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"polyline points must have shape (n, 2), got {pts.shape}")
        if len(pts) < 2:
            raise ValueError("polyline needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("polyline points must be finite")
        steps = np.diff(pts, axis=0)
        if np.any(np.hypot(steps[:, 0], steps[:, 1]) == 0):
            raise ValueError("consecutive polyline points must be distinct")
        if self.closed and len(pts) > 2 and np.array_equal(pts[0], pts[-1]):
            raise ValueError("closed polyline must not repeat its first point")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def edges(self) -> np.ndarray:
        """Edge vectors; a closed polyline includes the closing edge."""
        if self.closed:
            return np.roll(self.points, -1, axis=0) - self.points
        return np.diff(self.points, axis=0)

    def length(self) -> float:
        e = self.edges()
        return float(np.hypot(e[:, 0], e[:, 1]).sum())


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance from each of ``points`` (n, 2) to the segment ab."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    a = np.asarray(a, dtype=float)
    ab = np.asarray(b, dtype=float) - a
    ap = points - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(ap[:, 0], ap[:, 1])
    t = np.clip(ap @ ab / denom, 0.0, 1.0)
    d = ap - np.outer(t, ab)
    return np.hypot(d[:, 0], d[:, 1])


def _dp_indices(pts: np.ndarray, epsilon: float) -> list[int]:
    """Indices kept by Douglas-Peucker on an open chain, endpoints included."""
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        d = point_segment_distance(pts[i + 1 : j], pts[i], pts[j])
        k = int(np.argmax(d))
        if d[k] > epsilon:
            k += i + 1
            keep[k] = True
            stack.append((i, k))
            stack.append((k, j))
    return np.flatnonzero(keep).tolist()


def douglas_peucker(line: Polyline, epsilon: float) -> Polyline:
    """Simplify a polyline with the Douglas-Peucker algorithm.

    Distances are measured to the retained *segment* (not its supporting
    line), so every dropped vertex is within ``epsilon`` of the output chain.
    Closed polylines are split at vertex 0 and the vertex farthest from it;
    both halves are simplified independently.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    pts = line.points
    if len(pts) < 2:
        raise ValueError("need at least 2 points")
    if epsilon == 0:
        return line
    if not line.closed:
        return Polyline(pts[_dp_indices(pts, epsilon)], closed=False)
    if len(pts) < 4:
        return line
    far = int(np.argmax(np.hypot(*(pts - pts[0]).T)))
    ring = np.vstack([pts, pts[:1]])
    first = _dp_indices(ring[: far + 1], epsilon)
    second = [far + k for k in _dp_indices(ring[far:], epsilon)]
    idx = first + second[1:-1]
    return Polyline(pts[idx], closed=True)


def turning_angles(line: Polyline) -> np.ndarray:
    """Signed exterior angle (radians, CCW positive) at every vertex.

    Endpoints of an open polyline get 0.
    """
    pts = line.points
    n = len(pts)
    out = np.zeros(n)
    if line.closed:
        prev = pts - np.roll(pts, 1, axis=0)
        nxt = np.roll(pts, -1, axis=0) - pts
        sl = slice(None)
    else:
        prev = pts[1:-1] - pts[:-2]
        nxt = pts[2:] - pts[1:-1]
        sl = slice(1, n - 1)
    cross = prev[:, 0] * nxt[:, 1] - prev[:, 1] * nxt[:, 0]
    dot = (prev * nxt).sum(axis=1)
    out[sl] = np.arctan2(cross, dot)
    return out


def discrete_curvature(line: Polyline) -> np.ndarray:
    """Per-vertex curvature: turning angle over the mean adjacent edge length.

    The sign follows the turn direction (positive = left/CCW turn). For an
    open polyline the two endpoints are assigned 0.
    """
    if line.closed and len(line) < 3:
        raise ValueError("closed polyline needs at least 3 points")
    pts = line.points
    angles = turning_angles(line)
    if line.closed:
        prev = np.hypot(*(pts - np.roll(pts, 1, axis=0)).T)
        nxt = np.hypot(*(np.roll(pts, -1, axis=0) - pts).T)
        return angles / (0.5 * (prev + nxt))
    kappa = np.zeros(len(pts))
    if len(pts) > 2:
        prev = np.hypot(*(pts[1:-1] - pts[:-2]).T)
        nxt = np.hypot(*(pts[2:] - pts[1:-1]).T)
        kappa[1:-1] = angles[1:-1] / (0.5 * (prev + nxt))
    return kappa


def polygon_area(points: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise vertex order)."""
    p = np.asarray(points, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def offset_polygon(points: np.ndarray, distance: float, max_miter: float = 4.0) -> np.ndarray:
    """Offset a CCW polygon outward by ``distance`` using mitred vertices.

    The miter factor is capped at ``max_miter`` so spikes at very sharp
    vertices stay bounded.
    """
    p = np.asarray(points, dtype=float)
    e_in = p - np.roll(p, 1, axis=0)
    e_out = np.roll(p, -1, axis=0) - p
    n_in = np.column_stack([e_in[:, 1], -e_in[:, 0]]) / np.hypot(*e_in.T)[:, None]
    n_out = np.column_stack([e_out[:, 1], -e_out[:, 0]]) / np.hypot(*e_out.T)[:, None]
    bis = n_in + n_out
    norm = np.hypot(*bis.T)
    safe = norm > 1e-9
    bis[safe] /= norm[safe, None]
    bis[~safe] = n_in[~safe]
    cos_half = np.clip((bis * n_in).sum(axis=1), 1.0 / max_miter, 1.0)
    return p + bis * (distance / cos_half)[:, None]


# ---------------------------------------------------------------------------
# Rigid transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RigidTransform2:
    """p -> R(theta) p + t, theta in degrees (normalized to (-180, 180])."""

    theta_deg: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        vals = (self.theta_deg, self.tx, self.ty)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite transform {vals}")
        object.__setattr__(self, "theta_deg", normalize_angle(self.theta_deg))
        object.__setattr__(self, "tx", float(self.tx))
        object.__setattr__(self, "ty", float(self.ty))

    @classmethod
    def identity(cls) -> "RigidTransform2":
        return cls(0.0, 0.0, 0.0)

    @property
    def rotation(self) -> np.ndarray:
        c, s = cos_sin_deg(self.theta_deg)
        return np.array([[c, -s], [s, c]])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def matrix(self) -> np.ndarray:
        """Homogeneous 3x3 matrix."""
        m = np.eye(3)
        m[:2, :2] = self.rotation
        m[:2, 2] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform2") -> "RigidTransform2":
        """``self ∘ other``: apply ``other`` first."""
        t = self.rotation @ other.translation + self.translation
        return RigidTransform2(self.theta_deg + other.theta_deg, t[0], t[1])

    def inverse(self) -> "RigidTransform2":
        t = -self.rotation.T @ self.translation
        return RigidTransform2(-self.theta_deg, t[0], t[1])


def compose(a: RigidTransform2, b: RigidTransform2) -> RigidTransform2:
    return a.compose(b)


def invert(a: RigidTransform2) -> RigidTransform2:
    return a.inverse()


def apply(a: RigidTransform2, points) -> np.ndarray:
    return a.apply(points)


def spring_energy(transform: RigidTransform2, src: Sequence, dst: Sequence) -> float:
    """Sum of squared spring extensions ||T(src_k) - dst_k||^2."""
    moved = transform.apply(np.asarray(src, dtype=float))
    return float(((moved - np.asarray(dst, dtype=float)) ** 2).sum())


def _procrustes_closed_form(src: np.ndarray, dst: np.ndarray) -> RigidTransform2:
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    cross = float((a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]).sum())
    dot = float((a * b).sum())
    theta = math.degrees(math.atan2(cross, dot))
    c, s = math.cos(math.radians(theta)), math.sin(math.radians(theta))
    t = cd - np.array([[c, -s], [s, c]]) @ cs
    return RigidTransform2(theta, t[0], t[1])


def _procrustes_relaxation(
    src: np.ndarray, dst: np.ndarray, tol: float = 1e-14, max_iter: int = 100_000
) -> RigidTransform2:
    # gradient flow of a rigid body held by springs, parameterized by the
    # rotation about the source centroid and the centroid's position; steps
    # are scaled by the inverse mass / moment of inertia
    n = len(src)
    cs = src.mean(axis=0)
    arm0 = src - cs
    inertia = float((arm0**2).sum())
    theta, centre = 0.0, cs.copy()
    for _ in range(max_iter):
        c, s = math.cos(theta), math.sin(theta)
        arm = arm0 @ np.array([[c, -s], [s, c]]).T
        pull = dst - (arm + centre)
        d_centre = pull.sum(axis=0) / n
        lever = np.hypot(*arm.T) * np.hypot(*(dst - centre).T)
        torque = float((arm[:, 0] * pull[:, 1] - arm[:, 1] * pull[:, 0]).sum())
        # damping keeps the rotation step below the angular error
        d_theta = torque / max(inertia, float(lever.sum()))
        centre = centre + d_centre
        theta += d_theta
        if abs(d_theta) < tol and float(np.abs(d_centre).max()) < tol * max(1.0, float(np.abs(dst).max())):
            break
    c, s = math.cos(theta), math.sin(theta)
    t = centre - np.array([[c, -s], [s, c]]) @ cs
    return RigidTransform2(math.degrees(theta), t[0], t[1])


def procrustes_two_point(src1, src2, dst1, dst2, method: str = "closed_form") -> RigidTransform2:
    """Rigid transform minimizing ``|T(src1)-dst1|^2 + |T(src2)-dst2|^2``.

    This is the equilibrium of one rigid body pulled by two equal springs
    attached at ``src1``/``src2``. ``method="relaxation"`` integrates the
    spring dynamics instead of using the closed form, for cross-checking.
    """
    src = np.array([src1, src2], dtype=float)
    dst = np.array([dst1, dst2], dtype=float)
    if np.allclose(src[0], src[1], rtol=0.0, atol=1e-12):
        raise ValueError("source points coincide; rotation is undetermined")
    if method == "closed_form":
        return _procrustes_closed_form(src, dst)
    if method == "relaxation":
        return _procrustes_relaxation(src, dst)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# Raster occupancy on the world grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlacedMask:
    """Binary occupancy on the world grid; ``mask[i, j]`` is cell (row0+i, col0+j)."""

    mask: np.ndarray
    row0: int
    col0: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def bounds(self) -> tuple[int, int, int, int]:
        """(row0, col0, row1, col1) with exclusive upper bounds."""
        h, w = self.mask.shape
        return self.row0, self.col0, self.row0 + h, self.col0 + w

    def is_empty(self) -> bool:
        return not self.mask.any()

    def tight(self) -> "PlacedMask":
        """Crop to the bounding box of the set cells."""
        rows = np.flatnonzero(self.mask.any(axis=1))
        if len(rows) == 0:
            return PlacedMask(np.zeros((0, 0), bool), self.row0, self.col0)
        cols = np.flatnonzero(self.mask.any(axis=0))
        r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        return PlacedMask(self.mask[r0:r1, c0:c1], self.row0 + int(r0), self.col0 + int(c0))

    def dilate(self, radius: int) -> "PlacedMask":
        """Dilate with the digital disk {(dy, dx): dy² + dx² <= radius²}."""
        import cv2

        if radius <= 0:
            return self
        padded = np.pad(self.mask.astype(np.uint8), radius)
        yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
        kernel = (yy * yy + xx * xx <= radius * radius).astype(np.uint8)
        out = cv2.dilate(padded, kernel) > 0
        return PlacedMask(out, self.row0 - radius, self.col0 - radius)


def _overlap_slices(a: PlacedMask, b: PlacedMask):
    ar0, ac0, ar1, ac1 = a.bounds
    br0, bc0, br1, bc1 = b.bounds
    r0, r1 = max(ar0, br0), min(ar1, br1)
    c0, c1 = max(ac0, bc0), min(ac1, bc1)
    if r0 >= r1 or c0 >= c1:
        return None
    sa = (slice(r0 - ar0, r1 - ar0), slice(c0 - ac0, c1 - ac0))
    sb = (slice(r0 - br0, r1 - br0), slice(c0 - bc0, c1 - bc0))
    return sa, sb


def raster_intersection_area(a: PlacedMask, b: PlacedMask) -> int:
    """Number of world cells occupied by both placed masks."""
    sl = _overlap_slices(a, b)
    if sl is None:
        return 0
    sa, sb = sl
    return int(np.count_nonzero(a.mask[sa] & b.mask[sb]))


def masks_intersect(a: PlacedMask, b: PlacedMask) -> bool:
    sl = _overlap_slices(a, b)
    if sl is None:
        return False
    sa, sb = sl
    return bool((a.mask[sa] & b.mask[sb]).any())


def union_bounds(masks: Sequence[PlacedMask]) -> tuple[int, int, int, int]:
    """Tight (row0, col0, row1, col1) over the set cells of all masks."""
    boxes = [m.tight().bounds for m in masks if not m.is_empty()]
    if not boxes:
        return 0, 0, 0, 0
    b = np.array(boxes)
    return int(b[:, 0].min()), int(b[:, 1].min()), int(b[:, 2].max()), int(b[:, 3].max())


def union_bbox_area(masks: Sequence[PlacedMask]) -> int:
    r0, c0, r1, c1 = union_bounds(masks)
    return (r1 - r0) * (c1 - c0)
