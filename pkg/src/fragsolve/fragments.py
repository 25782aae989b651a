"""Fragment, pose, solution and puzzle data model.

A 2D fragment is an RGBA raster whose alpha channel defines its mask. Its
local frame has the origin at the raster centre, x to the right and y up; a
pose ``(x, y, theta)`` rotates the raster counter-clockwise about that centre
and moves the centre to ``(x, y)`` in world coordinates (see
:mod:`fragsolve.geometry` for the world grid).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Union

import cv2
import numpy as np

from .geometry import PlacedMask, Polyline, RigidTransform2, cos_sin_deg, normalize_angle, polygon_area

# keeps nearest-neighbour ties at exact half-pixel offsets rounding one way
_TIE_BIAS = 2e-3


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta_deg: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.theta_deg)):
            raise ValueError(f"non-finite pose {(self.x, self.y, self.theta_deg)}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta_deg", normalize_angle(self.theta_deg))

    def to_transform(self) -> RigidTransform2:
        return RigidTransform2(self.theta_deg, self.x, self.y)

    @classmethod
    def from_transform(cls, t: RigidTransform2) -> "Pose2D":
        return cls(t.tx, t.ty, t.theta_deg)

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Pose3D:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite 3D pose")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose3D":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other: "Pose3D") -> "Pose3D":
        return Pose3D(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose3D":
        return Pose3D(self.rotation.T, -self.rotation.T @ self.translation)


Pose = Union[Pose2D, Pose3D]


@dataclass
class Fragment2D:
    id: str
    rgba: np.ndarray
    px_per_mm: float = 1.0
    metadata: object = field(default=None, repr=False, compare=False)
    mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rgba = np.asarray(self.rgba)
        if rgba.ndim != 3 or rgba.shape[2] != 4:
            raise ValueError(f"fragment {self.id}: expected an HxWx4 RGBA raster, got {rgba.shape}")
        if rgba.dtype != np.uint8:
            rgba = rgba.astype(np.uint8)
        self.rgba = rgba
        self.mask = rgba[:, :, 3] > 0
        if not self.mask.any():
            raise ValueError(f"fragment {self.id}: empty mask")
        if self.px_per_mm <= 0:
            raise ValueError("px_per_mm must be positive")

    @classmethod
    def from_mask(cls, id: str, mask: np.ndarray, color=(200, 200, 200), px_per_mm: float = 1.0) -> "Fragment2D":
        mask = np.asarray(mask, dtype=bool)
        rgba = np.zeros(mask.shape + (4,), np.uint8)
        rgba[mask] = (*color, 255)
        return cls(id, rgba, px_per_mm)

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def diameter(self) -> float:
        return math.hypot(self.width, self.height)


@dataclass
class Fragment3D:
    id: str
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError(f"fragment {self.id}: expected (n, 3) points")
        self.points = pts

    def is_volumetric(self) -> bool:
        """At least 4 points that are not all coplanar."""
        if len(self.points) < 4:
            return False
        sv = np.linalg.svd(self.points - self.points.mean(axis=0), compute_uv=False)
        return bool(sv[2] > 1e-9 * max(sv[0], 1e-300))


Fragment = Union[Fragment2D, Fragment3D]


@dataclass
class Solution:
    """Fragment id -> pose. ``unplaced`` flags ids a solver could not place."""

    poses: dict[str, Pose]
    unplaced: frozenset = frozenset()

    def __post_init__(self):
        self.unplaced = frozenset(self.unplaced)
        missing = self.unplaced - set(self.poses)
        if missing:
            raise ValueError(f"unplaced ids without a pose: {sorted(missing)}")

    @property
    def is_3d(self) -> bool:
        return any(isinstance(p, Pose3D) for p in self.poses.values())

    def ids(self) -> list[str]:
        return sorted(self.poses)

    def __len__(self) -> int:
        return len(self.poses)


@dataclass
class Puzzle:
    group_id: str
    fragments: list
    ground_truth: Solution | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.fragments = sorted(self.fragments, key=lambda f: f.id)
        ids = [f.id for f in self.fragments]
        if len(ids) < 2:
            raise ValueError(f"puzzle {self.group_id}: needs at least 2 fragments, got {len(ids)}")
        if len(set(ids)) != len(ids):
            raise ValueError(f"puzzle {self.group_id}: duplicate fragment ids")
        kinds = {type(f) for f in self.fragments}
        if len(kinds) != 1:
            raise ValueError("cannot mix 2D and 3D fragments")
        if self.ground_truth is not None and set(self.ground_truth.poses) != set(ids):
            raise ValueError(f"puzzle {self.group_id}: ground truth must have exactly one pose per fragment")
        self._by_id = {f.id: f for f in self.fragments}

    @property
    def dimension(self) -> str:
        return "3D" if isinstance(self.fragments[0], Fragment3D) else "2D"

    @property
    def ids(self) -> list[str]:
        return [f.id for f in self.fragments]

    def fragment(self, fid: str):
        return self._by_id[fid]

    def __len__(self) -> int:
        return len(self.fragments)


# ---------------------------------------------------------------------------
# Local raster coordinates
# ---------------------------------------------------------------------------


def raster_to_local(rows, cols, height: int, width: int) -> np.ndarray:
    """Pixel centres (row, col) -> local (x, y), origin at the raster centre, y up."""
    rows = np.asarray(rows, dtype=float)
    cols = np.asarray(cols, dtype=float)
    return np.stack([cols + 0.5 - width / 2.0, height / 2.0 - rows - 0.5], axis=-1)


def local_to_raster(points, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(points, dtype=float)
    return height / 2.0 - 0.5 - p[..., 1], p[..., 0] + width / 2.0 - 0.5


def local_to_world(frag: Fragment2D, pose: Pose2D, points) -> np.ndarray:
    return pose.to_transform().apply(points)


# ---------------------------------------------------------------------------
# Contours, areas, placement
# ---------------------------------------------------------------------------


def extract_contour(frag: Fragment2D) -> Polyline:
    """Outer boundary of the largest 8-connected mask component.

    Returns a closed, counter-clockwise polyline through the centres of the
    boundary pixels, in fragment-local coordinates.
    """
    mask = frag.mask.astype(np.uint8)
    if not mask.any():
        raise ValueError(f"fragment {frag.id}: empty mask")
    n, labels, stats, _ = cv2.connectedComponentsWithStats(mask, connectivity=8)
    if n > 2:
        warnings.warn(f"fragment {frag.id}: {n - 1} components, using the largest", stacklevel=2)
        biggest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
        mask = (labels == biggest).astype(np.uint8)
    contours, _ = cv2.findContours(np.pad(mask, 1), cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    pts = max(contours, key=len).reshape(-1, 2).astype(float) - 1.0
    if len(pts) < 3:
        raise ValueError(f"fragment {frag.id}: mask too small for a contour ({len(pts)} boundary points)")
    local = raster_to_local(pts[:, 1], pts[:, 0], frag.height, frag.width)
    if polygon_area(local) < 0:
        local = local[::-1]
    return Polyline(local, closed=True)


def voxel_codes(points: np.ndarray, voxel: float) -> np.ndarray:
    """Sorted unique integer codes of the voxels occupied by ``points``."""
    ijk = np.floor(np.asarray(points, dtype=float) / voxel).astype(np.int64) + (1 << 20)
    if ijk.min(initial=0) < 0 or ijk.max(initial=0) >= (1 << 21):
        raise ValueError("point cloud too large for the voxel size")
    return np.unique((ijk[:, 0] << 42) | (ijk[:, 1] << 21) | ijk[:, 2])


def fragment_area(frag: Fragment, unit: str = "px", voxel_mm: float = 1.0) -> float:
    """Mask area (2D, px² or mm²) or voxel-occupancy volume (3D, mm³)."""
    if isinstance(frag, Fragment3D):
        if not frag.is_volumetric():
            raise ValueError(f"fragment {frag.id}: degenerate point cloud has no volume")
        return len(voxel_codes(frag.points, voxel_mm)) * voxel_mm**3
    if unit == "px":
        return float(frag.area)
    if unit == "mm":
        return frag.area / frag.px_per_mm**2
    raise ValueError(f"unknown unit {unit!r}")


def _warp_setup(frag: Fragment2D, pose: Pose2D, scale: float, bias: float = _TIE_BIAS):
    h, w = frag.height, frag.width
    c, s = cos_sin_deg(round(pose.theta_deg, 10))
    corners = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
    world = scale * (corners @ np.array([[c, -s], [s, c]]).T + [pose.x, pose.y])
    col0 = math.floor(world[:, 0].min()) - 1
    col1 = math.ceil(world[:, 0].max()) + 1
    row0 = math.floor(-world[:, 1].max()) - 1
    row1 = math.ceil(-world[:, 1].min()) + 1
    ax = (col0 + 0.5) / scale - pose.x
    ay = -(row0 + 0.5) / scale - pose.y
    m = np.array(
        [
            [c / scale, -s / scale, c * ax + s * ay + w / 2 - 0.5 + bias],
            [s / scale, c / scale, h / 2 - 0.5 + s * ax - c * ay + bias],
        ]
    )
    return m, (col1 - col0, row1 - row0), row0, col0


def place(frag: Fragment2D, pose: Pose2D, scale: float = 1.0) -> PlacedMask:
    """Rasterize the fragment mask at ``pose`` on the world grid.

    ``scale`` is the number of world cells per fragment pixel (pose
    translations are in fragment pixels). Nearest-neighbour resampling keeps
    the result binary; it is exact for integer-aligned poses at multiples of
    90 degrees.
    """
    m, size, row0, col0 = _warp_setup(frag, pose, scale)
    src = frag.mask.view(np.uint8)
    out = cv2.warpAffine(src, m, size, flags=cv2.INTER_NEAREST | cv2.WARP_INVERSE_MAP, borderValue=0)
    return PlacedMask(out > 0, row0, col0).tight()


def place_rgba(frag: Fragment2D, pose: Pose2D, scale: float = 1.0) -> tuple[np.ndarray, PlacedMask]:
    """Placed colour raster plus its nearest-neighbour coverage.

    Colours are resampled bilinearly on alpha-premultiplied values so the
    transparent background does not bleed into the fragment edge.
    """
    m, size, row0, col0 = _warp_setup(frag, pose, scale)
    m_lin = _warp_setup(frag, pose, scale, bias=0.0)[0]
    alpha = frag.rgba[:, :, 3].astype(np.float32) / 255.0
    premul = frag.rgba[:, :, :3].astype(np.float32) * alpha[:, :, None]
    flags = cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP
    pc = cv2.warpAffine(premul, m_lin, size, flags=flags, borderValue=0)
    pa = cv2.warpAffine(alpha, m_lin, size, flags=flags, borderValue=0)
    cover = cv2.warpAffine(frag.mask.view(np.uint8), m, size, flags=cv2.INTER_NEAREST | cv2.WARP_INVERSE_MAP) > 0
    rgb = np.where(pa[:, :, None] > 0, pc / np.maximum(pa, 1e-6)[:, :, None], 0.0)
    out = np.zeros(cover.shape + (4,), np.uint8)
    out[:, :, :3] = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    out[:, :, 3] = np.where(cover, np.clip(np.rint(pa * 255.0), 1, 255), 0).astype(np.uint8)
    return out, PlacedMask(cover, row0, col0)


def transform_points_3d(frag: Fragment3D, pose: Pose3D) -> np.ndarray:
    return pose.apply(frag.points)
