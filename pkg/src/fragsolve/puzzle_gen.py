"""Synthetic 2D puzzles: crossing-cuts fragmentation plus simulated erosion."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .fragments import Fragment2D, Pose2D, Puzzle, Solution

log = logging.getLogger(__name__)

MAX_RETRIES = 10


class DegenerateArrangement(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_cuts: int = 4
    erosion_px: int = 0
    erosion_jitter: float = 0.0
    drop_fraction: float = 0.0
    seed: int = 0
    # faces smaller than this make the arrangement degenerate (retry)
    min_fragment_px: int = 64
    # store every fragment turned by a random multiple of 90 degrees
    quarter_turns: bool = True
    # faces that do not touch must be at least this far apart (exact geometry),
    # plus twice the erosion depth
    min_separation_px: float = 8.0
    # cuts must meet each other (inside the image) and the border at least at this angle
    min_cut_angle_deg: float = 25.0

    @property
    def separation_px(self) -> float:
        return self.min_separation_px + 2.0 * self.erosion_px if self.min_separation_px > 0 else 0.0

    @property
    def neighbor_tau(self) -> float:
        """Largest gap between adjacent fragments after erosion, plus the 4 px base tolerance."""
        return 4.0 + 2.0 * self.erosion_px

    def __post_init__(self):
        if self.n_cuts < 1 or self.n_cuts > 62:
            raise ValueError("n_cuts must be in [1, 62]")
        if self.erosion_px < 0:
            raise ValueError("erosion_px must be >= 0")
        if not 0.0 <= self.erosion_jitter <= 1.0:
            raise ValueError("erosion_jitter must be in [0, 1]")
        if not 0.0 <= self.drop_fraction < 1.0:
            raise ValueError("drop_fraction must be in [0, 1)")


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *stream]))


def synthetic_image(height: int = 256, width: int = 256, seed: int = 0) -> np.ndarray:
    """A smooth, fully opaque RGB test image (random colour blobs on a gradient)."""
    rng = _rng(seed, 7)
    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    img = np.zeros((height, width, 3))
    for ch in range(3):
        a, b = rng.uniform(-1, 1, 2)
        img[:, :, ch] = 100 + 60 * (a * xx / width + b * yy / height)
    for _ in range(12):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(0.05, 0.25) * min(height, width)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += blob[:, :, None] * rng.uniform(-80, 80, 3)
    return np.clip(img, 0, 255).astype(np.uint8)


def _perimeter_point(t: float, width: float, height: float) -> tuple[tuple[float, float], int]:
    """Point at arc-length fraction t along the rectangle boundary, and its side index."""
    per = 2 * (width + height)
    s = t * per
    if s < width:
        return (s, 0.0), 0
    s -= width
    if s < height:
        return (width, s), 1
    s -= height
    if s < width:
        return (width - s, height), 2
    s -= width
    return (0.0, height - s), 3


def _crossing_angle(c1, c2) -> float | None:
    """Acute angle (degrees) between two chords if they cross strictly inside both, else None."""
    (p, q), (r, s) = np.asarray(c1, float), np.asarray(c2, float)
    d1, d2 = q - p, s - r
    den = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(den) < 1e-12:
        return None
    w = r - p
    t = (w[0] * d2[1] - w[1] * d2[0]) / den
    u = (w[0] * d1[1] - w[1] * d1[0]) / den
    if not (0.0 < t < 1.0 and 0.0 < u < 1.0):
        return None
    cos = abs(float(d1 @ d2)) / (np.linalg.norm(d1) * np.linalg.norm(d2))
    return math.degrees(math.acos(min(1.0, cos)))


def _border_angle(p, q, side: int) -> float:
    """Acute angle (degrees) between chord pq and the image side it ends on."""
    dx, dy = abs(q[0] - p[0]), abs(q[1] - p[1])
    along, across = (dx, dy) if side in (0, 2) else (dy, dx)
    return math.degrees(math.atan2(across, along))


def _sample_chord(rng: np.random.Generator, width: int, height: int, existing, min_angle_deg: float):
    for _ in range(100000):
        (p, sp), (q, sq) = (_perimeter_point(t, width, height) for t in rng.uniform(0, 1, 2))
        if sp == sq:
            continue
        if min_angle_deg > 0:
            if min(_border_angle(p, q, sp), _border_angle(p, q, sq)) < min_angle_deg:
                continue
            angles = (_crossing_angle((p, q), c) for c in existing)
            if any(a is not None and a < min_angle_deg for a in angles):
                continue
        return p, q
    raise DegenerateArrangement("could not place a chord under the angle constraint")


def sample_chords(
    rng: np.random.Generator, width: int, height: int, n: int, min_angle_deg: float = 0.0
) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """n chords between independent uniform points on the image boundary.

    Chords with both ends on the same side do not cut the image and are
    resampled, as are chords meeting the border or crossing an earlier chord
    at less than ``min_angle_deg``. Coordinates are image pixels (x right, y down).
    """
    chords = []
    while len(chords) < n:
        chords.append(_sample_chord(rng, width, height, chords, min_angle_deg))
    return chords


def face_codes(height: int, width: int, cuts) -> np.ndarray:
    """Per-pixel bit code: bit k set iff the pixel centre lies on the positive side of cut k.

    Pixel centres exactly on a cut count as positive.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(float) + 0.5
    code = np.zeros((height, width), np.int64)
    for k, ((x1, y1), (x2, y2)) in enumerate(cuts):
        side = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
        code |= (side >= 0).astype(np.int64) << k
    return code


def cell_polygon(code: int, cuts, width: float, height: float) -> np.ndarray:
    """Exact polygon (image coordinates) of the arrangement cell with the given bit code."""
    poly = [(0.0, 0.0), (width, 0.0), (width, height), (0.0, height)]
    for k, ((x1, y1), (x2, y2)) in enumerate(cuts):
        sign = 1.0 if (code >> k) & 1 else -1.0

        def side(p):
            return sign * ((x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1))

        out = []
        for i, cur in enumerate(poly):
            prev = poly[i - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
        poly = out
        if not poly:
            break
    return np.array(poly, dtype=float).reshape(-1, 2)


def _points_to_segments(pts: np.ndarray, s0: np.ndarray, s1: np.ndarray) -> float:
    d = s1 - s0
    den = (d * d).sum(axis=1)
    rel = pts[:, None, :] - s0[None]
    t = np.clip((rel * d[None]).sum(axis=2) / np.where(den > 0, den, 1.0), 0.0, 1.0)
    gap = rel - t[..., None] * d[None]
    return float(np.hypot(gap[..., 0], gap[..., 1]).min())


def polygon_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Distance between the boundaries of two polygons (0 when they touch or cross)."""
    a0, a1 = np.roll(a, 1, axis=0), a
    b0, b1 = np.roll(b, 1, axis=0), b

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    o1 = orient(b0[None], b1[None], a0[:, None])
    o2 = orient(b0[None], b1[None], a1[:, None])
    o3 = orient(a0[:, None], a1[:, None], b0[None])
    o4 = orient(a0[:, None], a1[:, None], b1[None])
    if np.any((o1 * o2 < 0) & (o3 * o4 < 0)):
        return 0.0
    return min(_points_to_segments(a, b0, b1), _points_to_segments(b, a0, a1))


def _check_separation(polys: dict, min_sep: float) -> None:
    ids = sorted(polys)
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            d = polygon_distance(polys[a], polys[b])
            if 1e-9 < d < min_sep:
                raise DegenerateArrangement(f"faces {a} and {b} are {d:.2f} px apart without touching")


def _arrangement_problem(codes: np.ndarray, cuts, width: int, height: int, config: GenConfig) -> str | None:
    """Why the arrangement with these per-pixel codes is degenerate, or None."""
    uniq, counts = np.unique(codes, return_counts=True)
    if counts.min() < config.min_fragment_px:
        return f"a face has only {int(counts.min())} px"
    if config.separation_px > 0:
        polys = {int(c): cell_polygon(int(c), cuts, width, height) for c in uniq}
        try:
            _check_separation(polys, config.separation_px)
        except DegenerateArrangement as exc:
            return str(exc)
    return None


_CHORD_TRIES = 50


def grow_arrangement(rng: np.random.Generator, width: int, height: int, config: GenConfig):
    """Add random chords one at a time, resampling any chord that makes the arrangement degenerate."""
    yy, xx = np.mgrid[0:height, 0:width].astype(float) + 0.5
    codes = np.zeros((height, width), np.int64)
    cuts = []
    for k in range(config.n_cuts):
        problem = None
        for _ in range(_CHORD_TRIES):
            (x1, y1), (x2, y2) = chord = _sample_chord(rng, width, height, cuts, config.min_cut_angle_deg)
            side = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
            cand = codes | ((side >= 0).astype(np.int64) << k)
            problem = _arrangement_problem(cand, cuts + [chord], width, height, config)
            if problem is None:
                break
        else:
            raise DegenerateArrangement(f"could not place cut {k + 1}: {problem}")
        cuts.append(chord)
        codes = cand
    return cuts


def _as_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] not in (3, 4):
        raise ValueError(f"unsupported image shape {image.shape}")
    return image[:, :, :3].astype(np.uint8)


def crossing_cuts(image, config: GenConfig, cuts=None, group_id: str = "synthetic", attempt: int = 0) -> Puzzle:
    """Split ``image`` along straight chords into polygonal fragments.

    Each face of the cut arrangement becomes one fragment cropped to its
    bounding box. With ``quarter_turns`` the stored raster is turned by a
    random multiple of 90 degrees and the ground-truth angle undoes it, so
    the ground-truth placement reproduces the image pixel for pixel.
    """
    rgb = _as_rgb(image)
    h, w = rgb.shape[:2]
    if h < 64 or w < 64:
        raise ValueError(f"image must be at least 64x64, got {w}x{h}")
    rng = _rng(config.seed, attempt, 0)
    if cuts is None:
        cuts = grow_arrangement(rng, w, h, config)
    cuts = [((float(a[0]), float(a[1])), (float(b[0]), float(b[1]))) for a, b in cuts]
    codes = face_codes(h, w, cuts)
    uniq, first = np.unique(codes, return_index=True)
    order = uniq[np.argsort(first)]
    if len(order) < 2:
        raise DegenerateArrangement("cuts produced fewer than 2 faces")

    fragments, poses, meta_codes = [], {}, {}
    for i, code in enumerate(order):
        mask = codes == code
        if mask.sum() < config.min_fragment_px:
            raise DegenerateArrangement(f"face {i} has only {int(mask.sum())} px")
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        sub = mask[r0:r1, c0:c1]
        rgba = np.zeros(sub.shape + (4,), np.uint8)
        rgba[sub, :3] = rgb[r0:r1, c0:c1][sub]
        rgba[sub, 3] = 255
        k = int(rng.integers(0, 4)) if config.quarter_turns else 0
        rgba = np.ascontiguousarray(np.rot90(rgba, k))
        fid = f"frag_{i:03d}"
        fragments.append(Fragment2D(fid, rgba))
        poses[fid] = Pose2D(c0 + (c1 - c0) / 2.0, -(r0 + (r1 - r0) / 2.0), -90.0 * k)
        meta_codes[fid] = int(code)

    if config.separation_px > 0:
        polys = {fid: cell_polygon(code, cuts, w, h) for fid, code in meta_codes.items()}
        _check_separation(polys, config.separation_px)

    extras = {
        "generator": "crossing_cuts",
        "seed": int(config.seed),
        "attempt": int(attempt),
        "image_shape": [int(h), int(w)],
        "cuts": [[list(a), list(b)] for a, b in cuts],
        "face_codes": meta_codes,
        "neighbor_tau": config.neighbor_tau,
        "eroded_away": [],
        "dropped": [],
    }
    return Puzzle(group_id, fragments, Solution(poses), extras)


def erode_fragments(puzzle: Puzzle, config: GenConfig, attempt: int = 0) -> Puzzle:
    """Wear every fragment boundary by a random depth in [e(1-jitter), e] pixels.

    A pixel is removed when its distance to the background does not exceed
    the local depth; the depth field is uniform noise blurred over ~3 px.
    Raster sizes are kept so ground-truth poses stay valid. Fragments that
    disappear are dropped and listed in ``extras["eroded_away"]``.
    """
    e = config.erosion_px
    if e == 0:
        return puzzle
    rng = _rng(config.seed, attempt, 1)
    lo, hi = e * (1.0 - config.erosion_jitter), float(e)
    kept, gone = [], []
    for frag in puzzle.fragments:
        noise = ndimage.gaussian_filter(rng.uniform(size=frag.mask.shape), sigma=3.0)
        span = noise.max() - noise.min()
        noise = (noise - noise.min()) / span if span > 0 else np.zeros_like(noise)
        depth = lo + (hi - lo) * noise
        dist = ndimage.distance_transform_edt(np.pad(frag.mask, 1))[1:-1, 1:-1]
        keep = frag.mask & (dist > depth)
        if not keep.any():
            gone.append(frag.id)
            continue
        rgba = frag.rgba.copy()
        rgba[~keep] = 0
        kept.append(Fragment2D(frag.id, rgba, frag.px_per_mm))
    if not kept:
        raise ValueError("erosion removed every fragment")
    if len(kept) < 2:
        raise DegenerateArrangement("fewer than 2 fragments survive erosion")
    gt = None
    if puzzle.ground_truth is not None:
        gt = Solution({f.id: puzzle.ground_truth.poses[f.id] for f in kept})
    extras = dict(puzzle.extras)
    extras["eroded_away"] = list(extras.get("eroded_away", [])) + gone
    if gone:
        log.info("%s: %d fragment(s) eroded away", puzzle.group_id, len(gone))
    return Puzzle(puzzle.group_id, kept, gt, extras)


def drop_fragments(puzzle: Puzzle, config: GenConfig, attempt: int = 0) -> Puzzle:
    """Remove floor(drop_fraction * n) randomly chosen fragments (missing pieces)."""
    n_drop = math.floor(config.drop_fraction * len(puzzle))
    if n_drop == 0:
        return puzzle
    if len(puzzle) - n_drop < 2:
        raise DegenerateArrangement("dropping would leave fewer than 2 fragments")
    rng = _rng(config.seed, attempt, 2)
    dropped = set(rng.choice(puzzle.ids, size=n_drop, replace=False).tolist())
    kept = [f for f in puzzle.fragments if f.id not in dropped]
    gt = None
    if puzzle.ground_truth is not None:
        gt = Solution({f.id: puzzle.ground_truth.poses[f.id] for f in kept})
    extras = dict(puzzle.extras)
    extras["dropped"] = sorted(dropped)
    return Puzzle(puzzle.group_id, kept, gt, extras)


def generate_puzzle(image, config: GenConfig, group_id: str = "synthetic", cuts=None) -> Puzzle:
    """crossing_cuts -> erode_fragments -> drop_fragments, retrying degenerate draws.

    Retries use seeds derived from ``(config.seed, attempt)``; after
    ``MAX_RETRIES`` failed retries a ``DegenerateArrangement`` is raised.
    """
    last = None
    for attempt in range(MAX_RETRIES + 1):
        try:
            puzzle = crossing_cuts(image, config, cuts=cuts, group_id=group_id, attempt=attempt)
            puzzle = erode_fragments(puzzle, config, attempt)
            return drop_fragments(puzzle, config, attempt)
        except DegenerateArrangement as exc:
            last = exc
            if cuts is not None:
                break
            log.debug("attempt %d degenerate: %s", attempt, exc)
    raise DegenerateArrangement(f"no valid puzzle after {MAX_RETRIES} retries: {last}")


def default_box(puzzle: Puzzle) -> tuple[float, float, float, float]:
    """Square (xmin, ymin, xmax, ymax) centred on the origin whose area equals the fragments' total area."""
    side = math.sqrt(sum(f.area for f in puzzle.fragments))
    return -side / 2, -side / 2, side / 2, side / 2


def scramble(puzzle: Puzzle, seed: int, box=None) -> Solution:
    """Uniform random poses: centres inside ``box``, angles in (-180, 180]."""
    rng = _rng(seed, 3)
    xmin, ymin, xmax, ymax = box if box is not None else default_box(puzzle)
    poses = {}
    for fid in puzzle.ids:
        x, y = rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)
        poses[fid] = Pose2D(x, y, -rng.uniform(-180.0, 180.0))
    return Solution(poses)
