"""Reading and writing puzzle groups, solutions and fragment metadata.

2D group directory layout::

    <group>/<fragment_id>.png      RGBA, transparent background
    <group>/ground_truth.txt       "# repair-2d-gt v1" then "id x_px y_px theta_deg" lines
    <group>/<fragment_id>.json     optional metadata

3D groups hold ``<fragment_id>.obj`` meshes already in assembled position,
so their ground truth is the identity pose for every fragment.
"""

from __future__ import annotations

import json
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .fragments import Fragment2D, Fragment3D, Pose2D, Pose3D, Puzzle, Solution

GT_FILENAME = "ground_truth.txt"
GT_HEADER = "# repair-2d-gt v1"


class FormatError(ValueError):
    """A text file does not follow the expected layout."""

    def __init__(self, path, lineno: int | None, message: str):
        where = f"{path}:{lineno}" if lineno is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = path
        self.lineno = lineno


class MetadataParseError(ValueError):
    def __init__(self, path, byte_offset: int, message: str):
        super().__init__(f"{path}: malformed JSON at byte {byte_offset}: {message}")
        self.byte_offset = byte_offset


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Scale conversion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RenderScale:
    """Orthographic render set-up used to turn 3D millimetres into 2D pixels."""

    s_img: float
    s_3d: float
    s_ort: float

    def __post_init__(self):
        if min(self.s_img, self.s_3d, self.s_ort) <= 0:
            raise ValueError(f"render scale fields must be positive: {self}")

    @property
    def factor(self) -> float:
        return self.s_img * self.s_3d / self.s_ort


def mm_to_px(t_mm, scale: RenderScale) -> np.ndarray:
    return np.asarray(t_mm, dtype=float) * scale.factor


# ---------------------------------------------------------------------------
# Ground-truth conventions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GTConventions:
    """How to interpret an external 2D ground-truth file.

    ``y_down`` flips the y axis (image-style coordinates), ``clockwise``
    flips the sign of theta, and ``pivot="top_left"`` means (x, y) locate the
    raster's top-left corner instead of its centre.
    """

    y_down: bool = False
    clockwise: bool = False
    pivot: str = "center"

    def __post_init__(self):
        if self.pivot not in ("center", "top_left"):
            raise ValueError(f"unknown pivot {self.pivot!r}")

    def to_internal(self, x: float, y: float, theta: float, height: int, width: int) -> Pose2D:
        if self.y_down:
            y = -y
        if self.clockwise:
            theta = -theta
        if self.pivot == "top_left":
            r = math.radians(theta)
            hx, hy = width / 2.0, -height / 2.0
            x += math.cos(r) * hx - math.sin(r) * hy
            y += math.sin(r) * hx + math.cos(r) * hy
        return Pose2D(x, y, theta)


_SPLIT = re.compile(r"[,\s]+")


def read_ground_truth_2d(path, strict: bool = True) -> dict[str, tuple[float, float, float]]:
    """Parse a 2D ground-truth text file into ``{id: (x, y, theta)}``.

    Strict mode requires exactly four whitespace-separated columns per line.
    Lenient mode also accepts commas, skips non-numeric header rows and
    ignores trailing columns.
    """
    path = Path(path)
    out: dict[str, tuple[float, float, float]] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cols = [c for c in (line.split() if strict else _SPLIT.split(line)) if c]
        if strict and len(cols) != 4:
            raise FormatError(path, lineno, f"expected 4 columns 'id x y theta', got {len(cols)}")
        if len(cols) < 4:
            raise FormatError(path, lineno, f"expected at least 4 columns, got {len(cols)}")
        try:
            vals = tuple(float(c) for c in cols[1:4])
        except ValueError:
            if strict:
                raise FormatError(path, lineno, f"non-numeric pose in {line!r}") from None
            continue
        if cols[0] in out:
            raise FormatError(path, lineno, f"duplicate id {cols[0]!r}")
        out[cols[0]] = vals
    return out


def write_ground_truth_2d(path, poses: dict[str, Pose2D]) -> None:
    lines = [GT_HEADER]
    for fid in sorted(poses):
        p = poses[fid]
        lines.append(f"{fid} {p.x!r} {p.y!r} {p.theta_deg!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# 2D groups
# ---------------------------------------------------------------------------


def read_fragment_png(path, px_per_mm: float = 1.0) -> Fragment2D:
    with Image.open(path) as im:
        rgba = np.asarray(im.convert("RGBA"))
    return Fragment2D(Path(path).stem, rgba.copy(), px_per_mm)


def write_fragment_png(frag: Fragment2D, path) -> None:
    import io

    buf = io.BytesIO()
    Image.fromarray(frag.rgba, "RGBA").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_group_2d(
    directory,
    strict: bool = True,
    conventions: GTConventions | None = None,
    px_per_mm: float = 1.0,
) -> Puzzle:
    """Load a 2D group. Without a ground-truth file the puzzle has ``ground_truth=None``."""
    directory = Path(directory)
    pngs = sorted(directory.glob("*.png"))
    if len(pngs) < 2:
        raise ValueError(f"{directory}: a group needs at least 2 fragment PNGs, found {len(pngs)}")
    fragments = [read_fragment_png(p, px_per_mm) for p in pngs]
    for f in fragments:
        meta_path = directory / f"{f.id}.json"
        if meta_path.exists():
            f.metadata = parse_metadata(meta_path)
    gt_path = directory / GT_FILENAME
    gt = None
    if gt_path.exists():
        rows = read_ground_truth_2d(gt_path, strict=strict)
        ids = {f.id for f in fragments}
        if set(rows) != ids:
            raise ValueError(
                f"{gt_path}: ids do not match PNGs "
                f"(missing {sorted(ids - set(rows))}, unknown {sorted(set(rows) - ids)})"
            )
        conv = conventions or GTConventions()
        by_id = {f.id: f for f in fragments}
        gt = Solution(
            {fid: conv.to_internal(*rows[fid], by_id[fid].height, by_id[fid].width) for fid in rows}
        )
    extras = {}
    gen = directory / "generation.json"
    if gen.exists():
        extras = json.loads(gen.read_text())
    return Puzzle(directory.name, fragments, gt, extras)


def save_group_2d(puzzle: Puzzle, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for f in puzzle.fragments:
        write_fragment_png(f, directory / f"{f.id}.png")
    if puzzle.ground_truth is not None:
        write_ground_truth_2d(directory / GT_FILENAME, puzzle.ground_truth.poses)
    if puzzle.extras:
        atomic_write_text(directory / "generation.json", json.dumps(puzzle.extras, indent=2, sort_keys=True))
    return directory


# ---------------------------------------------------------------------------
# 3D groups
# ---------------------------------------------------------------------------


def load_obj_vertices(path) -> np.ndarray:
    """Vertex positions from the ``v x y z`` records of an OBJ file."""
    verts = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if raw.startswith("v "):
            parts = raw.split()
            if len(parts) < 4:
                raise FormatError(path, lineno, "vertex record needs 3 coordinates")
            verts.append([float(v) for v in parts[1:4]])
    if not verts:
        raise FormatError(path, None, "no vertices")
    return np.array(verts)


def load_group_3d(directory) -> Puzzle:
    directory = Path(directory)
    objs = sorted(directory.glob("*.obj"))
    if len(objs) < 2:
        raise ValueError(f"{directory}: a 3D group needs at least 2 OBJ files, found {len(objs)}")
    frags = [Fragment3D(p.stem, load_obj_vertices(p)) for p in objs]
    gt = Solution({f.id: Pose3D.identity() for f in frags})
    return Puzzle(directory.name, frags, gt)


def load_group(directory, **kwargs) -> Puzzle:
    """Load a 2D or 3D group depending on the files present."""
    directory = Path(directory)
    if any(directory.glob("*.obj")) and not any(directory.glob("*.png")):
        return load_group_3d(directory)
    return load_group_2d(directory, **kwargs)


def discover_groups(dataset) -> list[Path]:
    """Group directories under ``dataset`` (or ``dataset`` itself if it is one)."""
    dataset = Path(dataset)
    if not dataset.is_dir():
        raise FileNotFoundError(f"{dataset} is not a directory")

    def is_group(d: Path) -> bool:
        return any(d.glob("*.png")) or any(d.glob("*.obj"))

    if is_group(dataset):
        return [dataset]
    return sorted(d for d in dataset.iterdir() if d.is_dir() and is_group(d))


# ---------------------------------------------------------------------------
# Solutions
# ---------------------------------------------------------------------------


def format_solution(solution: Solution) -> str:
    lines = []
    if solution.unplaced:
        lines.append("# unplaced: " + " ".join(sorted(solution.unplaced)))
    for fid in sorted(solution.poses):
        p = solution.poses[fid]
        if isinstance(p, Pose3D):
            vals = list(p.rotation.ravel()) + list(p.translation)
        else:
            vals = [p.x, p.y, p.theta_deg]
        lines.append(fid + " " + " ".join(f"{v:.9g}" for v in vals))
    return "\n".join(lines) + "\n"


def save_solution(solution: Solution, path) -> None:
    """One line per fragment: ``id x y theta`` (2D) or ``id r11..r33 tx ty tz`` (3D)."""
    atomic_write_text(path, format_solution(solution))


def load_solution(path) -> Solution:
    path = Path(path)
    poses: dict[str, Any] = {}
    unplaced: set[str] = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("# unplaced:"):
                unplaced.update(line.split(":", 1)[1].split())
            continue
        cols = line.split()
        fid = cols[0]
        if fid in poses:
            raise FormatError(path, lineno, f"duplicate id {fid!r}")
        try:
            vals = [float(c) for c in cols[1:]]
        except ValueError:
            raise FormatError(path, lineno, f"non-numeric value in {line!r}") from None
        if len(vals) == 3:
            poses[fid] = Pose2D(*vals)
        elif len(vals) == 12:
            rot = np.array(vals[:9]).reshape(3, 3)
            try:
                poses[fid] = Pose3D(rot, vals[9:])
            except ValueError:
                # short printed precision can push a rotation just outside tolerance
                u, _, vt = np.linalg.svd(rot)
                if np.linalg.det(u @ vt) < 0 or not np.allclose(rot, u @ vt, atol=1e-3):
                    raise FormatError(path, lineno, "rotation is not orthonormal") from None
                poses[fid] = Pose3D(u @ vt, vals[9:])
        else:
            raise FormatError(path, lineno, f"expected 3 (2D) or 12 (3D) values, got {len(vals)}")
    kinds = {type(p) for p in poses.values()}
    if len(kinds) > 1:
        raise FormatError(path, None, "mixes 2D and 3D poses")
    return Solution(poses, frozenset(unplaced))


# ---------------------------------------------------------------------------
# Metadata
# ---------------------------------------------------------------------------


def _norm_key(key: str) -> str:
    return re.sub(r"[^a-z0-9]", "", key.lower())


_META_FIELDS = {
    "acquisitiondate": "acquisition_date",
    "artisticstyle": "artistic_style",
    "filename": "filenames",
    "filenames": "filenames",
    "frescofamily": "fresco_family",
    "geometricdata": "geometric_data",
    "id": "id",
    "link": "link",
    "rgbfile": "rgb_files",
    "rgbfiles": "rgb_files",
    "raw3dfile": "raw_3d_files",
    "raw3dfiles": "raw_3d_files",
    "texture": "texture",
    "version": "version",
    "weight": "weight_g",
}


@dataclass
class FragmentMetadata:
    id: str | None = None
    acquisition_date: str | None = None
    artistic_style: str | None = None
    fresco_family: str | None = None
    weight_g: float | None = None
    version: str | None = None
    link: str | None = None
    filenames: Any = None
    rgb_files: Any = None
    raw_3d_files: Any = None
    texture: Any = None
    geometric_data: dict | None = None
    bounding_box: Any = None
    center_of_mass: Any = None
    unrecognized: dict = field(default_factory=dict)


def parse_metadata(source) -> FragmentMetadata:
    """Parse a per-fragment metadata JSON file (path, bytes or str).

    Keys are matched case- and punctuation-insensitively ("Acquisition Date",
    "acquisition_date" ...). Unknown keys are kept in ``unrecognized``.
    """
    if isinstance(source, (bytes, bytearray)):
        data, name = bytes(source), "<bytes>"
    elif isinstance(source, str) and source.lstrip().startswith(("{", "[")):
        data, name = source.encode("utf-8"), "<string>"
    else:
        data, name = Path(source).read_bytes(), str(source)
    text = data.decode("utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MetadataParseError(name, len(text[: exc.pos].encode("utf-8")), exc.msg) from None
    if not isinstance(obj, dict):
        raise MetadataParseError(name, 0, "top-level value must be an object")
    meta = FragmentMetadata()
    for key, value in obj.items():
        attr = _META_FIELDS.get(_norm_key(key))
        if attr is None:
            meta.unrecognized[key] = value
            continue
        setattr(meta, attr, value)
    if meta.id is not None:
        meta.id = str(meta.id)
    if meta.weight_g is not None:
        meta.weight_g = float(meta.weight_g)
        if meta.weight_g < 0:
            raise ValueError(f"{name}: negative weight {meta.weight_g}")
    if isinstance(meta.geometric_data, dict):
        geo = {_norm_key(k): v for k, v in meta.geometric_data.items()}
        meta.bounding_box = geo.get("boundingbox", geo.get("boundingboxlimits"))
        meta.center_of_mass = geo.get("centerofmass", geo.get("centreofmass"))
    if name not in ("<bytes>", "<string>") and meta.id is not None and meta.id != Path(name).stem:
        raise ValueError(f"{name}: metadata id {meta.id!r} does not match the file name")
    return meta
