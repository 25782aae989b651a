import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fragsolve.dataset_io import save_group_2d
from fragsolve.fragments import Pose2D, Puzzle, Solution, place
from fragsolve.geometry import raster_intersection_area
from fragsolve.metrics import evaluate
from fragsolve.puzzle_gen import (
    DegenerateArrangement,
    GenConfig,
    crossing_cuts,
    drop_fragments,
    erode_fragments,
    generate_puzzle,
    scramble,
    synthetic_image,
)
from fragsolve.render import composite
from helpers import rect_fragment, shapely_cells


def _gt_canvas(puzzle, h, w):
    canvas, origin = composite(puzzle.fragments, puzzle.ground_truth.poses, margin=0, bounds=(0, 0, h, w))
    assert origin == (0, 0)
    return canvas


def test_config_validation():
    for bad in (dict(n_cuts=0), dict(erosion_px=-1), dict(erosion_jitter=1.5), dict(drop_fraction=1.0)):
        with pytest.raises(ValueError):
            GenConfig(**bad)


def test_small_image_rejected():
    with pytest.raises(ValueError):
        crossing_cuts(synthetic_image(32, 128), GenConfig())


def test_horizontal_bisection():
    img = synthetic_image(64, 96, 0)
    p = generate_puzzle(img, GenConfig(seed=1), cuts=[((0, 32), (96, 32))])
    assert len(p) == 2
    for f in p.fragments:
        assert abs(f.area - 64 * 96 / 2) <= 96


def test_deterministic_per_seed():
    img = synthetic_image(128, 128, 3)
    a = generate_puzzle(img, GenConfig(n_cuts=5, seed=11))
    b = generate_puzzle(img, GenConfig(n_cuts=5, seed=11))
    assert a.ids == b.ids and [f.area for f in a.fragments] == [f.area for f in b.fragments]
    c = generate_puzzle(img, GenConfig(n_cuts=5, seed=12))
    assert [f.area for f in a.fragments] != [f.area for f in c.fragments]


def test_byte_identical_output(tmp_path):
    img = synthetic_image(128, 160, 5)
    cfg = GenConfig(n_cuts=4, erosion_px=2, erosion_jitter=0.5, drop_fraction=0.2, seed=99)
    for d in ("x", "y"):
        save_group_2d(generate_puzzle(img, cfg, group_id=d), tmp_path / d)
    names = sorted(q.name for q in (tmp_path / "x").iterdir())
    assert names == sorted(q.name for q in (tmp_path / "y").iterdir())
    for n in names:
        assert (tmp_path / "x" / n).read_bytes() == (tmp_path / "y" / n).read_bytes()


def test_eight_cuts_reassemble_exactly():
    img = synthetic_image(512, 512, 8)
    p = generate_puzzle(img, GenConfig(n_cuts=8, seed=8))
    assert sum(f.area for f in p.fragments) == 512 * 512
    canvas = _gt_canvas(p, 512, 512)
    assert (canvas[:, :, 3] == 255).all()
    np.testing.assert_array_equal(canvas[:, :, :3], img)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_pre_erosion_tiling(n_cuts, seed):
    h, w = 160, 192
    p = generate_puzzle(synthetic_image(h, w, seed), GenConfig(n_cuts=n_cuts, seed=seed))
    masks = {f.id: place(f, p.ground_truth.poses[f.id]) for f in p.fragments}
    for a, b in combinations(masks, 2):
        assert raster_intersection_area(masks[a], masks[b]) == 0
    cover = np.zeros((h, w), int)
    for m in masks.values():
        cover[m.row0 : m.row0 + m.shape[0], m.col0 : m.col0 + m.shape[1]] += m.mask
    assert (cover == 1).all()


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_face_areas_match_exact_polygons(n_cuts, seed):
    p = generate_puzzle(synthetic_image(128, 128, 0), GenConfig(n_cuts=n_cuts, seed=seed))
    cells = shapely_cells(p.extras)
    for f in p.fragments:
        poly = cells[f.id]
        # pixel-centre sampling differs from the exact area by at most about half the perimeter
        assert abs(f.area - poly.area) <= 0.5 * poly.length + 4


def test_cut_angle_rule():
    p = generate_puzzle(synthetic_image(256, 256, 0), GenConfig(n_cuts=6, seed=3))
    cuts = [np.array(c, float) for c in p.extras["cuts"]]
    for (a1, a2), (b1, b2) in combinations(cuts, 2):
        d1, d2 = a2 - a1, b2 - b1
        den = d1[0] * d2[1] - d1[1] * d2[0]
        if abs(den) < 1e-12:
            continue
        t = ((b1 - a1)[0] * d2[1] - (b1 - a1)[1] * d2[0]) / den
        x = a1 + t * d1
        if 0 < t < 1 and 0 < x[0] < 256 and 0 < x[1] < 256:
            ang = math.degrees(math.acos(abs(d1 @ d2) / (np.linalg.norm(d1) * np.linalg.norm(d2))))
            assert ang >= 25 - 1e-9


def test_min_fragment_rule_and_retry_limit():
    with pytest.raises(DegenerateArrangement, match="retries"):
        generate_puzzle(synthetic_image(64, 64), GenConfig(n_cuts=20, seed=0, min_fragment_px=400))


def test_user_cuts_are_not_retried():
    with pytest.raises(DegenerateArrangement):
        generate_puzzle(synthetic_image(64, 64), GenConfig(), cuts=[((0, 0.5), (64, 0.5))])


def test_quarter_turns_recorded_in_ground_truth():
    p = generate_puzzle(synthetic_image(128, 128), GenConfig(n_cuts=6, seed=2))
    thetas = {p.ground_truth.poses[i].theta_deg for i in p.ids}
    assert thetas <= {0.0, 90.0, -90.0, 180.0}
    assert len(thetas) > 1


# --- erosion ----------------------------------------------------------------


def _squares():
    frags = [rect_fragment("a", 100, 100), rect_fragment("b", 100, 100)]
    return Puzzle("sq", frags, Solution({"a": Pose2D(0, 0), "b": Pose2D(100, 0)}))


def test_zero_erosion_is_identity():
    p = _squares()
    assert erode_fragments(p, GenConfig(erosion_px=0)) is p


def test_uniform_erosion_area():
    out = erode_fragments(_squares(), GenConfig(erosion_px=3, erosion_jitter=0))
    assert [f.area for f in out.fragments] == [94 * 94, 94 * 94]
    assert out.ground_truth.poses == _squares().ground_truth.poses


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 6), st.floats(0, 1), st.integers(0, 2**31))
def test_erosion_subset_and_depth_bounds(e, jitter, seed):
    p = _squares()
    out = erode_fragments(p, GenConfig(erosion_px=e, erosion_jitter=jitter, seed=seed))
    for before, after in zip(p.fragments, out.fragments):
        assert not (after.mask & ~before.mask).any()
        # the deepest wear is e; the shallowest is e(1 - jitter), rounded to whole pixels
        lo = int(math.floor(e * (1 - jitter)))
        assert after.mask[e : 100 - e, e : 100 - e].all()
        if lo >= 1:
            assert not after.mask[:lo].any() and not after.mask[:, :lo].any()


def test_erosion_monotone():
    img = synthetic_image(192, 192, 4)
    totals = [sum(f.area for f in generate_puzzle(img, GenConfig(n_cuts=3, seed=5, erosion_px=e)).fragments) for e in range(6)]
    assert all(a >= b for a, b in zip(totals, totals[1:]))


def test_vanishing_fragment_is_reported():
    frags = [rect_fragment("a", 100, 100), rect_fragment("b", 100, 100), rect_fragment("c", 3, 3)]
    p = Puzzle("sq", frags, Solution({k: Pose2D(0, 0) for k in "abc"}))
    out = erode_fragments(p, GenConfig(erosion_px=2))
    assert out.ids == ["a", "b"] and out.extras["eroded_away"] == ["c"]


def test_eroded_ground_truth_scores_perfectly():
    p = generate_puzzle(synthetic_image(192, 224, 1), GenConfig(n_cuts=4, seed=6, erosion_px=3, erosion_jitter=0.5))
    r = evaluate(p.ground_truth, p)
    assert (r.q_pos, r.rmse_translation, r.rmse_rotation, r.precision, r.recall, r.f1) == (1, 0, 0, 1, 1, 1)


# --- drops ------------------------------------------------------------------


def test_drop_floor_rule():
    frags = [rect_fragment(f"f{i}", 10, 10) for i in range(10)]
    p = Puzzle("d", frags, Solution({f.id: Pose2D(0, 0) for f in frags}))
    out = drop_fragments(p, GenConfig(drop_fraction=0.2, seed=1))
    assert len(out) == 8 and len(out.extras["dropped"]) == 2
    assert len(drop_fragments(p, GenConfig(drop_fraction=0.29))) == 8
    assert drop_fragments(p, GenConfig(drop_fraction=0.05)) is p


def test_drop_keeps_two():
    frags = [rect_fragment(f"f{i}", 10, 10) for i in range(3)]
    p = Puzzle("d", frags, Solution({f.id: Pose2D(0, 0) for f in frags}))
    assert len(drop_fragments(p, GenConfig(drop_fraction=0.5))) == 2
    with pytest.raises(DegenerateArrangement):
        drop_fragments(p, GenConfig(drop_fraction=0.67))


# --- scramble ---------------------------------------------------------------


def test_scramble_contract():
    p = generate_puzzle(synthetic_image(128, 128), GenConfig(n_cuts=3, seed=1))
    a, b = scramble(p, 5), scramble(p, 5)
    assert a.poses == b.poses and len(a) == len(p)
    seen = {tuple(sorted((k, v.x, v.y, v.theta_deg) for k, v in scramble(p, s).poses.items())) for s in range(100)}
    assert len(seen) == 100
    for pose in scramble(p, 7, box=(0, 0, 10, 20)).poses.values():
        assert 0 <= pose.x <= 10 and 0 <= pose.y <= 20 and -180 < pose.theta_deg <= 180
