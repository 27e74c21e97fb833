import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmtgrasp import data
from hmtgrasp.data import (
    ParseError,
    Sample,
    SceneError,
    augment,
    format_cornell_rects,
    load_dataset,
    make_synthetic_scene,
    parse_cornell_rects,
    parse_jacquard_line,
    parse_jacquard_rects,
    rasterize_targets,
    split_folds,
    transform_sample,
    write_synthetic_dataset,
)
from hmtgrasp.geometry import GraspRectangle, angle_difference, grasp_success, synthesize_grasps


# ----------------------------------------------------------------------
# parsers
# ----------------------------------------------------------------------
def test_cornell_single_rect():
    (r,) = parse_cornell_rects("0 0\n4 0\n4 2\n0 2\n")
    assert r.center == pytest.approx((2.0, 1.0))
    assert (r.width, r.height, r.angle) == pytest.approx((4.0, 2.0, 0.0))


def test_cornell_grouping_and_nan():
    two = "0 0\n4 0\n4 2\n0 2\n\n10 10\n12 10\n12 14\n10 14\n"
    assert len(parse_cornell_rects(two)) == 2
    with_nan = "NaN NaN\n4 0\n4 2\n0 2\n" + two
    assert len(parse_cornell_rects(with_nan)) == 2


@pytest.mark.parametrize("text,line", [
    ("0 0\n4 0\n4 2\n", 3),
    ("0 0\n4 x\n4 2\n0 2\n", 2),
    ("0 0\n4 0 1\n4 2\n0 2\n", 2),
])
def test_cornell_errors_carry_line(text, line):
    with pytest.raises(ParseError) as exc:
        parse_cornell_rects(text)
    assert exc.value.line == line


def test_cornell_format_roundtrip():
    rng = np.random.default_rng(3)
    rects = [GraspRectangle((rng.uniform(0, 100), rng.uniform(0, 100)), rng.uniform(-1.5, 1.5),
                            rng.uniform(5, 30), rng.uniform(5, 30)) for _ in range(10)]
    back = parse_cornell_rects(format_cornell_rects(rects))
    for a, b in zip(rects, back):
        assert np.max(np.abs(a.corners - b.corners)) < 1e-5


def test_jacquard_line():
    g = parse_jacquard_line("100;120;0;30;15")
    assert (g.u, g.v, g.phi, g.width) == (100.0, 120.0, 0.0, 30.0)
    assert parse_jacquard_line("0;0;100;1;1").phi == pytest.approx(math.radians(-80))
    with pytest.raises(ParseError):
        parse_jacquard_line("1;2;3;4")
    with pytest.raises(ParseError):
        parse_jacquard_line("1;2;a;4;5")


def test_jacquard_rects():
    rs = parse_jacquard_rects("10;20;90;30;8\n\n1;1;0;2;3\n")
    assert len(rs) == 2
    assert (rs[0].width, rs[0].height) == (30.0, 8.0)
    with pytest.raises(ParseError) as exc:
        parse_jacquard_rects("1;1;0;2;3\n1;1\n")
    assert exc.value.line == 2


# ----------------------------------------------------------------------
# rasterization
# ----------------------------------------------------------------------
def point_in_convex(poly, x, y):
    """Independent half-plane test against a CCW polygon."""
    n = len(poly)
    ok = np.ones_like(x, dtype=bool)
    for i in range(n):
        (ax, ay), (bx, by) = poly[i], poly[(i + 1) % n]
        ok &= (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= -1e-9
    return ok


def inner_third(r):
    return GraspRectangle(r.center, r.angle, r.width, r.height / 3.0)


def test_rasterize_empty():
    m = rasterize_targets([], 16, 150)
    assert all(np.count_nonzero(a) == 0 for a in m.maps())


@pytest.mark.parametrize("angle", [0.0, 0.4, -1.1, math.pi / 2 - 1e-3])
def test_rasterize_matches_polygon_oracle(angle):
    size = 48
    r = GraspRectangle((23.3, 24.6), angle, 20.0, 15.0)
    m = rasterize_targets([r], size, 40.0)
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    expect = point_in_convex(inner_third(r).corners, xs, ys)
    assert np.array_equal(m.quality == 1.0, expect)
    inside = m.quality == 1.0
    assert np.allclose(m.cos2[inside], math.cos(2 * angle))
    assert np.allclose(m.sin2[inside], math.sin(2 * angle))
    assert np.allclose(m.width[inside], 0.5)
    assert np.count_nonzero(m.cos2[~inside]) == 0


def test_rasterize_axis_aligned_center():
    m = rasterize_targets([GraspRectangle((8, 8), 0.0, 6, 6)], 17, 12)
    inside = m.quality == 1
    assert inside[8, 5:12].all() and not inside[8, 4] and not inside[8, 12]
    assert inside[7:10, 8].all() and not inside[6, 8] and not inside[10, 8]
    assert (m.cos2[inside] == 1).all() and (m.sin2[inside] == 0).all()


def test_rasterize_vertical():
    m = rasterize_targets([GraspRectangle((8, 8), math.pi / 2, 6, 6)], 17, 12)
    inside = m.quality == 1
    assert inside.any()
    assert np.allclose(m.cos2[inside], -1) and np.allclose(m.sin2[inside], 0)


def test_rasterize_invariants_and_overwrite():
    rects = [GraspRectangle((10, 10), 0.3, 12, 12), GraspRectangle((12, 10), -0.9, 400, 12)]
    m = rasterize_targets(rects, 24, 150)
    inside = m.quality == 1
    assert set(np.unique(m.quality)) <= {0.0, 1.0}
    assert np.allclose(m.cos2[inside] ** 2 + m.sin2[inside] ** 2, 1, atol=1e-6)
    assert m.width.min() >= 0 and m.width.max() <= 1
    assert np.allclose(m.sin2[12, 12], math.sin(-1.8))
    with pytest.raises(ValueError):
        rasterize_targets([], 0, 150)


# ----------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------
def scene(seed=5):
    return make_synthetic_scene(seed, 64, 1, 4)


def test_identity_transform_keeps_sample():
    s = scene()
    out = transform_sample(s, 0.0, 1.0, (0.0, 0.0))
    assert np.array_equal(out.image, s.image)
    assert out.rects == s.rects
    out = augment(s, seed=0, rotate=False, zoom=False, translate=False)
    assert np.array_equal(out.image, s.image)


def test_quarter_turn_rotates_rect_angles():
    s = scene()
    out = transform_sample(s, math.pi / 2, 1.0, (0.0, 0.0))
    for a, b in zip(s.rects, out.rects):
        assert angle_difference(b.angle, a.angle + math.pi / 2) < 1e-9
        assert -math.pi / 2 <= b.angle < math.pi / 2


def test_quarter_turn_moves_pixels_with_rects():
    img = np.zeros((1, 33, 33), dtype=np.float32)
    img[0, 16, 26] = 1.0  # x=26, y=16
    s = Sample(img, [GraspRectangle((26.0, 16.0), 0.0, 4, 4)])
    out = transform_sample(s, math.pi / 2, 1.0, (0.0, 0.0))
    r, c = np.unravel_index(np.argmax(out.image[0]), (33, 33))
    assert out.rects[0].center == pytest.approx((float(c), float(r)))


def test_shift_moves_pixels_and_rects():
    img = np.zeros((1, 33, 33), dtype=np.float32)
    img[0, 10, 12] = 1.0
    s = Sample(img, [GraspRectangle((12.0, 10.0), 0.0, 4, 4)])
    out = transform_sample(s, 0.0, 1.0, (3.0, -2.0))
    assert out.image[0, 8, 15] == pytest.approx(1.0)
    assert out.rects[0].center == pytest.approx((15.0, 8.0))


def test_augment_deterministic():
    s = scene()
    a, b = augment(s, 17), augment(s, 17)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.rects == b.rects
    assert augment(s, 18).image.tobytes() != a.image.tobytes()


def test_augment_drops_out_of_view_rects():
    s = Sample(np.zeros((1, 32, 32), np.float32), [GraspRectangle((16, 16), 0, 4, 4)])
    out = transform_sample(s, 0.0, 1.0, (100.0, 0.0))
    assert out.rects == []
    # every retry fails, so the unaugmented sample comes back
    far = Sample(np.zeros((1, 32, 32), np.float32), [GraspRectangle((500, 500), 0, 4, 4)])
    assert augment(far, 0) is far


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_augment_preserves_ground_truth_success(seed):
    out = augment(scene(seed % 50), seed)
    for r in out.rects:
        assert grasp_success(r.to_candidate(), out.rects)


# ----------------------------------------------------------------------
# synthetic scenes
# ----------------------------------------------------------------------
def test_scene_deterministic_and_shapes():
    a, b = make_synthetic_scene(9, 64, 2), make_synthetic_scene(9, 64, 2)
    assert a.image.tobytes() == b.image.tobytes() and a.rects == b.rects
    assert a.image.shape == (4, 64, 64) and a.image.dtype == np.float32
    assert 0.0 <= a.image.min() and a.image.max() <= 1.0
    assert make_synthetic_scene(9, 48, 1, channels=1).image.shape == (1, 48, 48)


def test_scene_preconditions():
    with pytest.raises(ValueError):
        make_synthetic_scene(0, 64, 0)
    with pytest.raises(ValueError):
        make_synthetic_scene(0, 16, 1)
    with pytest.raises(SceneError):
        make_synthetic_scene(0, 32, 40)


def test_object_seed_shares_shapes():
    a = make_synthetic_scene(1, 64, object_seed=7)
    b = make_synthetic_scene(2, 64, object_seed=7)
    assert a.object_id == b.object_id
    assert sorted(r.width for r in a.rects) == pytest.approx(sorted(r.width for r in b.rects))


def test_scene_rects_refit_from_rasterized_region():
    """Second moments of the painted region recover the generator's pose."""
    checked = 0
    for seed in range(40):
        s = make_synthetic_scene(seed, 64, 1)
        if len(s.rects) != 1:
            continue
        (obj,) = s.meta["objects"]
        q = rasterize_targets(s.rects, 64, 150).quality
        ys, xs = np.nonzero(q)
        cx, cy = xs.mean(), ys.mean()
        assert math.hypot(cx - obj["center"][0], cy - obj["center"][1]) < 0.75
        cov = np.cov(np.vstack([xs - cx, ys - cy]))
        evals, evecs = np.linalg.eigh(cov)
        major = evecs[:, -1]
        fitted = math.atan2(major[1], major[0])
        # jaws close across the object's long axis
        assert angle_difference(fitted, obj["angle"] + math.pi / 2) < math.radians(6)
        checked += 1
    assert checked >= 15


@pytest.mark.parametrize("objects,size", [(1, 64), (2, 64), (3, 128)])
def test_oracle_self_consistency(objects, size):
    for seed in range(20):
        s = make_synthetic_scene(seed, size, objects)
        maps = rasterize_targets(s.rects, size, data.default_max_width(size))
        (g,) = synthesize_grasps(maps, 1, max_width_px=data.default_max_width(size))
        assert grasp_success(g, s.rects), seed


def test_synthetic_dataset_roundtrip(tmp_path):
    root = write_synthetic_dataset(tmp_path / "ds", 4, seed=3, size=48)
    assert sorted(p.name for p in root.iterdir())[:2] == ["manifest.txt", "scene_00000.img.hmtt"]
    samples = load_dataset(root)
    assert [s.source_id for s in samples] == [f"scene_{i:05d}" for i in range(4)]
    assert samples[0].object_id == samples[1].object_id != samples[2].object_id
    direct = make_synthetic_scene(3 * 100003, 48, 1, object_seed=3 * 100003)
    assert samples[0].image.tobytes() == direct.image.tobytes()
    for a, b in zip(samples[0].rects, direct.rects):
        assert np.max(np.abs(a.corners - b.corners)) < 1e-5
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


# ----------------------------------------------------------------------
# folds
# ----------------------------------------------------------------------
def check_partition(folds, ids):
    tests = [set(t) for _, t in folds]
    assert set().union(*tests) == set(ids)
    assert sum(len(t) for t in tests) == len(ids)
    for tr, te in folds:
        assert set(tr) | set(te) == set(ids) and not set(tr) & set(te)


def test_image_wise_folds():
    ids = [f"i{j}" for j in range(10)]
    folds = split_folds(ids, 5)
    assert [len(t) for _, t in folds] == [2] * 5
    check_partition(folds, ids)
    assert split_folds(ids, 5, seed=1) != folds
    assert split_folds(ids, 5) == folds


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 1000), st.lists(st.integers(0, 9), min_size=12, max_size=40))
def test_object_wise_folds(k, seed, objs):
    objs = [f"o{o}" for o in objs]
    ids = [f"img{j}" for j in range(len(objs))]
    if len(set(objs)) < k:
        with pytest.raises(ValueError):
            split_folds(ids, k, "object-wise", seed, objs)
        return
    folds = split_folds(ids, k, "object-wise", seed, objs)
    check_partition(folds, ids)
    fold_of = {}
    for f, (_, te) in enumerate(folds):
        for i in te:
            fold_of[i] = f
    for i, o in zip(ids, objs):
        for j, p in zip(ids, objs):
            if o == p:
                assert fold_of[i] == fold_of[j]


def test_fold_errors():
    with pytest.raises(ValueError):
        split_folds(["a", "b"], 1)
    with pytest.raises(ValueError):
        split_folds(["a", "a"], 2)
    with pytest.raises(ValueError):
        split_folds(["a", "b"], 2, "object-wise")
    with pytest.raises(ValueError):
        split_folds(["a", "b"], 2, "scene-wise")
