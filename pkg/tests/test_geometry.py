import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmtgrasp.geometry import (
    CameraIntrinsics,
    GraspCandidate,
    GraspRectangle,
    HeatmapSet,
    angle_difference,
    convex_intersection_area,
    deproject,
    grasp_success,
    jaccard,
    match_grasp,
    normalize_angle,
    polygon_area,
    read_grasps,
    rect_from_candidate,
    synthesize_grasps,
    write_grasps,
)

deg = math.radians


def inside(rect: GraspRectangle, pts: np.ndarray) -> np.ndarray:
    """Point-in-oriented-rectangle test in the rectangle's own frame."""
    c = np.asarray(rect.center)
    d = np.array([math.cos(rect.angle), math.sin(rect.angle)])
    n = np.array([-d[1], d[0]])
    rel = pts - c
    return (np.abs(rel @ d) <= rect.width / 2) & (np.abs(rel @ n) <= rect.height / 2)


def mc_jaccard(a, b, n, rng):
    allc = np.vstack([a.corners, b.corners])
    lo, hi = allc.min(axis=0), allc.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 2))
    ia, ib = inside(a, pts), inside(b, pts)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def random_rect(rng, around=(50.0, 50.0), spread=10.0):
    return GraspRectangle(
        (around[0] + rng.uniform(-spread, spread), around[1] + rng.uniform(-spread, spread)),
        rng.uniform(-math.pi / 2, math.pi / 2),
        rng.uniform(5, 40),
        rng.uniform(5, 30),
    )


def axis_rect(cx, cy, w, h, angle=0.0):
    return GraspRectangle((cx, cy), angle, w, h)


# ----------------------------------------------------------------------
# rectangles
# ----------------------------------------------------------------------
def test_axis_aligned_corners():
    r = rect_from_candidate(GraspCandidate(0, 0, 0.0, 4.0), 2.0)
    got = {tuple(np.round(p, 12)) for p in r.corners}
    assert got == {(2.0, 1.0), (2.0, -1.0), (-2.0, 1.0), (-2.0, -1.0)}


def test_quarter_turn_swaps_extents():
    r = rect_from_candidate(GraspCandidate(0, 0, math.pi / 2, 4.0), 2.0)
    xs, ys = r.corners[:, 0], r.corners[:, 1]
    assert np.allclose([xs.max(), ys.max()], [1.0, 2.0])


def test_diagonal_degenerate_rectangle_is_segment():
    r = rect_from_candidate(GraspCandidate(0, 0, math.pi / 4, 2 * math.sqrt(2)), 0.0)
    pts = {tuple(np.round(p, 12) + 0.0) for p in r.corners}
    assert pts == {(-1.0, -1.0), (1.0, 1.0)}


def test_corners_are_ccw():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert polygon_area(random_rect(rng).corners) > 0


def test_rect_roundtrip_from_points():
    rng = np.random.default_rng(1)
    for _ in range(50):
        r = random_rect(rng)
        back = GraspRectangle.from_points(r.corners)
        assert np.max(np.abs(back.corners - r.corners)) < 1e-9


def test_negative_height_rejected():
    with pytest.raises(ValueError):
        rect_from_candidate(GraspCandidate(0, 0, 0.0, 4.0), -1.0)


def test_candidate_validation():
    with pytest.raises(ValueError):
        GraspCandidate(0, 0, 2.0, 1.0)
    with pytest.raises(ValueError):
        GraspCandidate(0, 0, 0.0, -1.0)


def test_normalize_angle():
    assert normalize_angle(math.pi / 2) == pytest.approx(-math.pi / 2)
    assert normalize_angle(math.pi) == pytest.approx(0.0)
    assert normalize_angle(deg(100)) == pytest.approx(deg(-80))


# ----------------------------------------------------------------------
# intersection and jaccard
# ----------------------------------------------------------------------
SQUARE = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)


def test_intersection_examples():
    assert convex_intersection_area(SQUARE, SQUARE) == pytest.approx(1.0)
    assert convex_intersection_area(SQUARE, SQUARE + 5) == 0.0
    assert convex_intersection_area(SQUARE, SQUARE + [0.5, 0]) == pytest.approx(0.5)


def test_intersection_rejects_nonconvex():
    dart = np.array([[0, 0], [2, 0], [1, 0.5], [1, 2]], dtype=float)
    with pytest.raises(ValueError):
        convex_intersection_area(dart, SQUARE)
    with pytest.raises(ValueError):
        convex_intersection_area(SQUARE[::-1], SQUARE)


def test_jaccard_examples():
    a = axis_rect(5, 5, 10, 10)
    assert jaccard(a, a) == pytest.approx(1.0)
    assert jaccard(a, axis_rect(10, 5, 10, 10)) == pytest.approx(1 / 3)
    z = axis_rect(0, 0, 0, 0)
    assert jaccard(z, z) == 0.0


def test_jaccard_matches_monte_carlo():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(50):
        a, b = random_rect(rng), random_rect(rng)
        worst = max(worst, abs(jaccard(a, b) - mc_jaccard(a, b, 10**6, rng)))
    assert worst < 0.01


rects = st.builds(
    GraspRectangle,
    st.tuples(st.floats(-20, 20), st.floats(-20, 20)),
    st.floats(-math.pi / 2, math.pi / 2),
    st.floats(0.5, 30),
    st.floats(0.5, 30),
)


@settings(max_examples=200, deadline=None)
@given(rects, rects)
def test_jaccard_properties(a, b):
    j = jaccard(a, b)
    assert 0.0 <= j <= 1.0
    assert j == pytest.approx(jaccard(b, a), abs=1e-9)
    inter = convex_intersection_area(a.corners, b.corners)
    assert inter <= min(a.area, b.area) + 1e-9


@settings(max_examples=100, deadline=None)
@given(rects)
def test_jaccard_self_is_one(a):
    assert jaccard(a, GraspRectangle(a.center, a.angle, a.width, a.height)) == pytest.approx(1.0)


# ----------------------------------------------------------------------
# angles and the success metric
# ----------------------------------------------------------------------
def test_angle_difference_examples():
    assert angle_difference(0.3, 0.3) == 0.0
    assert angle_difference(deg(85), deg(-85)) == pytest.approx(deg(10))
    assert angle_difference(deg(20), deg(45)) == pytest.approx(deg(25))


angles = st.floats(-10, 10)


@given(angles, angles, st.integers(-3, 3))
def test_angle_difference_properties(a, b, k):
    d = angle_difference(a, b)
    assert 0.0 <= d <= math.pi / 2 + 1e-12
    assert d == pytest.approx(angle_difference(b, a), abs=1e-9)
    assert d == pytest.approx(angle_difference(a + k * math.pi, b), abs=1e-9)


# Ground truth for the truth table: 40 wide, 20 tall, matching the w/2 height
# the metric assigns to a predicted grasp of width 40.
GT = axis_rect(50, 50, 40, 20)


def shift_for_iou(iou):
    # equal axis-aligned boxes shifted along x: iou = (40 - s) / (40 + s)
    return 40 * (1 - iou) / (1 + iou)


TRUTH_TABLE = [
    ("identical", GraspCandidate(50, 50, 0.0, 40), [GT], True, "ok"),
    ("iou 0.2", GraspCandidate(50 + shift_for_iou(0.2), 50, 0.0, 40), [GT], False, "iou"),
    ("iou 0.3", GraspCandidate(50 + shift_for_iou(0.3), 50, 0.0, 40), [GT], True, "ok"),
    ("angle 25", GraspCandidate(50, 50, deg(25), 40), [GT], True, "ok"),
    ("angle 45", GraspCandidate(50, 50, deg(45), 40), [GT], False, "angle"),
    ("angle 30 is not less than 30", GraspCandidate(50, 50, deg(30), 40), [GT], False, "angle"),
    ("wraparound 10", GraspCandidate(50, 50, deg(-85), 40), [axis_rect(50, 50, 40, 20, deg(85))], True, "ok"),
    ("second gt matches", GraspCandidate(50, 50, 0.0, 40),
     [axis_rect(50, 50, 40, 20, deg(60)), GT], True, "ok"),
    ("gates split across gts", GraspCandidate(50, 50, 0.0, 40),
     [axis_rect(150, 50, 40, 20), axis_rect(50, 50, 40, 20, deg(60))], False, "iou"),
    ("zero width", GraspCandidate(50, 50, 0.0, 0.0), [GT], False, "iou"),
]


@pytest.mark.parametrize("name,pred,gt,ok,why", TRUTH_TABLE, ids=[t[0] for t in TRUTH_TABLE])
def test_truth_table(name, pred, gt, ok, why):
    assert grasp_success(pred, gt) is ok
    assert match_grasp(pred, gt) == (ok, why)


def test_truth_table_ious_are_as_constructed():
    for iou in (0.2, 0.3):
        pred = rect_from_candidate(GraspCandidate(50 + shift_for_iou(iou), 50, 0.0, 40), 20)
        assert jaccard(pred, GT) == pytest.approx(iou, abs=1e-12)


def test_success_needs_ground_truth():
    with pytest.raises(ValueError):
        grasp_success(GraspCandidate(0, 0, 0, 1), [])


@settings(max_examples=100, deadline=None)
@given(st.floats(30, 70), st.floats(30, 70), st.floats(-1.5, 1.5), st.floats(5, 60))
def test_success_monotone_in_ground_truth(u, v, phi, w):
    pred = GraspCandidate(u, v, phi, w)
    gt = [GT, axis_rect(40, 60, 30, 10, deg(70))]
    base = grasp_success(pred, gt)
    # rectangles far away can never help or hurt
    worse = gt + [axis_rect(500, 500, 10, 10, phi)]
    assert grasp_success(pred, worse) == base
    assert grasp_success(pred, gt[:1]) <= base


# ----------------------------------------------------------------------
# synthesis
# ----------------------------------------------------------------------
def maps_from_q(q, cos2=1.0, sin2=0.0, width=0.5):
    return HeatmapSet(q, np.full_like(q, cos2), np.full_like(q, sin2), np.full_like(q, width))


def test_synthesize_impulse():
    q = np.zeros((32, 32))
    q[12, 10] = 1.0
    (g,) = synthesize_grasps(maps_from_q(q), k=3, smooth_sigma=0, max_width_px=150)
    assert (g.u, g.v, g.phi, g.width, g.quality) == (10.0, 12.0, 0.0, 75.0, 1.0)


def test_synthesize_tie_break_and_spacing():
    q = np.zeros((32, 32))
    q[5, 20] = q[8, 3] = 1.0
    out = synthesize_grasps(maps_from_q(q), k=2, smooth_sigma=0, min_peak_dist=50)
    assert [(g.u, g.v) for g in out] == [(20.0, 5.0)]
    out = synthesize_grasps(maps_from_q(q), k=2, smooth_sigma=0, min_peak_dist=3)
    assert [(g.u, g.v) for g in out] == [(20.0, 5.0), (3.0, 8.0)]


def test_synthesize_plateau_centre():
    q = np.zeros((15, 15))
    q[7, 5:8] = 1.0
    (g,) = synthesize_grasps(maps_from_q(q), k=1, smooth_sigma=1.0)
    assert (g.u, g.v) == (6.0, 7.0)


def test_synthesize_all_zero_returns_origin():
    (g,) = synthesize_grasps(maps_from_q(np.zeros((8, 8))), k=4)
    assert (g.u, g.v, g.quality) == (0.0, 0.0, 0.0)


def test_synthesize_decodes_angle_and_clamps():
    q = np.zeros((16, 16))
    q[8, 8] = 1.0
    phi = deg(-70)
    (g,) = synthesize_grasps(maps_from_q(q, math.cos(2 * phi), math.sin(2 * phi), 1.7),
                             smooth_sigma=0, max_width_px=100)
    assert g.phi == pytest.approx(phi)
    assert g.width == 100.0


def test_synthesize_rejects_bad_k():
    with pytest.raises(ValueError):
        synthesize_grasps(maps_from_q(np.zeros((4, 4))), k=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0, 2))
def test_synthesize_properties(seed, k, sigma):
    rng = np.random.default_rng(seed)
    m = HeatmapSet(rng.uniform(-0.2, 1.2, (20, 20)), rng.normal(size=(20, 20)),
                   rng.normal(size=(20, 20)), rng.uniform(0, 1, (20, 20)))
    out = synthesize_grasps(m, k=k, smooth_sigma=sigma)
    assert 1 <= len(out) <= k
    qs = [g.quality for g in out]
    assert qs == sorted(qs, reverse=True)
    assert all(-math.pi / 2 <= g.phi <= math.pi / 2 for g in out)


def test_grasp_text_roundtrip():
    gs = [GraspCandidate(1.5, 2.25, -0.5, 30.0, 0.75), GraspCandidate(0, 0, 1.2345678912, 1e-3, 0.0)]
    back = read_grasps(write_grasps(gs))
    for a, b in zip(gs, back):
        for f in ("u", "v", "phi", "width", "quality"):
            assert getattr(b, f) == pytest.approx(getattr(a, f), rel=1e-8)
    with pytest.raises(ValueError):
        read_grasps("1 2 3\n")


# ----------------------------------------------------------------------
# camera
# ----------------------------------------------------------------------
def test_deproject():
    k = CameraIntrinsics(500, 500, 112, 112)
    assert deproject(112, 112, 0.7, k) == (0.0, 0.0, 0.7)
    x, y, z = deproject(212, 112, 0.5, k)
    assert (x, y, z) == pytest.approx((0.1, 0.0, 0.5))
    x2, y2, _ = deproject(212, 112, 1.0, k)
    assert (x2, y2) == pytest.approx((2 * x, 2 * y))
    with pytest.raises(ValueError):
        deproject(0, 0, 0.0, k)
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 0, 0)
