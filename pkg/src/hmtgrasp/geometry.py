"""Grasp tuples, oriented rectangles, rectangle metrics and heatmap decoding.

Coordinates are pixels with ``u``/``x`` along columns and ``v``/``y`` along
rows. An angle ``phi`` points the jaw-opening axis along ``(cos phi, sin phi)``
in (x, y); grasps are pi-periodic, so angles live in [-pi/2, pi/2].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

HALF_PI = math.pi / 2


def normalize_angle(phi: float) -> float:
    """Wrap into [-pi/2, pi/2) modulo pi."""
    return (phi + HALF_PI) % math.pi - HALF_PI


@dataclass
class HeatmapSet:
    """Quality, cos(2phi), sin(2phi) and normalized width maps.

    Holds either numpy arrays or tensors; leading batch axes are allowed.
    """

    quality: object
    cos2: object
    sin2: object
    width: object

    def maps(self) -> tuple:
        return self.quality, self.cos2, self.sin2, self.width

    def numpy(self) -> "HeatmapSet":
        return HeatmapSet(*(getattr(m, "data", m) for m in self.maps()))

    def image(self, i: int) -> "HeatmapSet":
        return HeatmapSet(*(np.asarray(getattr(m, "data", m))[i] for m in self.maps()))


@dataclass
class GraspCandidate:
    u: float
    v: float
    phi: float
    width: float
    quality: float = 1.0

    def __post_init__(self):
        if not -HALF_PI - 1e-12 <= self.phi <= HALF_PI + 1e-12:
            raise ValueError(f"phi {self.phi} outside [-pi/2, pi/2]")
        if self.width < 0:
            raise ValueError(f"negative width {self.width}")

    @property
    def center(self) -> tuple[float, float]:
        return self.u, self.v

    def to_line(self) -> str:
        return " ".join(f"{val:.9g}" for val in (self.u, self.v, self.phi, self.width, self.quality))

    @classmethod
    def from_line(cls, line: str) -> "GraspCandidate":
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"grasp line needs 5 fields, got {len(parts)}: {line!r}")
        u, v, phi, w, q = (float(p) for p in parts)
        return cls(u, v, phi, w, q)


def write_grasps(grasps: Iterable[GraspCandidate]) -> str:
    return "".join(g.to_line() + "\n" for g in grasps)


def read_grasps(text: str) -> list[GraspCandidate]:
    return [GraspCandidate.from_line(ln) for ln in text.splitlines() if ln.strip()]


@dataclass
class GraspRectangle:
    """Oriented rectangle: ``width`` is the jaw opening (along ``angle``),
    ``height`` the jaw length."""

    center: tuple[float, float]
    angle: float
    width: float
    height: float
    _corners: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def corners(self) -> np.ndarray:
        """4x2 corner array, counter-clockwise (positive signed area)."""
        if self._corners is None:
            cx, cy = self.center
            d = np.array([math.cos(self.angle), math.sin(self.angle)])
            n = np.array([-d[1], d[0]])
            a, b = self.width / 2.0, self.height / 2.0
            c = np.array([cx, cy])
            self._corners = np.stack([c - a * d - b * n, c + a * d - b * n,
                                      c + a * d + b * n, c - a * d + b * n])
        return self._corners

    @property
    def area(self) -> float:
        return self.width * self.height

    @classmethod
    def from_points(cls, pts: Sequence[Sequence[float]]) -> "GraspRectangle":
        """Fit from four corners in drawing order; edge p0->p1 is the jaw opening."""
        p = np.asarray(pts, dtype=np.float64)
        if p.shape != (4, 2):
            raise ValueError(f"expected 4 points, got shape {p.shape}")
        e1, e2 = p[1] - p[0], p[2] - p[1]
        angle = normalize_angle(math.atan2(e1[1], e1[0]))
        cx, cy = p.mean(axis=0)
        return cls((float(cx), float(cy)), angle, float(np.hypot(*e1)), float(np.hypot(*e2)))

    def to_candidate(self, quality: float = 1.0) -> GraspCandidate:
        return GraspCandidate(self.center[0], self.center[1], normalize_angle(self.angle), self.width, quality)

    def transformed(self, matrix: np.ndarray, offset: np.ndarray) -> "GraspRectangle":
        """Apply ``p -> matrix @ p + offset`` to the corners (a similarity map)."""
        pts = self.corners @ np.asarray(matrix).T + np.asarray(offset)
        return GraspRectangle.from_points(pts)


def rect_from_candidate(g: GraspCandidate, height: float) -> GraspRectangle:
    if height < 0:
        raise ValueError("height must be non-negative")
    return GraspRectangle((g.u, g.v), g.phi, g.width, height)


# ----------------------------------------------------------------------
# Polygon clipping
# ----------------------------------------------------------------------
def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _check_convex_ccw(poly: np.ndarray, name: str) -> None:
    n = len(poly)
    for i in range(n):
        if _cross(poly[i], poly[(i + 1) % n], poly[(i + 2) % n]) < -1e-9:
            raise ValueError(f"polygon {name} is not convex and counter-clockwise")


def convex_intersection_area(p: np.ndarray, q: np.ndarray) -> float:
    """Area of the intersection of two convex CCW polygons.

    Sutherland-Hodgman: clip ``p`` by each edge of ``q`` in turn.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_convex_ccw(p, "p")
    _check_convex_ccw(q, "q")
    out = [tuple(v) for v in p]
    m = len(q)
    for i in range(m):
        if not out:
            break
        a, b = q[i], q[(i + 1) % m]
        if a[0] == b[0] and a[1] == b[1]:
            continue
        inp, out = out, []
        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            cin = _cross(a, b, cur) >= 0
            pin = _cross(a, b, prev) >= 0
            if cin:
                if not pin:
                    out.append(_edge_hit(prev, cur, a, b))
                out.append(cur)
            elif pin:
                out.append(_edge_hit(prev, cur, a, b))
    if len(out) < 3:
        return 0.0
    return max(polygon_area(np.array(out)), 0.0)


def _edge_hit(s, e, a, b):
    """Intersection of segment s-e with the infinite line through a-b."""
    ds = _cross(a, b, s)
    de = _cross(a, b, e)
    t = ds / (ds - de)
    return (s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1]))


def jaccard(a: GraspRectangle, b: GraspRectangle) -> float:
    inter = convex_intersection_area(a.corners, b.corners)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def angle_difference(phi1: float, phi2: float) -> float:
    """Smallest |phi1 - phi2 + k*pi| over integers k; lies in [0, pi/2]."""
    d = (phi1 - phi2) % math.pi
    return min(d, math.pi - d)


def grasp_success(pred: GraspCandidate, gt: Sequence[GraspRectangle],
                  iou_thresh: float = 0.25, angle_thresh: float = math.radians(30.0)) -> bool:
    """Rectangle metric: some ground truth within the angle gate AND above the IoU gate."""
    return match_grasp(pred, gt, iou_thresh, angle_thresh)[0]


def match_grasp(pred: GraspCandidate, gt: Sequence[GraspRectangle],
                iou_thresh: float = 0.25, angle_thresh: float = math.radians(30.0)) -> tuple[bool, str]:
    """Like :func:`grasp_success` but also names the failing gate.

    The reason is ``"ok"``, ``"angle"`` (no ground truth passes the angle
    gate) or ``"iou"`` (some pass the angle gate, none overlap enough).
    """
    if not gt:
        raise ValueError("ground-truth list is empty")
    rect = rect_from_candidate(pred, pred.width / 2.0)
    any_angle = False
    for g in gt:
        if angle_difference(pred.phi, g.angle) < angle_thresh:
            any_angle = True
            if jaccard(rect, g) > iou_thresh:
                return True, "ok"
    return False, "iou" if any_angle else "angle"


# ----------------------------------------------------------------------
# Synthesis
# ----------------------------------------------------------------------
def _local_max_mask(a: np.ndarray) -> np.ndarray:
    padded = np.pad(a, 1, mode="constant", constant_values=-np.inf)
    h, w = a.shape
    mask = np.ones_like(a, dtype=bool)
    for di in (0, 1, 2):
        for dj in (0, 1, 2):
            if di == 1 and dj == 1:
                continue
            mask &= a >= padded[di:di + h, dj:dj + w]
    return mask


def synthesize_grasps(maps: HeatmapSet, k: int = 1, smooth_sigma: float = 2.0,
                      min_peak_dist: float = 5.0, max_width_px: float = 150.0) -> list[GraspCandidate]:
    """Decode up to ``k`` grasps from single-image maps, best first.

    Peaks are positive local maxima of the smoothed quality map, picked
    greedily by value and kept at least ``min_peak_dist`` apart; ties go to
    the smallest row-major index. With no positive peak the global argmax is
    returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    q_raw, cos2, sin2, width = (np.asarray(getattr(m, "data", m), dtype=np.float64) for m in maps.maps())
    if q_raw.ndim != 2:
        raise ValueError(f"synthesize_grasps expects [H, W] maps, got {q_raw.shape}")
    q = gaussian_filter(q_raw, smooth_sigma, mode="nearest") if smooth_sigma > 0 else q_raw
    flat = q.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    cand = _local_max_mask(q).reshape(-1) & (flat > 0)
    w_img = q.shape[1]
    picks: list[int] = []
    for idx in order:
        if not cand[idx]:
            continue
        r, c = divmod(int(idx), w_img)
        if all((r - pr) ** 2 + (c - pc) ** 2 >= min_peak_dist ** 2
               for pr, pc in (divmod(p, w_img) for p in picks)):
            picks.append(int(idx))
            if len(picks) == k:
                break
    if not picks:
        picks = [int(order[0])]
    out = []
    for idx in picks:
        r, c = divmod(idx, w_img)
        phi = normalize_angle(0.5 * math.atan2(sin2[r, c], cos2[r, c]))
        w = float(np.clip(width[r, c], 0.0, 1.0)) * max_width_px
        quality = float(np.clip(q[r, c], 0.0, 1.0))
        out.append(GraspCandidate(float(c), float(r), phi, w, quality))
    return out


# ----------------------------------------------------------------------
# Camera
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")


def deproject(u: float, v: float, z: float, k: CameraIntrinsics) -> tuple[float, float, float]:
    """Pinhole back-projection of pixel (u, v) at depth z (meters)."""
    if z <= 0:
        raise ValueError("depth must be positive")
    return (u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z
