"""Annotations, supervision maps, augmentation, synthetic scenes and splits."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import affine_transform

from .geometry import (GraspCandidate, GraspRectangle, HeatmapSet, convex_intersection_area,
                       normalize_angle)
from .serialize import load_tensor, save_tensor


class ParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass
class Sample:
    image: np.ndarray  # [C, S, S] float32
    rects: list[GraspRectangle]
    source_id: str = ""
    object_id: str | None = None
    depth_range: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.image.shape[-1]


def default_max_width(size: int) -> float:
    """150 px at 224 px input, scaled linearly with the input size."""
    return 150.0 * size / 224.0


# ----------------------------------------------------------------------
# Parsers
# ----------------------------------------------------------------------
def parse_cornell_rects(text: str) -> list[GraspRectangle]:
    """Cornell/OCID ``cpos`` files: four ``x y`` lines per rectangle.

    Rectangles with a NaN coordinate are skipped.
    """
    rows: list[tuple[int, float, float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"expected two numbers, got {line!r}", lineno)
        try:
            x, y = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"not a pair of decimals: {line!r}", lineno) from None
        rows.append((lineno, x, y))
    if len(rows) % 4:
        raise ParseError(f"{len(rows)} point lines is not a multiple of 4", rows[-1][0] if rows else None)
    rects = []
    for i in range(0, len(rows), 4):
        pts = np.array([(x, y) for _, x, y in rows[i:i + 4]])
        if np.isnan(pts).any():
            continue
        rects.append(GraspRectangle.from_points(pts))
    return rects


def _jacquard_fields(line: str, lineno: int | None = None) -> list[float]:
    parts = line.strip().split(";")
    if len(parts) != 5:
        raise ParseError(f"expected 5 ';'-separated fields, got {len(parts)}: {line.strip()!r}", lineno)
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ParseError(f"non-numeric field in {line.strip()!r}", lineno) from None


def parse_jacquard_line(line: str) -> GraspCandidate:
    """``x;y;theta_deg;opening;jaw_size`` -> candidate (angle in radians)."""
    x, y, theta, opening, _ = _jacquard_fields(line)
    return GraspCandidate(x, y, normalize_angle(math.radians(theta)), opening)


def parse_jacquard_rects(text: str) -> list[GraspRectangle]:
    rects = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        x, y, theta, opening, jaw = _jacquard_fields(line, lineno)
        rects.append(GraspRectangle((x, y), normalize_angle(math.radians(theta)), opening, jaw))
    return rects


def format_cornell_rects(rects: Sequence[GraspRectangle]) -> str:
    return "".join(f"{x:.9g} {y:.9g}\n" for r in rects for x, y in r.corners)


# ----------------------------------------------------------------------
# Supervision
# ----------------------------------------------------------------------
def rasterize_targets(rects: Sequence[GraspRectangle], size: int, max_width_px: float) -> HeatmapSet:
    """Paint the centre third (along the jaw length) of each rectangle.

    Pixel (r, c) is the point (x=c, y=r). Later rectangles overwrite earlier.
    """
    if size <= 0:
        raise ValueError("size must be positive")
    q = np.zeros((size, size), dtype=np.float32)
    cos2 = np.zeros_like(q)
    sin2 = np.zeros_like(q)
    width = np.zeros_like(q)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    for r in rects:
        cx, cy = r.center
        ca, sa = math.cos(r.angle), math.sin(r.angle)
        along = (xs - cx) * ca + (ys - cy) * sa
        across = -(xs - cx) * sa + (ys - cy) * ca
        inside = (np.abs(along) <= r.width / 2.0) & (np.abs(across) <= r.height / 6.0)
        q[inside] = 1.0
        cos2[inside] = math.cos(2 * r.angle)
        sin2[inside] = math.sin(2 * r.angle)
        width[inside] = min(max(r.width / max_width_px, 0.0), 1.0)
    return HeatmapSet(q, cos2, sin2, width)


# ----------------------------------------------------------------------
# Augmentation
# ----------------------------------------------------------------------
def _in_view(rect: GraspRectangle, size: int) -> bool:
    frame = np.array([[0, 0], [size - 1, 0], [size - 1, size - 1], [0, size - 1]], dtype=np.float64)
    return convex_intersection_area(rect.corners, frame) > 0


def transform_sample(sample: Sample, angle: float, scale: float, shift: tuple[float, float]) -> Sample:
    """Rotate by ``angle`` and zoom by ``scale`` about the image centre, then
    translate by ``shift`` = (dx, dy) pixels. Output keeps the input size."""
    if angle == 0.0 and scale == 1.0 and shift == (0.0, 0.0):
        return replace(sample, image=sample.image.copy(), rects=list(sample.rects))
    size = sample.size
    ctr = (size - 1) / 2.0
    ca, sa = math.cos(angle), math.sin(angle)
    fwd = scale * np.array([[ca, -sa], [sa, ca]])  # (x, y)
    centre = np.array([ctr, ctr])
    t = np.asarray(shift, dtype=np.float64)
    offset_xy = centre + t - fwd @ centre
    # affine_transform maps output (row, col) to input (row, col)
    inv_rc = np.array([[ca, sa], [-sa, ca]])[::-1, ::-1] / scale
    t_rc = t[::-1]
    offset_rc = centre - inv_rc @ (centre + t_rc)
    image = np.stack([
        affine_transform(ch, inv_rc, offset=offset_rc, order=1, mode="nearest").astype(np.float32)
        for ch in sample.image
    ])
    rects = [r.transformed(fwd, offset_xy) for r in sample.rects]
    rects = [r for r in rects if _in_view(r, size)]
    return replace(sample, image=image, rects=rects)


def augment(sample: Sample, seed: int, rotate: bool = True, zoom: bool = True,
            translate: bool = True, max_retries: int = 10) -> Sample:
    """Random rotation in [-pi, pi), zoom in [0.75, 1.25], shift up to 10% of S."""
    for attempt in range(max_retries):
        rng = np.random.default_rng(seed + attempt)
        angle = rng.uniform(-math.pi, math.pi) if rotate else 0.0
        scale = rng.uniform(0.75, 1.25) if zoom else 1.0
        lim = 0.1 * sample.size
        shift = (float(rng.uniform(-lim, lim)), float(rng.uniform(-lim, lim))) if translate else (0.0, 0.0)
        out = transform_sample(sample, angle, scale, shift)
        if out.rects:
            return out
    return sample


# ----------------------------------------------------------------------
# Synthetic scenes
# ----------------------------------------------------------------------
class SceneError(RuntimeError):
    pass


def _object_specs(rng: np.random.Generator, n: int, size: int) -> list[dict]:
    specs = []
    for _ in range(n):
        color = rng.uniform(0.35, 1.0, size=3)
        height = rng.uniform(0.03, 0.12)  # meters above the table
        if rng.random() < 0.6:
            length = rng.uniform(0.28, 0.45) * size
            thick = rng.uniform(0.08, 0.13) * size
            specs.append(dict(kind="bar", length=length, thickness=thick, color=color, height=height))
        else:
            a = rng.uniform(0.09, 0.16) * size
            b = a / rng.uniform(1.0, 1.1) if rng.random() < 0.5 else a / rng.uniform(1.6, 2.2)
            specs.append(dict(kind="ellipse", a=a, b=b, color=color, height=height))
    return specs


def _radius(spec: dict) -> float:
    if spec["kind"] == "bar":
        return 0.5 * math.hypot(spec["length"], spec["thickness"])
    return spec["a"]


def _object_mask(spec: dict, cx: float, cy: float, angle: float, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    ca, sa = math.cos(angle), math.sin(angle)
    along = (xs - cx) * ca + (ys - cy) * sa
    across = -(xs - cx) * sa + (ys - cy) * ca
    if spec["kind"] == "bar":
        return (np.abs(along) <= spec["length"] / 2) & (np.abs(across) <= spec["thickness"] / 2)
    return (along / spec["a"]) ** 2 + (across / spec["b"]) ** 2 <= 1.0


def _object_grasps(spec: dict, cx: float, cy: float, angle: float) -> list[GraspRectangle]:
    """Ground truth: jaws close across the minor axis (both axes for near-round ellipses)."""
    across = normalize_angle(angle + math.pi / 2)
    if spec["kind"] == "bar":
        return [GraspRectangle((cx, cy), across, 1.5 * spec["thickness"], 0.5 * spec["length"])]
    a, b = spec["a"], spec["b"]
    if a / b < 1.15:
        return [GraspRectangle((cx, cy), normalize_angle(angle), 2.4 * a, b),
                GraspRectangle((cx, cy), across, 2.4 * b, a)]
    return [GraspRectangle((cx, cy), across, 2.6 * b, a)]


def make_synthetic_scene(seed: int, size: int = 64, n_objects: int = 1, channels: int = 4,
                         object_seed: int | None = None, max_tries: int = 1000) -> Sample:
    """Render bars and ellipses on a tilted table plane.

    ``object_seed`` fixes object shapes and colours (poses still follow
    ``seed``), so scenes sharing it show the same objects.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    if channels not in (1, 3, 4):
        raise ValueError("channels must be 1, 3 or 4")
    shape_rng = np.random.default_rng(seed if object_seed is None else object_seed)
    specs = _object_specs(shape_rng, n_objects, size)
    rng = np.random.default_rng(seed)
    poses: list[tuple[float, float, float]] = []
    margin = 2.0
    tries = 0
    for spec in specs:
        rad = _radius(spec)
        while True:
            tries += 1
            if tries > max_tries:
                raise SceneError(f"could not place {n_objects} objects in a {size}px scene")
            cx, cy = rng.uniform(rad + margin, size - 1 - rad - margin, size=2)
            if all(math.hypot(cx - px, cy - py) > rad + _radius(s) + margin
                   for (px, py, _), s in zip(poses, specs)):
                break
        poses.append((float(cx), float(cy), float(rng.uniform(-math.pi / 2, math.pi / 2))))

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    tilt = rng.uniform(-0.05, 0.05, size=2)
    depth = 0.7 + (tilt[0] * (xs - size / 2) + tilt[1] * (ys - size / 2)) / size
    bg = rng.uniform(0.05, 0.25, size=3)
    rgb = np.broadcast_to(bg[:, None, None], (3, size, size)).copy()
    rects: list[GraspRectangle] = []
    objects = []
    for spec, (cx, cy, ang) in zip(specs, poses):
        mask = _object_mask(spec, cx, cy, ang, size)
        rgb[:, mask] = spec["color"][:, None]
        depth[mask] = 0.7 - spec["height"]
        rects.extend(_object_grasps(spec, cx, cy, ang))
        objects.append(dict(kind=spec["kind"], center=(cx, cy), angle=ang))
    dmin, dmax = float(depth.min()), float(depth.max())
    dnorm = (depth - dmin) / (dmax - dmin) if dmax > dmin else np.zeros_like(depth)
    planes = {1: [dnorm], 3: list(rgb), 4: list(rgb) + [dnorm]}[channels]
    image = np.stack(planes).astype(np.float32)
    oid = f"obj{object_seed}" if object_seed is not None else f"scene{seed}"
    return Sample(image, rects, source_id=f"synthetic-{seed}", object_id=oid,
                  depth_range=(dmin, dmax), meta={"objects": objects})


# ----------------------------------------------------------------------
# Dataset directories
# ----------------------------------------------------------------------
MANIFEST = "manifest.txt"


def write_synthetic_dataset(out: str | Path, count: int, seed: int = 0, size: int = 64,
                            objects: int = 1, channels: int = 4, images_per_object: int = 2) -> Path:
    """Write ``scene_%05d.img.hmtt`` / ``scene_%05d.pos.txt`` pairs and a manifest."""
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# synthetic size={size} objects={objects} channels={channels} seed={seed}",
             "# index scene_seed object_id"]
    for i in range(count):
        scene_seed = seed * 100003 + i
        obj_seed = seed * 100003 + i // images_per_object
        sample = make_synthetic_scene(scene_seed, size, objects, channels, object_seed=obj_seed)
        save_tensor(out / f"scene_{i:05d}.img.hmtt", sample.image)
        (out / f"scene_{i:05d}.pos.txt").write_text(format_cornell_rects(sample.rects))
        lines.append(f"{i} {scene_seed} {sample.object_id}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    return out


def load_synthetic_dataset(root: str | Path) -> list[Sample]:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest} not found")
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"manifest entry needs 3 fields: {line!r}", lineno)
        idx = int(parts[0])
        image = load_tensor(root / f"scene_{idx:05d}.img.hmtt").astype(np.float32)
        rects = parse_cornell_rects((root / f"scene_{idx:05d}.pos.txt").read_text())
        samples.append(Sample(image, rects, source_id=f"scene_{idx:05d}", object_id=parts[2]))
    return samples


_CORNELL_RE = re.compile(r"pcd(\d{4})cpos\.txt$")


def _read_object_map(root: Path) -> dict[str, str]:
    """Optional ``z.txt``: lines starting with ``<image number> <object id>``."""
    zfile = root / "z.txt"
    if not zfile.is_file():
        return {}
    out = {}
    for line in zfile.read_text().splitlines():
        parts = line.split()
        if len(parts) >= 2:
            out[f"{int(float(parts[0])):04d}"] = parts[1]
    return out


def load_cornell(root: str | Path, size: int = 224, channels: int = 4) -> list[Sample]:
    """Load ``pcdXXXXr.png`` + ``pcdXXXXcpos.txt`` (+ ``pcdXXXXd.tiff`` depth).

    Images are centre-cropped to a square and resized to ``size``; rectangles
    follow the same map. Searches ``root`` recursively.
    """
    from PIL import Image

    root = Path(root)
    objmap = _read_object_map(root)
    samples = []
    for pos in sorted(root.rglob("pcd*cpos.txt")):
        m = _CORNELL_RE.search(pos.name)
        if not m:
            continue
        num = m.group(1)
        rects = parse_cornell_rects(pos.read_text())
        if not rects:
            continue
        planes = []
        if channels in (3, 4):
            rgb = np.asarray(Image.open(pos.with_name(f"pcd{num}r.png")).convert("RGB"), dtype=np.float32) / 255.0
            planes.extend(np.moveaxis(rgb, -1, 0))
        depth_range = None
        if channels in (1, 4):
            dpath = pos.with_name(f"pcd{num}d.tiff")
            if not dpath.is_file():
                raise FileNotFoundError(f"{dpath} needed for depth input")
            d = np.asarray(Image.open(dpath), dtype=np.float64)
            d = np.where(np.isfinite(d), d, np.nanmax(np.where(np.isfinite(d), d, np.nan)))
            lo, hi = float(d.min()), float(d.max())
            depth_range = (lo, hi)
            planes.append(((d - lo) / (hi - lo) if hi > lo else np.zeros_like(d)).astype(np.float32))
        h, w = planes[0].shape
        side = min(h, w)
        top, left = (h - side) // 2, (w - side) // 2
        k = size / side
        resized = [np.asarray(Image.fromarray(p[top:top + side, left:left + side]).resize(
            (size, size), Image.BILINEAR), dtype=np.float32) for p in planes]
        mat = np.eye(2) * k
        off = np.array([-left * k, -top * k])
        out_rects = [r.transformed(mat, off) for r in rects]
        out_rects = [r for r in out_rects if _in_view(r, size)]
        if not out_rects:
            continue
        samples.append(Sample(np.stack(resized), out_rects, source_id=f"pcd{num}",
                              object_id=objmap.get(num), depth_range=depth_range))
    return samples


def load_dataset(root: str | Path, size: int | None = None, channels: int | None = None) -> list[Sample]:
    """Synthetic directory (has a manifest) or a Cornell/OCID-style tree."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    if (root / MANIFEST).is_file():
        return load_synthetic_dataset(root)
    return load_cornell(root, size or 224, channels or 4)


# ----------------------------------------------------------------------
# Splits
# ----------------------------------------------------------------------
def split_folds(ids: Sequence[str], k: int, mode: str = "image-wise", seed: int = 0,
                object_ids: Sequence[str | None] | None = None) -> list[tuple[list[str], list[str]]]:
    """k (train, test) partitions of ``ids``.

    ``object-wise`` keeps every image of an object inside a single fold.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    rng = np.random.default_rng(seed)
    if mode == "image-wise":
        order = rng.permutation(len(ids))
        groups = [[ids[i] for i in chunk] for chunk in np.array_split(order, k)]
    elif mode == "object-wise":
        if object_ids is None or len(object_ids) != len(ids) or any(o is None for o in object_ids):
            raise ValueError("object-wise splits need an object id for every image")
        objects = sorted(set(object_ids))
        if len(objects) < k:
            raise ValueError(f"{len(objects)} distinct objects cannot fill {k} folds")
        perm = rng.permutation(len(objects))
        fold_of = {}
        for f, chunk in enumerate(np.array_split(perm, k)):
            for j in chunk:
                fold_of[objects[j]] = f
        groups = [[] for _ in range(k)]
        for i, o in zip(ids, object_ids):
            groups[fold_of[o]].append(i)
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return [([i for g in groups[:f] + groups[f + 1:] for i in g], list(groups[f])) for f in range(k)]
