"""Deterministic labelled LiDAR scenes built from geometric primitives.

A virtual spinning sensor at the origin casts one ray per beam/column pair
against a flat ground disk (class 0) and a set of boxes and upright cylinders
(classes 1..n_classes-1). Each object class has a fixed shape, aspect ratio and
intensity level so classes stay consistent across scenes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .pointcloud_io import PointCloud, write_labels, write_scan

# (shape, width, length, height) per object class, as multiples of the sampled size.
# Cycled when n_classes - 1 exceeds the table.
_CLASS_TABLE = (
    ("box", 1.0, 2.2, 0.75),  # low wide box
    ("cylinder", 0.3, 0.3, 2.0),  # pole
    ("box", 0.9, 0.9, 2.0),  # tall block
    ("cylinder", 0.8, 0.8, 0.6),  # squat drum
    ("box", 0.35, 1.8, 0.9),  # wall segment
    ("cylinder", 0.35, 0.35, 1.2),  # post
)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_classes: int = 5
    points_per_class: tuple[int, int] = (1, 1_000_000)
    ground_extent: float = 25.0
    object_count: tuple[int, int] = (4, 8)
    object_size: tuple[float, float] = (0.8, 2.0)
    noise_sigma: float = 0.02
    ground_z: float = -1.73
    beams: int = 64
    columns: int = 1024
    fov_up: float = 3.0
    fov_down: float = -25.0
    intensity_sigma: float = 0.12
    min_distance: float = 4.0
    max_attempts: int = 50

    def validate(self, max_classes: int | None = None) -> None:
        lo, hi = self.points_per_class
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if max_classes is not None and self.n_classes > max_classes:
            raise ValueError(f"n_classes={self.n_classes} exceeds configured K={max_classes}")
        if not 1 <= lo <= hi:
            raise ValueError(f"points_per_class range {self.points_per_class} is empty")
        if not 0 <= self.object_count[0] <= self.object_count[1]:
            raise ValueError(f"object_count range {self.object_count} is empty")
        if self.object_count[1] < self.n_classes - 1:
            raise ValueError(
                f"{self.n_classes - 1} object classes cannot appear with at most "
                f"{self.object_count[1]} objects"
            )
        if not 0 < self.object_size[0] <= self.object_size[1]:
            raise ValueError(f"object_size range {self.object_size} is empty")
        if self.ground_extent <= self.min_distance:
            raise ValueError("ground_extent leaves no area to place objects")
        if self.noise_sigma < 0 or self.intensity_sigma < 0:
            raise ValueError("noise levels must be nonnegative")
        if self.beams < 1 or self.columns < 1 or not self.fov_up > self.fov_down:
            raise ValueError("invalid beam pattern")
        if self.ground_z >= 0:
            raise ValueError("ground must lie below the sensor (ground_z < 0)")


@dataclass
class _Solid:
    cls: int
    shape: str
    cx: float
    cy: float
    yaw: float
    half_w: float
    half_l: float
    height: float
    base: float

    @property
    def radius(self):
        return float(np.hypot(self.half_w, self.half_l))


def class_intensity(cls: int, n_classes: int) -> float:
    """Mean return intensity of a class."""
    return 0.15 + 0.7 * cls / max(n_classes - 1, 1)


def _place_objects(spec: SceneSpec, rng: np.random.Generator) -> list[_Solid]:
    n_obj = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    n_obj = max(n_obj, spec.n_classes - 1)
    classes = [1 + i % (spec.n_classes - 1) for i in range(n_obj)]
    solids: list[_Solid] = []
    for n, cls in enumerate(classes):
        shape, aw, al, ah = _CLASS_TABLE[(cls - 1) % len(_CLASS_TABLE)]
        for _ in range(spec.max_attempts):
            size = rng.uniform(*spec.object_size)
            s = _Solid(
                cls=cls,
                shape=shape,
                cx=0.0,
                cy=0.0,
                yaw=float(rng.uniform(-np.pi, np.pi)) if shape == "box" else 0.0,
                half_w=0.5 * aw * size,
                half_l=0.5 * al * size,
                height=ah * size,
                base=spec.ground_z,
            )
            if shape == "cylinder":
                s.half_l = s.half_w
            dist = rng.uniform(spec.min_distance + s.radius, 0.8 * spec.ground_extent)
            ang = rng.uniform(-np.pi, np.pi)
            s.cx, s.cy = dist * np.cos(ang), dist * np.sin(ang)
            if all(np.hypot(s.cx - o.cx, s.cy - o.cy) > s.radius + o.radius + 0.3 for o in solids):
                solids.append(s)
                break
        else:
            # extra objects beyond one per class are optional
            if n < spec.n_classes - 1:
                raise ValueError("could not place objects without overlap; enlarge ground_extent")
    return solids


def _ray_box(o: _Solid, dirs: np.ndarray) -> np.ndarray:
    c, s = np.cos(-o.yaw), np.sin(-o.yaw)
    # ray origin and direction in the box frame
    ox, oy = c * -o.cx - s * -o.cy, s * -o.cx + c * -o.cy
    dx = c * dirs[:, 0] - s * dirs[:, 1]
    dy = s * dirs[:, 0] + c * dirs[:, 1]
    dz = dirs[:, 2]
    lo = np.array([-o.half_w, -o.half_l, o.base])
    hi = np.array([o.half_w, o.half_l, o.base + o.height])
    org = np.array([ox, oy, 0.0])
    d = np.stack([dx, dy, dz], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - org) / d
        t2 = (hi - org) / d
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _ray_cylinder(o: _Solid, dirs: np.ndarray) -> np.ndarray:
    r = o.half_w
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    b = -2.0 * (dx * o.cx + dy * o.cy)
    cc = o.cx * o.cx + o.cy * o.cy - r * r
    disc = b * b - 4 * a * cc
    t = np.full(dirs.shape[0], np.inf)
    ok = (disc >= 0) & (a > 0)
    t_side = np.where(ok, (-b - np.sqrt(np.where(ok, disc, 0))) / (2 * np.where(a > 0, a, 1)), np.inf)
    z = t_side * dz
    side = ok & (t_side > 0) & (z >= o.base) & (z <= o.base + o.height)
    t[side] = t_side[side]
    top = o.base + o.height
    with np.errstate(divide="ignore", invalid="ignore"):
        t_top = top / dz
    px, py = t_top * dx - o.cx, t_top * dy - o.cy
    cap = (dz != 0) & (t_top > 0) & (px * px + py * py <= r * r)
    t[cap] = np.minimum(t[cap], t_top[cap])
    return t


def _cast(spec: SceneSpec, solids: list[_Solid], rng: np.random.Generator):
    up, down = np.deg2rad(spec.fov_up), np.deg2rad(spec.fov_down)
    rows = np.arange(spec.beams)
    cols = np.arange(spec.columns)
    # beam centres on the pixel grid of a matching projection, small jitter within the pixel
    pitch = up - (rows[:, None] + 0.5 + rng.uniform(-0.2, 0.2, (spec.beams, spec.columns))) * (
        up - down
    ) / spec.beams
    yaw = -np.pi + (cols[None, :] + 0.5 + rng.uniform(-0.2, 0.2, (spec.beams, spec.columns))) * (
        2 * np.pi / spec.columns
    )
    pitch, yaw = pitch.ravel(), yaw.ravel()
    dirs = np.stack(
        [np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)], axis=1
    )
    best = np.full(dirs.shape[0], np.inf)
    label = np.full(dirs.shape[0], -1, dtype=np.int64)
    with np.errstate(divide="ignore"):
        t_g = np.where(dirs[:, 2] < 0, spec.ground_z / dirs[:, 2], np.inf)
    reach = t_g * np.cos(pitch)
    t_g = np.where(reach <= spec.ground_extent, t_g, np.inf)
    best[:] = t_g
    label[np.isfinite(t_g)] = 0
    for o in solids:
        t = _ray_box(o, dirs) if o.shape == "box" else _ray_cylinder(o, dirs)
        closer = t < best
        best[closer] = t[closer]
        label[closer] = o.cls
    hit = np.isfinite(best)
    pts = dirs[hit] * best[hit, None]
    label = label[hit]
    pts[label == 0, 2] = spec.ground_z
    return pts, label


def generate_scene(spec: SceneSpec) -> tuple[PointCloud, np.ndarray]:
    """Build one scene; returns the cloud and its dense per-point class ids.

    Output is a pure function of ``spec``. Classes whose hit count exceeds
    ``points_per_class[1]`` are randomly thinned; if any class falls below
    ``points_per_class[0]`` the objects are re-placed.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0A25E]))
    lo, hi = spec.points_per_class
    for _ in range(spec.max_attempts):
        solids = _place_objects(spec, rng)
        pts, label = _cast(spec, solids, rng)
        counts = np.bincount(label, minlength=spec.n_classes)
        if (counts >= lo).all():
            break
    else:
        raise ValueError(
            f"no placement gave every class >= {lo} points after {spec.max_attempts} attempts"
        )
    keep = np.ones(label.size, dtype=bool)
    for c in range(spec.n_classes):
        idx = np.flatnonzero(label == c)
        if idx.size > hi:
            drop = rng.choice(idx, idx.size - hi, replace=False)
            keep[drop] = False
    pts, label = pts[keep], label[keep]
    if spec.noise_sigma > 0:
        noise = rng.normal(0.0, spec.noise_sigma, pts.shape)
        noise[label == 0, 2] = 0.0
        pts = pts + noise
    base = np.array([class_intensity(c, spec.n_classes) for c in range(spec.n_classes)])
    intensity = np.clip(base[label] + rng.normal(0.0, spec.intensity_sigma, label.size), 0.0, 1.0)
    return PointCloud(pts, intensity), label


def scene_spec(base: SceneSpec, index: int) -> SceneSpec:
    """Spec of the ``index``-th scene of a dataset seeded by ``base.seed``."""
    seed = int(np.random.SeedSequence([base.seed, index]).generate_state(1)[0])
    return replace(base, seed=seed)


def generate_dataset(base: SceneSpec, n_scenes: int):
    return [generate_scene(scene_spec(base, i)) for i in range(n_scenes)]


def export_dataset(out_dir, base: SceneSpec, n_scenes: int, sequence: str = "00") -> dict:
    """Write scenes in the SemanticKITTI layout plus ``manifest.json`` and ``remap.txt``.

    Layout: ``sequences/<seq>/velodyne/NNNNNN.bin`` and
    ``sequences/<seq>/labels/NNNNNN.label``. Returns the manifest.
    """
    base.validate()
    seq_dir = os.path.join(out_dir, "sequences", sequence)
    vel = os.path.join(seq_dir, "velodyne")
    lab = os.path.join(seq_dir, "labels")
    os.makedirs(vel, exist_ok=True)
    os.makedirs(lab, exist_ok=True)
    files = []
    for i in range(n_scenes):
        cloud, labels = generate_scene(scene_spec(base, i))
        scan_rel = f"sequences/{sequence}/velodyne/{i:06d}.bin"
        label_rel = f"sequences/{sequence}/labels/{i:06d}.label"
        write_scan(os.path.join(out_dir, scan_rel), cloud)
        write_labels(os.path.join(out_dir, label_rel), labels)
        files.append({"scan": scan_rel, "label": label_rel, "points": len(cloud)})
    with open(os.path.join(out_dir, "remap.txt"), "w") as fh:
        fh.write("# raw_id mapped_id\n")
        for c in range(base.n_classes):
            fh.write(f"{c} {c}\n")
    manifest = {
        "format": "coarse3d-dataset-v1",
        "n_classes": base.n_classes,
        "seed": base.seed,
        "scenes": n_scenes,
        "remap": "remap.txt",
        "files": files,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
