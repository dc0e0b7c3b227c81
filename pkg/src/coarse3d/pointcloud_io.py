"""Point clouds on disk and on the range image.

Binary layouts follow SemanticKITTI: a scan is a flat array of little-endian
float32 ``(x, y, z, intensity)`` records, a label file one little-endian uint32
per point with the semantic class in the low 16 bits.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels

UNLABELLED = -1
RECORD_BYTES = 16


@dataclass
class PointCloud:
    coords: np.ndarray  # (N, 3) float64, meters
    intensity: np.ndarray  # (N,) float64 in [0, 1]

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if self.intensity.shape[0] != self.coords.shape[0]:
            raise ValueError(
                f"coords has {self.coords.shape[0]} points but intensity has {self.intensity.shape[0]}"
            )
        if not (np.isfinite(self.coords).all() and np.isfinite(self.intensity).all()):
            raise ValueError("point cloud contains non-finite values")

    def __len__(self):
        return self.coords.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0))


@dataclass(frozen=True)
class ProjectionConfig:
    height: int = 64
    width: int = 2048
    fov_up: float = 3.0  # degrees
    fov_down: float = -25.0  # degrees

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"image size must be positive, got {self.height}x{self.width}")
        if not self.fov_up > self.fov_down:
            raise ValueError(f"fov_up ({self.fov_up}) must exceed fov_down ({self.fov_down})")


@dataclass
class RangeImage:
    """Spherical projection of one scan.

    ``channels`` is (H, W, 5) holding range, x, y, z, intensity; zero where
    invalid. ``point_index`` maps each pixel to the retained point or -1.
    ``point_row``/``point_col`` give every point's own pixel (-1 when the point
    lies outside the vertical field of view), so occluded points can be
    back-projected.
    """

    channels: np.ndarray
    valid: np.ndarray
    point_index: np.ndarray
    point_row: np.ndarray
    point_col: np.ndarray
    cfg: ProjectionConfig = field(default_factory=ProjectionConfig)

    @property
    def shape(self):
        return self.valid.shape

    @property
    def range(self) -> np.ndarray:
        return self.channels[..., 0]


# ---------------------------------------------------------------------------
# SemanticKITTI files
# ---------------------------------------------------------------------------


def load_scan(path) -> PointCloud:
    """Read a ``.bin`` scan. Intensity is clamped to [0, 1]."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"scan file not found: {path}")
    raw = np.fromfile(path, dtype="<u1")
    if raw.size % RECORD_BYTES:
        offset = raw.size - raw.size % RECORD_BYTES
        raise ValueError(
            f"{path}: truncated record at byte offset {offset} "
            f"({raw.size} bytes is not a multiple of {RECORD_BYTES})"
        )
    rec = raw.view("<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(rec[:, :3], np.clip(rec[:, 3], 0.0, 1.0))


def write_scan(path, cloud: PointCloud) -> None:
    rec = np.empty((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.coords
    rec[:, 3] = cloud.intensity
    rec.tofile(os.fspath(path))


def load_remap(path) -> dict[int, int]:
    """Parse a class-remap table: one ``raw_id mapped_id`` pair per line.

    Blank lines and ``#`` comments are skipped. ``mapped_id`` may be -1 to mark
    a raw class as unlabelled.
    """
    table = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'raw_id mapped_id', got {line!r}")
            raw, mapped = int(parts[0]), int(parts[1])
            if raw in table:
                raise ValueError(f"{path}:{lineno}: duplicate raw id {raw}")
            table[raw] = mapped
    return table


def load_labels(path, n_points: int, remap: dict[int, int] | None = None) -> np.ndarray:
    """Read a ``.label`` file into int64 class ids.

    Upper 16 bits (instance ids) are discarded. With ``remap`` every semantic id
    must appear in the table.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"label file not found: {path}")
    raw = np.fromfile(path, dtype="<u1")
    if raw.size % 4:
        raise ValueError(f"{path}: {raw.size} bytes is not a whole number of uint32 records")
    rec = raw.view("<u4")
    if rec.size != n_points:
        raise ValueError(f"{path}: expected {n_points} labels, found {rec.size}")
    sem = (rec & 0xFFFF).astype(np.int64)
    if remap is None:
        return sem
    ids = np.unique(sem)
    missing = [int(i) for i in ids if int(i) not in remap]
    if missing:
        raise ValueError(f"{path}: label ids not in remap table: {missing}")
    lut = np.zeros(int(ids.max()) + 1 if ids.size else 1, dtype=np.int64)
    for i in ids:
        lut[i] = remap[int(i)]
    return lut[sem]


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if (labels < 0).any() or (labels > 0xFFFF).any():
        raise ValueError("semantic ids must lie in [0, 65535]")
    labels.astype("<u4").tofile(os.fspath(path))


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def _point_pixels(coords: np.ndarray, cfg: ProjectionConfig):
    """Per-point (row, col, range); row/col are -1 for points outside the fov."""
    n = coords.shape[0]
    rng = np.linalg.norm(coords, axis=1)
    rows = np.full(n, -1, dtype=np.int64)
    cols = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return rows, cols, rng
    up = np.deg2rad(cfg.fov_up)
    down = np.deg2rad(cfg.fov_down)
    with np.errstate(invalid="ignore", divide="ignore"):
        pitch = np.arcsin(np.clip(coords[:, 2] / rng, -1.0, 1.0))
    yaw = np.arctan2(coords[:, 1], coords[:, 0])
    keep = (rng > 0) & (pitch <= up) & (pitch >= down)
    v = (1.0 - (pitch[keep] - down) / (up - down)) * cfg.height
    u = (yaw[keep] + np.pi) / (2.0 * np.pi) * cfg.width
    rows[keep] = np.clip(np.floor(v), 0, cfg.height - 1).astype(np.int64)
    cols[keep] = np.clip(np.floor(u), 0, cfg.width - 1).astype(np.int64)
    return rows, cols, rng


def spherical_project(cloud: PointCloud, cfg: ProjectionConfig = ProjectionConfig()) -> RangeImage:
    """Project a cloud to an (H, W) range image, keeping the nearest point per pixel.

    Row 0 is the top of the vertical field of view; column 0 is azimuth -pi
    with azimuth measured as ``atan2(y, x)``.
    """
    H, W = cfg.height, cfg.width
    rows, cols, rng = _point_pixels(cloud.coords, cfg)
    flat = np.where(rows >= 0, rows * W + cols, -1)
    owner = kernels.zbuffer(flat, rng, H * W)
    valid = owner >= 0
    channels = np.zeros((H * W, 5), dtype=np.float64)
    idx = owner[valid]
    channels[valid, 0] = rng[idx]
    channels[valid, 1:4] = cloud.coords[idx]
    channels[valid, 4] = cloud.intensity[idx]
    return RangeImage(
        channels=channels.reshape(H, W, 5),
        valid=valid.reshape(H, W),
        point_index=owner.reshape(H, W),
        point_row=rows,
        point_col=cols,
        cfg=cfg,
    )


def pixel_labels(image: RangeImage, point_labels: np.ndarray, cloud: PointCloud | None = None) -> np.ndarray:
    """Per-pixel label map; UNLABELLED on empty pixels.

    Without ``cloud`` each pixel takes the label of its retained (nearest) point.
    With ``cloud`` it takes the label of the nearest *labelled* point falling in
    it, so sparse annotations hidden behind a closer unlabelled point still reach
    the image.
    """
    point_labels = np.asarray(point_labels)
    out = np.full(image.shape, UNLABELLED, dtype=np.int64)
    if cloud is None:
        v = image.valid
        out[v] = point_labels[image.point_index[v]]
        return out
    if point_labels.shape[0] != len(cloud) or image.point_row.shape[0] != len(cloud):
        raise ValueError("labels, cloud and range image disagree on the point count")
    H, W = image.shape
    rows, cols = image.point_row, image.point_col
    ok = (rows >= 0) & (point_labels != UNLABELLED)
    flat = np.where(ok, rows * W + cols, -1)
    owner = kernels.zbuffer(flat, np.linalg.norm(cloud.coords, axis=1), H * W)
    hit = owner >= 0
    out.reshape(-1)[hit] = point_labels[owner[hit]]
    return out


def backproject(range_pred: np.ndarray, image: RangeImage, cloud: PointCloud) -> np.ndarray:
    """Per-point labels read from each point's own pixel, occluded points included."""
    range_pred = np.asarray(range_pred)
    if range_pred.shape != image.shape:
        raise ValueError(f"prediction shape {range_pred.shape} != image shape {image.shape}")
    if image.point_row.shape[0] != len(cloud):
        raise ValueError("range image was not projected from this cloud")
    out = np.full(len(cloud), UNLABELLED, dtype=np.int64)
    inside = image.point_row >= 0
    out[inside] = range_pred[image.point_row[inside], image.point_col[inside]]
    return out


def knn_postprocess(
    point_preds: np.ndarray,
    cloud: PointCloud,
    image: RangeImage,
    k: int = 5,
    window: int = 5,
    n_classes: int | None = None,
) -> np.ndarray:
    """Replace each point's label by the majority of its range-nearest neighbours.

    Candidates are the retained points of the ``window`` x ``window`` pixels around
    the point's own pixel; distance is the absolute range difference. Points
    outside the field of view keep their input label.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    point_preds = np.asarray(point_preds, dtype=np.int64)
    if point_preds.shape[0] != len(cloud):
        raise ValueError("one prediction per point required")
    if n_classes is None:
        n_classes = int(point_preds.max()) + 1 if point_preds.size else 1
    pix_label = pixel_labels(image, point_preds)
    pix_range = np.where(image.valid, image.range, np.inf)
    inside = np.flatnonzero(image.point_row >= 0)
    rng = np.linalg.norm(cloud.coords[inside], axis=1)
    voted = kernels.knn_vote(
        image.point_row[inside],
        image.point_col[inside],
        rng,
        pix_range,
        pix_label,
        k,
        window,
        n_classes,
    )
    out = point_preds.copy()
    has = voted >= 0
    out[inside[has]] = voted[has]
    return out
