"""Spherical projection of LiDAR scans to range images and back."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple, Union

import numpy as np

RIMG_MAGIC = b"RIMG"
RIMG_VERSION = 1
CHANNELS = ("r", "x", "y", "z", "valid")


class MalformedFileError(ValueError):
    """Raised when a file does not follow its binary layout."""


@dataclass
class PointCloud:
    """N points as an [N, 4] float array of (x, y, z, intensity), meters in the sensor frame."""

    points: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] not in (3, 4):
            raise ValueError(f"points must be [N,3] or [N,4], got {pts.shape}")
        if pts.shape[1] == 3:
            pts = np.concatenate([pts, np.zeros((len(pts), 1))], axis=1)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts

    @classmethod
    def from_xyz(cls, xyz, intensity=None) -> "PointCloud":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        inten = np.zeros(len(xyz)) if intensity is None else np.asarray(intensity, dtype=np.float64)
        return cls(np.column_stack([xyz, inten]))

    @classmethod
    def clean(cls, points) -> "PointCloud":
        """Build a cloud dropping zero-range points; the count lands in ``dropped``."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
        keep = np.linalg.norm(pts[:, :3], axis=1) > 0
        return cls(pts[keep], dropped=int((~keep).sum()))

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class ProjectionConfig:
    h: int = 64
    w: int = 2048
    theta_up: float = math.radians(3.0)
    theta_down: float = math.radians(25.0)

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ValueError("image extents must be >= 1")
        if self.theta_up + self.theta_down <= 0:
            raise ValueError("vertical field of view must be positive")

    @property
    def fov(self) -> float:
        return self.theta_up + self.theta_down

    def with_size(self, h: int = None, w: int = None) -> "ProjectionConfig":
        return ProjectionConfig(self.h if h is None else h, self.w if w is None else w,
                                self.theta_up, self.theta_down)


@dataclass
class RangeImage:
    """[5, h, w] planes (r, x, y, z, valid) plus the config that produced them."""

    data: np.ndarray
    config: ProjectionConfig
    out_of_fov: int = field(default=0, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape != (5, self.config.h, self.config.w):
            raise ValueError(f"range image planes {self.data.shape} do not match config "
                             f"{(5, self.config.h, self.config.w)}")

    @property
    def range(self) -> np.ndarray:
        return self.data[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.data[1:4]

    @property
    def valid(self) -> np.ndarray:
        return self.data[4] > 0.5

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())


def spherical_coords(point) -> Tuple[float, float, float]:
    """(yaw, pitch, range) of one point; yaw = atan2(y, x), pitch = asin(z / r)."""
    x, y, z = (float(v) for v in point[:3])
    r = math.sqrt(x * x + y * y + z * z)
    if r <= 0:
        raise ValueError("zero-range point has no direction")
    return math.atan2(y, x), math.asin(max(-1.0, min(1.0, z / r))), r


def pixel_coords(xyz: np.ndarray, cfg: ProjectionConfig):
    """Integer (u, v), range, and the in-FOV mask for an [N,3] array."""
    xyz = np.asarray(xyz, dtype=np.float64)
    r = np.linalg.norm(xyz, axis=1)
    yaw = np.arctan2(xyz[:, 1], xyz[:, 0])
    pitch = np.arcsin(np.clip(xyz[:, 2] / r, -1.0, 1.0))
    in_fov = (pitch >= -cfg.theta_down) & (pitch <= cfg.theta_up)
    u = np.floor(0.5 * (1.0 - yaw / np.pi) * cfg.w)
    v = np.floor((1.0 - (pitch + cfg.theta_down) / cfg.fov) * cfg.h)
    u = np.clip(u, 0, cfg.w - 1).astype(np.int64)
    v = np.clip(v, 0, cfg.h - 1).astype(np.int64)
    return u, v, r, in_fov


def project(cloud: PointCloud, cfg: ProjectionConfig = ProjectionConfig()) -> RangeImage:
    """Scatter points into an h x w range image; colliding points keep the nearest one."""
    if len(cloud) == 0:
        raise ValueError("cannot project an empty point cloud")
    xyz = cloud.xyz
    u, v, r, in_fov = pixel_coords(xyz, cfg)
    keep = np.flatnonzero(in_fov)
    pix = v[keep] * cfg.w + u[keep]
    # lexsort: primary key pixel, then range, then original index for determinism
    order = np.lexsort((keep, r[keep], pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    winners = keep[order[first]]
    wpix = pix_sorted[first]

    data = np.zeros((5, cfg.h * cfg.w), dtype=np.float32)
    data[0, wpix] = r[winners]
    data[1:4, wpix] = xyz[winners].T
    data[4, wpix] = 1.0
    return RangeImage(data.reshape(5, cfg.h, cfg.w), cfg, out_of_fov=int((~in_fov).sum()))


def pixel_directions(cfg: ProjectionConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Yaw and pitch of every pixel center, each [h, w]."""
    u = np.arange(cfg.w) + 0.5
    v = np.arange(cfg.h) + 0.5
    yaw = np.pi * (1.0 - 2.0 * u / cfg.w)
    pitch = cfg.fov * (1.0 - v / cfg.h) - cfg.theta_down
    return np.broadcast_to(yaw[None, :], (cfg.h, cfg.w)), np.broadcast_to(pitch[:, None], (cfg.h, cfg.w))


def backproject_range(r: np.ndarray, cfg: ProjectionConfig) -> np.ndarray:
    """[3, h, w] coordinates of pixel-center rays scaled by ``r``."""
    yaw, pitch = pixel_directions(cfg)
    cp = np.cos(pitch)
    r = np.asarray(r, dtype=np.float64)
    return np.stack([r * cp * np.cos(yaw), r * cp * np.sin(yaw), r * np.sin(pitch)])


def range_image_from_range(r: np.ndarray, valid: np.ndarray, cfg: ProjectionConfig) -> RangeImage:
    """Build a full five-plane image from a range map alone (synthesized frames)."""
    valid = np.asarray(valid, dtype=bool)
    r = np.where(valid, r, 0.0)
    data = np.zeros((5, cfg.h, cfg.w), dtype=np.float32)
    data[0] = r
    data[1:4] = backproject_range(r, cfg) * valid
    data[4] = valid
    return RangeImage(data, cfg)


def reconstruct(ri: RangeImage, from_range: bool = False) -> PointCloud:
    """One point per valid pixel, row-major. Stored x, y, z are used verbatim unless ``from_range``."""
    valid = ri.valid
    if not valid.any():
        raise ValueError("range image has no valid pixels")
    if from_range:
        xyz = backproject_range(ri.range, ri.config)[:, valid].T
    else:
        xyz = ri.xyz[:, valid].T.astype(np.float64)
    return PointCloud.from_xyz(xyz)


# -- file formats ---------------------------------------------------------

_RIMG_HEADER = struct.Struct("<4sIIIff")

PathLike = Union[str, Path]


def write_rimg(path: PathLike, ri: RangeImage) -> None:
    cfg = ri.config
    with open(path, "wb") as f:
        f.write(_RIMG_HEADER.pack(RIMG_MAGIC, RIMG_VERSION, cfg.h, cfg.w, cfg.theta_up, cfg.theta_down))
        f.write(ri.data.astype("<f4").tobytes())


def read_rimg(path: PathLike) -> RangeImage:
    raw = Path(path).read_bytes()
    if len(raw) < _RIMG_HEADER.size:
        raise MalformedFileError(f"{path}: truncated header")
    magic, version, h, w, tu, td = _RIMG_HEADER.unpack_from(raw)
    if magic != RIMG_MAGIC:
        raise MalformedFileError(f"{path}: bad magic {magic!r}")
    if version != RIMG_VERSION:
        raise MalformedFileError(f"{path}: unsupported version {version}")
    expected = _RIMG_HEADER.size + 5 * h * w * 4
    if len(raw) != expected:
        raise MalformedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    try:
        cfg = ProjectionConfig(h, w, float(tu), float(td))
    except ValueError as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc
    planes = np.frombuffer(raw, dtype="<f4", offset=_RIMG_HEADER.size).reshape(5, h, w)
    return RangeImage(planes.astype(np.float32), cfg)


def export_pgm(path: PathLike, ri: RangeImage) -> float:
    """Write r as a 16-bit binary PGM scaled linearly over [0, r_max]; returns r_max."""
    r = ri.range.astype(np.float64)
    r_max = float(r.max()) if r.size else 0.0
    if r_max > 0:
        scaled = np.round(r / r_max * 65535.0)
    else:
        scaled = np.zeros_like(r)
    img = np.clip(scaled, 0, 65535).astype(">u2")
    header = f"P5\n# r_max={r_max:.6f}\n{ri.config.w} {ri.config.h}\n65535\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(img.tobytes())
    return r_max
