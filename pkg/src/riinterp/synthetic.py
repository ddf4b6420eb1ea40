"""Procedural LiDAR scenes rendered by ray casting against planes and boxes.

Used for the shipped KITTI-format fixture and for motion experiments whose
middle frame is known analytically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dataset import write_velodyne_bin
from .projection import PointCloud, ProjectionConfig, pixel_directions

MAX_RANGE = 80.0


@dataclass(frozen=True)
class Plane:
    """Points x with normal . x = offset; ``extent`` bounds it in the plane's own (u, w) frame."""

    normal: Tuple[float, float, float]
    offset: float
    extent: Optional[Tuple[float, float, float, float]] = None
    axis_u: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    axis_w: Tuple[float, float, float] = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class Box:
    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]


@dataclass
class Scene:
    planes: List[Plane] = field(default_factory=list)
    boxes: List[Box] = field(default_factory=list)


def _hit_planes(origin, dirs, planes: Sequence[Plane]) -> np.ndarray:
    best = np.full(len(dirs), np.inf)
    for pl in planes:
        n = np.asarray(pl.normal, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (pl.offset - origin @ n) / denom
        ok = (np.abs(denom) > 1e-12) & (t > 1e-6)
        if pl.extent is not None:
            pts = origin + dirs * np.where(ok, t, 0.0)[:, None]
            a = pts @ np.asarray(pl.axis_u)
            b = pts @ np.asarray(pl.axis_w)
            u0, u1, w0, w1 = pl.extent
            ok &= (a >= u0) & (a <= u1) & (b >= w0) & (b <= w1)
        best = np.where(ok & (t < best), t, best)
    return best


def _hit_boxes(origin, dirs, boxes: Sequence[Box]) -> np.ndarray:
    best = np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for bx in boxes:
        lo = (np.asarray(bx.lo) - origin) * inv
        hi = (np.asarray(bx.hi) - origin) * inv
        tmin = np.nanmax(np.minimum(lo, hi), axis=1)
        tmax = np.nanmin(np.maximum(lo, hi), axis=1)
        ok = (tmax >= tmin) & (tmin > 1e-6)
        best = np.where(ok & (tmin < best), tmin, best)
    return best


def raycast(scene: Scene, origin, dirs: np.ndarray) -> np.ndarray:
    """Distance along each unit direction to the first surface (inf when nothing is hit)."""
    origin = np.asarray(origin, dtype=np.float64)
    return np.minimum(_hit_planes(origin, dirs, scene.planes), _hit_boxes(origin, dirs, scene.boxes))


def beam_directions(cfg: ProjectionConfig, rng: Optional[np.random.Generator] = None,
                    jitter: float = 0.0) -> np.ndarray:
    """[h*w, 3] unit rays through pixel centers, optionally jittered by a fraction of a pixel."""
    yaw, pitch = pixel_directions(cfg)
    yaw = yaw.reshape(-1).copy()
    pitch = pitch.reshape(-1).copy()
    if jitter and rng is not None:
        yaw += rng.uniform(-jitter, jitter, yaw.shape) * (2 * math.pi / cfg.w)
        pitch += rng.uniform(-jitter, jitter, pitch.shape) * (cfg.fov / cfg.h)
    cp = np.cos(pitch)
    return np.column_stack([cp * np.cos(yaw), cp * np.sin(yaw), np.sin(pitch)])


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def render(scene: Scene, position, yaw: float, dirs: np.ndarray,
           intensity: Optional[np.ndarray] = None, max_range: float = MAX_RANGE) -> PointCloud:
    """Sensor-frame returns for a sensor at ``position`` with heading ``yaw`` (world frame)."""
    world_dirs = dirs @ _rot_z(yaw).T
    r = raycast(scene, position, world_dirs)
    keep = np.isfinite(r) & (r <= max_range)
    xyz = dirs[keep] * r[keep, None]
    inten = np.zeros(keep.sum()) if intensity is None else intensity[keep]
    return PointCloud(np.column_stack([xyz, inten]))


# -- urban fixture -----------------------------------------------------------

SENSOR_HEIGHT = 1.73


def urban_scene(seed: int = 7) -> Scene:
    """Ground, building facades on both sides of a street, parked cars and poles."""
    rng = np.random.default_rng(seed)
    sc = Scene(planes=[Plane((0.0, 0.0, 1.0), -SENSOR_HEIGHT)])
    x = -40.0
    while x < 80.0:
        length = rng.uniform(8, 20)
        for side in (-1, 1):
            near = side * rng.uniform(9, 13)
            far = near + side * rng.uniform(6, 10)
            lo_y, hi_y = sorted((near, far))
            sc.boxes.append(Box((x, lo_y, -SENSOR_HEIGHT), (x + length, hi_y, rng.uniform(4, 14))))
        x += length + rng.uniform(2, 6)
    for _ in range(14):
        cx = rng.uniform(-30, 70)
        side = rng.choice([-1, 1])
        cy = side * rng.uniform(4, 6.5)
        sc.boxes.append(Box((cx, cy - 0.9, -SENSOR_HEIGHT), (cx + 4.2, cy + 0.9, -SENSOR_HEIGHT + 1.5)))
    for _ in range(10):
        px = rng.uniform(-30, 70)
        py = rng.choice([-1, 1]) * rng.uniform(7.5, 8.5)
        sc.boxes.append(Box((px - 0.15, py - 0.15, -SENSOR_HEIGHT), (px + 0.15, py + 0.15, 3.5)))
    return sc


def write_fixture_sequence(out_dir, n_frames: int = 3, seed: int = 7, speed: float = 0.4,
                           yaw_rate: float = math.radians(2.0),
                           beams: ProjectionConfig = ProjectionConfig(64, 1024)) -> List[Path]:
    """Render consecutive frames of a vehicle driving and turning; writes NNNNNN.bin files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = urban_scene(seed)
    rng = np.random.default_rng(seed + 1)
    paths = []
    for k in range(n_frames):
        dirs = beam_directions(beams, rng, jitter=0.3)
        inten = rng.uniform(0, 1, len(dirs))
        yaw = yaw_rate * k
        pos = (speed * k * math.cos(yaw), speed * k * math.sin(yaw), 0.0)
        cloud = render(scene, pos, yaw, dirs, inten)
        p = out / f"{k:06d}.bin"
        write_velodyne_bin(p, cloud)
        paths.append(p)
    return paths


# -- translating wall + ground -------------------------------------------------

MOTION_STEP = 0.2


def wall_ground_triplet(rng: np.random.Generator, cfg: ProjectionConfig,
                        step: float = MOTION_STEP) -> Tuple[PointCloud, PointCloud, PointCloud]:
    """Three frames of a random wall + ground scene translated by ``step`` per frame along each plane's normal.

    Returns are cast along pixel-center rays, so the middle frame is exact.
    """
    height = rng.uniform(1.4, 2.0)
    dist = rng.uniform(8.0, 20.0)
    heading = rng.uniform(-math.pi, math.pi)
    half_width = rng.uniform(6.0, 20.0)
    top = rng.uniform(1.0, 6.0)
    n = np.array([math.cos(heading), math.sin(heading), 0.0])
    along = np.array([-math.sin(heading), math.cos(heading), 0.0])
    dirs = beam_directions(cfg)
    frames = []
    for k in range(3):
        wall = Plane(tuple(n), dist - step * k, (-half_width, half_width, -10.0 * height, top - step * k),
                     axis_u=tuple(along), axis_w=(0.0, 0.0, 1.0))
        ground = Plane((0.0, 0.0, 1.0), -(height + step * k))
        frames.append(render(Scene([wall, ground]), (0.0, 0.0, 0.0), 0.0, dirs))
    return tuple(frames)
