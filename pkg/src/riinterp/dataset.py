"""KITTI odometry Velodyne scans: reading, triplet enumeration, sequence splits."""
from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .projection import MalformedFileError, PointCloud, ProjectionConfig, RangeImage, project

log = logging.getLogger(__name__)

RECORD_BYTES = 16
_FRAME_RE = re.compile(r"^(\d+)\.bin$")


def read_velodyne_bin(path) -> PointCloud:
    """Little-endian float32 (x, y, z, reflectance) records; zero-range points are dropped."""
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES:
        raise MalformedFileError(f"{path}: length {len(raw)} is not a multiple of {RECORD_BYTES}")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        raise MalformedFileError(f"{path}: non-finite values")
    cloud = PointCloud.clean(pts)
    if cloud.dropped:
        log.info("%s: dropped %d zero-range points", path, cloud.dropped)
    return cloud


def write_velodyne_bin(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(cloud.points.astype("<f4").tobytes())


@dataclass(frozen=True)
class Triplet:
    frame0: Path
    frame1: Path
    frame2: Path
    sequence: str
    index: int

    @property
    def frame_ids(self) -> Tuple[int, int, int]:
        return tuple(int(_FRAME_RE.match(p.name).group(1)) for p in (self.frame0, self.frame1, self.frame2))


def list_frames(sequence_dir) -> List[Path]:
    """Frame files of one sequence sorted by frame number. Accepts the dir or its velodyne/ child."""
    d = Path(sequence_dir)
    if (d / "velodyne").is_dir():
        d = d / "velodyne"
    frames = [p for p in d.iterdir() if _FRAME_RE.match(p.name)]
    return sorted(frames, key=lambda p: int(_FRAME_RE.match(p.name).group(1)))


def enumerate_triplets(sequence_dir, stride: int = 3, sequence: Optional[str] = None) -> List[Triplet]:
    """Consecutive triplets (0,1,2), (3,4,5), ...; ``stride=1`` gives overlapping ones."""
    frames = list_frames(sequence_dir)
    seq = sequence if sequence is not None else Path(sequence_dir).name
    out = []
    for k, start in enumerate(range(0, len(frames) - 2, stride)):
        out.append(Triplet(frames[start], frames[start + 1], frames[start + 2], seq, k))
    return out


@dataclass(frozen=True)
class SplitSpec:
    train: Tuple[str, ...]
    val: Tuple[str, ...]
    test: Tuple[str, ...]

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("split lists must be disjoint")

    def describe(self) -> str:
        return (f"train={','.join(self.train)} val={','.join(self.val)} "
                f"test={','.join(self.test)}")

    def restrict(self, available: Sequence[str]) -> "SplitSpec":
        have = set(available)
        return SplitSpec(tuple(s for s in self.train if s in have),
                         tuple(s for s in self.val if s in have),
                         tuple(s for s in self.test if s in have))


DEFAULT_SPLIT = SplitSpec(
    train=("00", "01", "02", "03", "04", "05", "06", "09", "10", "11", "12", "13", "15", "17", "19", "20"),
    val=("07", "14", "18"),
    test=("08", "16", "21"),
)


def read_split_file(path) -> SplitSpec:
    """Lines of ``train: 00 01 ...`` / ``val: ...`` / ``test: ...``; '#' starts a comment."""
    fields: Dict[str, Tuple[str, ...]] = {"train": (), "val": (), "test": ()}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if key not in fields:
            raise MalformedFileError(f"{path}: unknown split key {key!r}")
        fields[key] = tuple(rest.replace(",", " ").split())
    return SplitSpec(**fields)


def sequence_dirs(data_root) -> Dict[str, Path]:
    """Sequence id -> directory, for ``<root>/sequences/NN`` or ``<root>/NN`` layouts."""
    root = Path(data_root)
    if (root / "sequences").is_dir():
        root = root / "sequences"
    return {p.name: p for p in sorted(root.iterdir()) if p.is_dir()}


def split_triplets(data_root, split: SplitSpec = DEFAULT_SPLIT, stride: int = 3,
                   max_triplets: Optional[int] = None) -> Dict[str, List[Triplet]]:
    seqs = sequence_dirs(data_root)
    out = {}
    for name in ("train", "val", "test"):
        items: List[Triplet] = []
        for seq in getattr(split, name):
            if seq in seqs:
                items.extend(enumerate_triplets(seqs[seq], stride=stride, sequence=seq))
        if max_triplets is not None:
            items = items[:max_triplets]
        out[name] = items
    return out


def load_triplet(t: Triplet, cfg: ProjectionConfig = ProjectionConfig()) -> Tuple[RangeImage, RangeImage, RangeImage]:
    return tuple(project(read_velodyne_bin(p), cfg) for p in (t.frame0, t.frame1, t.frame2))


def iter_triplets(triplets: Sequence[Triplet], cfg: ProjectionConfig) -> Iterator[Tuple[RangeImage, RangeImage, RangeImage]]:
    for t in triplets:
        yield load_triplet(t, cfg)


def write_manifest(path, splits: Dict[str, List[Triplet]]) -> None:
    lines = []
    for name in ("train", "val", "test"):
        for t in splits.get(name, []):
            i0, i1, i2 = t.frame_ids
            lines.append(f"{name} {t.sequence} {i0} {i1} {i2}")
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    os.replace(tmp, path)
