"""Point cloud container, file formats, sampling, Chamfer distance and augmentation."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

PCDA_MAGIC = b"PCDA"

PathLike = Union[str, Path]


class PointCloudError(ValueError):
    """Raised for invalid point cloud data or arguments."""


class PointCloudParseError(PointCloudError):
    """Raised when a point cloud file cannot be parsed."""


def make_rng(seed: int) -> np.random.Generator:
    """All randomness in the package goes through PCG64 (numpy's versioned bit generator)."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass(frozen=True)
class SourceLabel:
    """Either a known source ``index`` in 0..K-1 or the catch-all Unknown class."""

    index: Optional[int]
    name: str = ""

    @classmethod
    def known(cls, index: int, name: str = "") -> "SourceLabel":
        if index < 0:
            raise PointCloudError(f"known source index must be >= 0, got {index}")
        return cls(int(index), name or f"source{index}")

    @classmethod
    def unknown(cls) -> "SourceLabel":
        return cls(None, "Unknown")

    @property
    def is_unknown(self) -> bool:
        return self.index is None

    def __str__(self) -> str:
        return self.name


UNKNOWN = SourceLabel.unknown()


@dataclass
class PointCloud:
    points: np.ndarray
    source_label: Optional[SourceLabel] = None
    shape_tag: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise PointCloudError(f"points must have shape (n, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise PointCloudError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
            raise PointCloudError(f"non-finite coordinate at point {bad}")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return replace(self, points=points, meta=dict(self.meta))


@dataclass(frozen=True)
class AugmentSpec:
    """Translation, then Gaussian jitter, then seeded rotation about the enabled axes.

    ``angle_range`` is ``(low, high)`` in radians; each enabled axis draws an
    independent angle uniformly from it. Rotations compose in x, y, z order.
    """

    translation: tuple = (0.0, 0.0, 0.0)
    jitter_sigma: float = 0.0
    rotate_axes: tuple = (False, False, False)
    angle_range: tuple = (0.0, 0.0)
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if len(self.translation) != 3 or not all(math.isfinite(t) for t in self.translation):
            raise PointCloudError("translation must be three finite values")
        if not self.jitter_sigma >= 0:
            raise PointCloudError(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")
        lo, hi = self.angle_range
        if not (0.0 <= lo <= hi <= 2 * math.pi):
            raise PointCloudError(f"angle range must lie within [0, 2pi], got {self.angle_range}")
        if len(self.rotate_axes) != 3:
            raise PointCloudError("rotate_axes needs three flags")

    def reseeded(self, seed: int) -> "AugmentSpec":
        return replace(self, rng_seed=int(seed))


@dataclass(frozen=True)
class AugmentPolicy:
    """Distribution over :class:`AugmentSpec`: translation offsets are drawn
    uniformly from ``[-max_translation, max_translation]`` per axis."""

    max_translation: float = 0.05
    jitter_sigma: float = 0.005
    rotate_axes: tuple = (False, False, True)
    angle_range: tuple = (0.0, 0.13)

    def draw(self, rng: np.random.Generator) -> AugmentSpec:
        offset = rng.uniform(-self.max_translation, self.max_translation, size=3) if self.max_translation > 0 else np.zeros(3)
        return AugmentSpec(
            translation=tuple(float(v) for v in offset),
            jitter_sigma=self.jitter_sigma,
            rotate_axes=tuple(self.rotate_axes),
            angle_range=tuple(self.angle_range),
            rng_seed=int(rng.integers(0, 2**63 - 1)),
        )


# --- file I/O ---------------------------------------------------------------


def _detect_format(path: Path, fmt: str) -> str:
    if fmt != "auto":
        if fmt not in ("xyz", "pcda"):
            raise PointCloudError(f"unknown format {fmt!r}")
        return fmt
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == PCDA_MAGIC:
        return "pcda"
    return "xyz"


def _read_xyz(path: Path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.rstrip("\n")
            if not text.strip() or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 3:
                raise PointCloudParseError(f"{path}: line {lineno}: expected 3 values, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise PointCloudParseError(f"{path}: line {lineno}: not a number: {text!r}") from None
    if not rows:
        raise PointCloudParseError(f"{path}: no points")
    return np.array(rows, dtype=np.float64)


def _read_pcda(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < 8:
        raise PointCloudParseError(f"{path}: truncated header at byte {len(data)}")
    if data[:4] != PCDA_MAGIC:
        raise PointCloudParseError(f"{path}: bad magic {data[:4]!r} at byte 0")
    (count,) = struct.unpack_from("<I", data, 4)
    if count == 0:
        raise PointCloudParseError(f"{path}: no points")
    expected = 8 + 12 * count
    if len(data) != expected:
        raise PointCloudParseError(
            f"{path}: count mismatch, header says {count} points ({expected} bytes) "
            f"but file has {len(data)} bytes"
        )
    arr = np.frombuffer(data, dtype="<f4", offset=8, count=3 * count)
    return arr.reshape(count, 3).astype(np.float64)


def read_point_cloud(path: PathLike, format: str = "auto") -> PointCloud:
    path = Path(path)
    fmt = _detect_format(path, format)
    pts = _read_pcda(path) if fmt == "pcda" else _read_xyz(path)
    if not np.all(np.isfinite(pts)):
        bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
        raise PointCloudError(f"{path}: non-finite coordinate at point {bad}")
    return PointCloud(pts)


def write_point_cloud(cloud: PointCloud, path: PathLike, format: str = "pcda") -> None:
    path = Path(path)
    pts = np.asarray(cloud.points, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise PointCloudError(f"refusing to write non-finite cloud to {path}")
    if format == "auto":
        format = "pcda" if path.suffix == ".pcda" else "xyz"
    try:
        if format == "pcda":
            payload = PCDA_MAGIC + struct.pack("<I", pts.shape[0]) + pts.astype("<f4").tobytes()
            path.write_bytes(payload)
        elif format == "xyz":
            lines = "".join(f"{x:.6f} {y:.6f} {z:.6f}\n" for x, y, z in pts)
            path.write_text(lines, encoding="utf-8")
        else:
            raise PointCloudError(f"unknown format {format!r}")
    except OSError as exc:
        raise OSError(f"cannot write point cloud to {path}: {exc}") from exc


# --- geometry ---------------------------------------------------------------


def downsample(cloud: PointCloud, m: int, seed: int = 0) -> PointCloud:
    """Seeded uniform sampling of ``m`` points without replacement (point order kept)."""
    if m < 1:
        raise PointCloudError(f"target count must be >= 1, got {m}")
    n = len(cloud)
    if m >= n:
        return cloud
    idx = np.sort(make_rng(seed).choice(n, size=m, replace=False))
    return cloud.with_points(cloud.points[idx])


def _as_points(x: Union[PointCloud, np.ndarray]) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise PointCloudError("chamfer distance needs nonempty (n, 3) inputs")
    return pts


def chamfer_distance(a: Union[PointCloud, np.ndarray], b: Union[PointCloud, np.ndarray]) -> float:
    """Mean squared nearest-neighbour distance a->b plus b->a."""
    pa, pb = _as_points(a), _as_points(b)
    da, _ = cKDTree(pb).query(pa)
    db, _ = cKDTree(pa).query(pb)
    return float(np.mean(da**2) + np.mean(db**2))


def rotation_matrix(axis: str, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    if axis == "x":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == "y":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == "z":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise PointCloudError(f"unknown axis {axis!r}")


def augment_points(points: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    rng = make_rng(spec.rng_seed)
    out = np.asarray(points, dtype=np.float64) + np.asarray(spec.translation, dtype=np.float64)
    if spec.jitter_sigma > 0:
        out = out + rng.normal(0.0, spec.jitter_sigma, size=out.shape)
    lo, hi = spec.angle_range
    rot = np.eye(3)
    for flag, axis in zip(spec.rotate_axes, "xyz"):
        if flag:
            angle = rng.uniform(lo, hi) if hi > lo else lo
            rot = rotation_matrix(axis, angle) @ rot
    if not np.array_equal(rot, np.eye(3)):
        out = out @ rot.T
    return out


def augment(cloud: PointCloud, spec: AugmentSpec) -> PointCloud:
    return cloud.with_points(augment_points(cloud.points, spec))


def stack_points(clouds: Sequence[PointCloud]) -> np.ndarray:
    """Stack equal-length clouds into a (B, n, 3) array."""
    sizes = {len(c) for c in clouds}
    if len(sizes) != 1:
        raise PointCloudError(f"clouds must share a point count to be batched, got sizes {sorted(sizes)}")
    return np.stack([c.points for c in clouds])
