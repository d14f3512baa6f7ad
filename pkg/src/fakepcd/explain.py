"""Critical points, depth images, per-source fingerprints and Chamfer matching."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .nnet import Model, encode
from .pointcloud import PointCloud, PointCloudError, chamfer_distance, make_rng

log = logging.getLogger(__name__)

PLANES = {"xy": (0, 1, 2), "xz": (0, 2, 1), "yz": (1, 2, 0)}
# occupied cells span [EMPTY_GAP, 1] so they never read as empty
EMPTY_GAP = 0.1


class ExplainError(ValueError):
    pass


@dataclass(frozen=True)
class CriticalPointSet:
    cloud: PointCloud
    indices: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points[self.indices]


def critical_points(model: Model, cloud: PointCloud) -> CriticalPointSet:
    """Points that win at least one channel of the max pool."""
    trace = encode(model, cloud, heads=())
    return CriticalPointSet(cloud, np.unique(trace.argmax[0]))


@dataclass(frozen=True)
class DepthImage:
    """Row 0 is the top of the image (largest second in-plane coordinate)."""

    cells: np.ndarray
    plane: str
    bounds: Tuple[float, float, float, float]
    depth_bounds: Tuple[float, float]


def unit_sphere(points: np.ndarray) -> np.ndarray:
    """Centre on the centroid and scale by the largest radius (no scaling for a single point)."""
    centred = points - points.mean(axis=0)
    radius = np.sqrt(np.max(np.sum(centred**2, axis=1)))
    return centred / radius if radius > 0 else centred


def depth_project(
    points: np.ndarray,
    plane: str = "xy",
    resolution: Tuple[int, int] = (64, 64),
    bounds: str = "fixed",
    normalize: bool = True,
) -> DepthImage:
    """Orthographic depth image: each cell holds the largest out-of-plane coordinate
    of the points landing in it, rescaled into ``[EMPTY_GAP, 1]``; empty cells are 0.

    ``bounds="fixed"`` uses ``[-1, 1]`` for both in-plane axes and for depth
    (after optional unit-sphere normalisation). ``bounds="auto"`` uses the
    bounding box of the points.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] != 3:
        raise ExplainError("depth_project needs a nonempty (n, 3) array")
    W, H = resolution
    if W < 2 or H < 2:
        raise ExplainError(f"resolution must be at least 2x2, got {resolution}")
    if plane not in PLANES:
        raise ExplainError(f"unknown plane {plane!r}")
    if normalize:
        pts = unit_sphere(pts)
    a, b, c = PLANES[plane]
    u, v, depth = pts[:, a], pts[:, b], pts[:, c]
    if bounds == "fixed":
        box = (-1.0, 1.0, -1.0, 1.0)
        dlo, dhi = -1.0, 1.0
    elif bounds == "auto":
        box = (u.min(), u.max(), v.min(), v.max())
        dlo, dhi = depth.min(), depth.max()
    else:
        raise ExplainError(f"bounds must be 'fixed' or 'auto', got {bounds!r}")
    if box[1] - box[0] <= 0 or box[3] - box[2] <= 0:
        raise ExplainError("degenerate projection bounds (zero extent)")
    inside = (u >= box[0]) & (u <= box[1]) & (v >= box[2]) & (v <= box[3])
    cells = np.zeros((H, W))
    if not inside.any():
        log.warning("all points fall outside the projection bounds; image is empty")
        return DepthImage(cells, plane, tuple(map(float, box)), (float(dlo), float(dhi)))
    col = np.minimum(((u[inside] - box[0]) / (box[1] - box[0]) * W).astype(int), W - 1)
    row = H - 1 - np.minimum(((v[inside] - box[2]) / (box[3] - box[2]) * H).astype(int), H - 1)
    span = dhi - dlo
    d = np.clip(depth[inside], dlo, dhi)
    scaled = np.ones_like(d) if span <= 0 else EMPTY_GAP + (1 - EMPTY_GAP) * (d - dlo) / span
    np.maximum.at(cells, (row, col), scaled)
    return DepthImage(cells, plane, tuple(map(float, box)), (float(dlo), float(dhi)))


@dataclass(frozen=True)
class Fingerprint:
    cells: np.ndarray
    source: str
    members: int


def stack_depth_images(images: Sequence[np.ndarray], source: str = "") -> Fingerprint:
    if not images:
        raise ExplainError("no depth images to stack")
    acc = np.zeros_like(np.asarray(images[0], dtype=np.float64))
    for img in images:
        acc += img
    return Fingerprint(acc / len(images), source, len(images))


def critical_depth_image(model: Model, cloud: PointCloud, plane: str = "xy", resolution=(64, 64)) -> np.ndarray:
    """Depth image of a cloud's critical points, normalised with the whole cloud's frame."""
    crit = critical_points(model, cloud)
    pts = cloud.points
    centre = pts.mean(axis=0)
    radius = np.sqrt(np.max(np.sum((pts - centre) ** 2, axis=1)))
    sub = (crit.points - centre) / (radius if radius > 0 else 1.0)
    return depth_project(sub, plane, resolution, bounds="fixed", normalize=False).cells


def build_fingerprint(
    model: Model,
    clouds: Sequence[PointCloud],
    m: int = 100,
    resolution: Tuple[int, int] = (64, 64),
    seed: int = 0,
    source: str = "",
    plane: str = "xy",
) -> Fingerprint:
    """Average critical-point depth image over ``m`` randomly chosen clouds of one source."""
    if len(clouds) < m:
        raise ExplainError(f"need {m} clouds for the fingerprint, got {len(clouds)}")
    picks = np.sort(make_rng(seed).choice(len(clouds), size=m, replace=False))
    images = [critical_depth_image(model, clouds[i], plane, resolution) for i in picks]
    return stack_depth_images(images, source)


def match_similar(cloud: PointCloud, candidates: Sequence[PointCloud]) -> Tuple[int, float]:
    """Index and Chamfer distance of the nearest candidate (first one wins ties)."""
    if not candidates:
        raise ExplainError("no candidates to match against")
    best, best_d = 0, np.inf
    for i, cand in enumerate(candidates):
        d = chamfer_distance(cloud, cand)
        if d < best_d:
            best, best_d = i, d
    return best, float(best_d)


# --- PGM output -------------------------------------------------------------


def to_gray(cells: np.ndarray) -> np.ndarray:
    return np.rint(255 * np.clip(cells, 0.0, 1.0)).astype(int)


def write_pgm(cells: np.ndarray, path) -> None:
    """Plain (P2) PGM, maxval 255, one image row per line."""
    gray = to_gray(np.asarray(cells))
    h, w = gray.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in gray]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise ExplainError(f"{path}: not a plain PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array([int(t) for t in tokens[4:]], dtype=int)
    if values.size != w * h:
        raise ExplainError(f"{path}: expected {w * h} gray values, found {values.size}")
    return values.reshape(h, w)


def write_cells_csv(cells: np.ndarray, path) -> None:
    np.savetxt(path, np.asarray(cells), delimiter=",", fmt="%.17g")
