"""Procedural point cloud sources: analytic shapes plus per-source sampling artifacts.

Each source samples the same family of parametric shapes and then applies one
artifact signature, standing in for the bias a particular generator leaves
behind. ``real`` applies no artifact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import PointCloud, SourceLabel, chamfer_distance, make_rng

SHAPES = ("airplane", "car", "chair", "bench", "lamp")

# documented parameter ranges per signature
PARAM_RANGES: Dict[str, Dict[str, Tuple[float, float]]] = {
    "none": {},
    "grid-quantization": {"step": (0.005, 0.5)},
    "surface-noise": {"sigma": (0.001, 0.2), "correlation": (0, 32)},
    "density-bias": {"axis": (0, 2), "exponent": (0.1, 8.0)},
    "dropout-patches": {"count": (1, 16), "radius": (0.02, 0.8)},
    "smoothing": {"iterations": (1, 20), "neighbors": (2, 32)},
    "outliers": {"fraction": (0.01, 0.5), "spread": (0.0, 2.0)},
    "clumping": {"clusters": (1, 32), "sigma": (0.0, 0.2)},
}
SIGNATURES = tuple(PARAM_RANGES)


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimSourceSpec:
    name: str
    signature: str = "none"
    params: Tuple[Tuple[str, float], ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.signature not in PARAM_RANGES:
            raise SimulationError(f"unknown artifact signature {self.signature!r}")
        ranges = PARAM_RANGES[self.signature]
        for key, value in self.params:
            if key not in ranges:
                raise SimulationError(f"{self.name}: parameter {key!r} not valid for {self.signature}")
            lo, hi = ranges[key]
            if not lo <= value <= hi:
                raise SimulationError(f"{self.name}: {key}={value} outside [{lo}, {hi}]")

    @property
    def param(self) -> Dict[str, float]:
        return dict(self.params)


def default_sources() -> List[SimSourceSpec]:
    """One clean source and seven artifact-bearing ones."""
    return [
        SimSourceSpec("real", "none", (), seed=101),
        SimSourceSpec("lattice", "grid-quantization", (("step", 0.25),), seed=102),
        SimSourceSpec("fuzzy", "surface-noise", (("sigma", 0.1), ("correlation", 0)), seed=103),
        SimSourceSpec("skewed", "density-bias", (("axis", 2), ("exponent", 3.0)), seed=104),
        SimSourceSpec("holey", "dropout-patches", (("count", 6), ("radius", 0.45)), seed=105),
        SimSourceSpec("blurry", "smoothing", (("iterations", 2), ("neighbors", 32)), seed=106),
        SimSourceSpec("scattered", "outliers", (("fraction", 0.2), ("spread", 0.5)), seed=107),
        SimSourceSpec("clumpy", "clumping", (("clusters", 8), ("sigma", 0.03)), seed=108),
    ]


DEFAULT_UNKNOWN = ("blurry", "skewed")


# --- analytic surfaces ------------------------------------------------------


class _Box:
    def __init__(self, center, size):
        self.c = np.asarray(center, dtype=np.float64)
        self.s = np.abs(np.asarray(size, dtype=np.float64))
        sx, sy, sz = self.s
        self.face_areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    def sample(self, k: int, rng: np.random.Generator) -> np.ndarray:
        faces = rng.choice(6, size=k, p=self.face_areas / self.face_areas.sum())
        u = rng.uniform(-0.5, 0.5, size=(k, 3))
        axis = faces // 2
        sign = np.where(faces % 2 == 0, -0.5, 0.5)
        u[np.arange(k), axis] = sign
        return self.c + u * self.s


class _Cylinder:
    """Vertical (z axis) open-or-capped cylinder / frustum."""

    def __init__(self, center, r_bottom, r_top, height, caps=True):
        self.c = np.asarray(center, dtype=np.float64)
        self.r0, self.r1, self.h = float(r_bottom), float(r_top), float(height)
        slant = math.hypot(self.h, self.r1 - self.r0)
        self.areas = np.array(
            [
                math.pi * (self.r0 + self.r1) * slant,
                math.pi * self.r0**2 if caps else 0.0,
                math.pi * self.r1**2 if caps else 0.0,
            ]
        )

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    def sample(self, k: int, rng: np.random.Generator) -> np.ndarray:
        part = rng.choice(3, size=k, p=self.areas / self.areas.sum())
        theta = rng.uniform(0, 2 * math.pi, size=k)
        out = np.empty((k, 3))
        # lateral surface: area element grows linearly with radius
        r0, r1 = self.r0, self.r1
        v = rng.uniform(size=k)
        if abs(r1 - r0) > 1e-12:
            t = (np.sqrt(r0**2 + v * (r1**2 - r0**2)) - r0) / (r1 - r0)
        else:
            t = v
        rad = r0 + t * (r1 - r0)
        z = (t - 0.5) * self.h
        # caps: uniform on disks
        cap_r = np.sqrt(rng.uniform(size=k))
        lateral = part == 0
        bottom = part == 1
        top = part == 2
        rad = np.where(bottom, cap_r * r0, np.where(top, cap_r * r1, rad))
        z = np.where(bottom, -0.5 * self.h, np.where(top, 0.5 * self.h, z))
        out[:, 0] = rad * np.cos(theta)
        out[:, 1] = rad * np.sin(theta)
        out[:, 2] = z
        del lateral
        return self.c + out


def _instance(shape: str, rng: np.random.Generator, variation: float = 1.0) -> list:
    """Primitive list for one randomly proportioned instance of ``shape``.

    ``variation`` scales every proportion range about its midpoint (0 gives
    the mean shape every time).
    """

    def j(lo, hi):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * variation
        return rng.uniform(mid - half, mid + half)

    if shape == "airplane":
        L, span, th = j(1.6, 2.0), j(1.5, 1.9), j(0.16, 0.22)
        wx = j(-0.15, 0.15)
        return [
            _Box((0, 0, 0), (L, th, th)),
            _Box((wx, 0, 0), (j(0.3, 0.4), span, 0.04)),
            _Box((-L / 2 + 0.1, 0, 0), (0.18, j(0.5, 0.7), 0.03)),
            _Box((-L / 2 + 0.1, 0, th / 2 + 0.12), (0.18, 0.03, j(0.2, 0.3))),
        ]
    if shape == "car":
        L, W, H = j(1.6, 1.9), j(0.7, 0.85), j(0.3, 0.4)
        return [
            _Box((0, 0, 0), (L, W, H)),
            _Box((j(-0.2, 0.1), 0, H / 2 + 0.14), (j(0.7, 0.9), W * 0.9, 0.28)),
        ]
    if shape == "chair":
        s, leg, back = j(0.75, 0.9), j(0.6, 0.75), j(0.6, 0.8)
        parts = [
            _Box((0, 0, 0), (s, s, 0.06)),
            _Box((-s / 2 + 0.03, 0, back / 2 + 0.03), (0.06, s, back)),
        ]
        for sx in (-1, 1):
            for sy in (-1, 1):
                parts.append(_Box((sx * (s / 2 - 0.05), sy * (s / 2 - 0.05), -leg / 2), (0.06, 0.06, leg)))
        return parts
    if shape == "bench":
        L, D, leg = j(1.7, 2.0), j(0.45, 0.55), j(0.45, 0.55)
        return [
            _Box((0, 0, 0), (L, D, 0.06)),
            _Box((0, -D / 2 + 0.03, j(0.3, 0.4)), (L, 0.05, 0.3)),
            _Box((-L / 2 + 0.1, 0, -leg / 2), (0.08, D, leg)),
            _Box((L / 2 - 0.1, 0, -leg / 2), (0.08, D, leg)),
        ]
    if shape == "lamp":
        H = j(1.2, 1.5)
        return [
            _Cylinder((0, 0, -H / 2), j(0.3, 0.4), j(0.25, 0.35), 0.06),
            _Cylinder((0, 0, 0), 0.035, 0.035, H, caps=False),
            _Cylinder((0, 0, H / 2), j(0.4, 0.5), j(0.18, 0.25), j(0.3, 0.4), caps=False),
        ]
    raise SimulationError(f"unknown shape {shape!r}")


def sample_surface(shape: str, n: int, rng: np.random.Generator, parts: Optional[list] = None) -> np.ndarray:
    if parts is None:
        parts = _instance(shape, rng)
    areas = np.array([p.area for p in parts])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = np.concatenate([p.sample(int(k), rng) for p, k in zip(parts, counts) if k > 0])
    return pts[rng.permutation(n)]


# --- artifact signatures ----------------------------------------------------

OVERSAMPLE = 8


def _apply_signature(spec: SimSourceSpec, parts: list, n: int, rng: np.random.Generator) -> np.ndarray:
    p = spec.param
    sig = spec.signature
    shape = None
    if sig == "none":
        return sample_surface(shape, n, rng, parts)
    if sig == "grid-quantization":
        step = p.get("step", 0.05)
        return np.round(sample_surface(shape, n, rng, parts) / step) * step
    if sig == "surface-noise":
        pts = sample_surface(shape, n, rng, parts)
        noise = rng.normal(0.0, p.get("sigma", 0.03), size=pts.shape)
        k = int(p.get("correlation", 0))
        if k > 1:
            _, nbr = cKDTree(pts).query(pts, k=min(k, n))
            noise = noise[nbr].mean(axis=1) * math.sqrt(min(k, n))
        return pts + noise
    if sig == "density-bias":
        cand = sample_surface(shape, OVERSAMPLE * n, rng, parts)
        axis = int(p.get("axis", 0))
        c = cand[:, axis]
        u = (c - c.min()) / max(c.max() - c.min(), 1e-12)
        w = (u + 0.02) ** p.get("exponent", 2.0)
        idx = rng.choice(len(cand), size=n, replace=False, p=w / w.sum())
        return cand[idx]
    if sig == "dropout-patches":
        cand = sample_surface(shape, OVERSAMPLE * n, rng, parts)
        # patch centres belong to the source, not the cloud
        centers = sample_surface(shape, int(p.get("count", 3)), make_rng(spec.seed), parts)
        d = np.min(np.linalg.norm(cand[:, None, :] - centers[None], axis=2), axis=1)
        keep = cand[d > p.get("radius", 0.3)]
        if len(keep) < n:
            keep = cand[np.argsort(-d)[:n]]
        return keep[rng.choice(len(keep), size=n, replace=False)]
    if sig == "smoothing":
        pts = sample_surface(shape, n, rng, parts)
        k = min(int(p.get("neighbors", 8)), n)
        for _ in range(int(p.get("iterations", 3))):
            _, nbr = cKDTree(pts).query(pts, k=k)
            pts = pts[nbr].mean(axis=1)
        return pts
    if sig == "outliers":
        pts = sample_surface(shape, n, rng, parts)
        count = max(1, int(round(p.get("fraction", 0.1) * n)))
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = p.get("spread", 0.5) * (hi - lo) / 2
        idx = rng.choice(n, size=count, replace=False)
        pts[idx] = rng.uniform(lo - pad, hi + pad, size=(count, 3))
        return pts
    if sig == "clumping":
        pts = sample_surface(shape, n, rng, parts)
        k = min(int(p.get("clusters", 8)), n)
        sites = sample_surface(shape, k, make_rng(spec.seed), parts)
        owner = rng.integers(0, k, size=n)
        return sites[owner] + rng.normal(0.0, p.get("sigma", 0.02), size=pts.shape)
    raise SimulationError(f"unknown artifact signature {sig!r}")


def sample_cloud(
    spec: SimSourceSpec,
    shape: str,
    n: int,
    seed: int,
    label: Optional[SourceLabel] = None,
    variation: float = 1.0,
) -> PointCloud:
    """``n`` points from one instance of ``shape`` as produced by ``spec``."""
    if n < 8:
        raise SimulationError(f"need at least 8 points, got {n}")
    if shape not in SHAPES:
        raise SimulationError(f"unknown shape {shape!r}")
    # the instance depends on the seed alone, so every source draws the same object for a seed
    parts = _instance(shape, make_rng(seed), variation)
    rng = make_rng(int(seed) ^ (spec.seed * 0x9E3779B97F4A7C15 % 2**64))
    pts = _apply_signature(spec, parts, n, rng)
    return PointCloud(pts, source_label=label, shape_tag=shape, meta={"source": spec.name, "seed": int(seed)})


def separability(
    a: SimSourceSpec,
    b: SimSourceSpec,
    shape: str = "airplane",
    n: int = 256,
    pairs: int = 10,
    variation: float = 0.0,
) -> float:
    """Mean cross-source Chamfer distance over the larger within-source resample spread.

    Both sources draw ``2 * pairs`` clouds on shared instance seeds. The cross
    term averages CD(a_i, b_i); the spread of a source is the standard
    deviation of CD between its consecutive resamples (i, i+1).
    """
    seeds = range(2 * pairs)
    ca = [sample_cloud(a, shape, n, s, variation=variation).points for s in seeds]
    cb = [sample_cloud(b, shape, n, s, variation=variation).points for s in seeds]
    cross = float(np.mean([chamfer_distance(x, y) for x, y in zip(ca, cb)]))
    spread = max(
        float(np.std([chamfer_distance(c[i], c[i + 1]) for i in range(0, 2 * pairs, 2)])) for c in (ca, cb)
    )
    return cross / spread if spread > 0 else math.inf


# --- scenarios ----------------------------------------------------------------


@dataclass
class ScenarioConfig:
    """Which sources are known/unknown and which shapes are seen/unseen.

    ``clouds_per_cell`` clouds are generated for every (source, shape) pair.
    """

    known: Tuple[str, ...] = ("real", "lattice", "fuzzy", "clumpy")
    unknown: Tuple[str, ...] = DEFAULT_UNKNOWN
    seen_shapes: Tuple[str, ...] = ("airplane",)
    unseen_shapes: Tuple[str, ...] = ()
    clouds_per_cell: int = 200
    points: int = 64
    variation: float = 0.0
    train_ratio: float = 0.6
    validation_size: int = 100
    seed: int = 0
    sources: Tuple[SimSourceSpec, ...] = field(default_factory=lambda: tuple(default_sources()))

    def validate(self) -> None:
        names = {s.name for s in self.sources}
        for name in (*self.known, *self.unknown):
            if name not in names:
                raise SimulationError(f"unknown source {name!r}")
        for shape in (*self.seen_shapes, *self.unseen_shapes):
            if shape not in SHAPES:
                raise SimulationError(f"unknown shape {shape!r}")
        if set(self.known) & set(self.unknown):
            raise SimulationError("a source cannot be both known and unknown")
        if set(self.seen_shapes) & set(self.unseen_shapes):
            raise SimulationError("a shape cannot be both seen and unseen")
        if not self.known:
            raise SimulationError("at least one known source is required")
        if not self.seen_shapes:
            raise SimulationError("at least one seen shape is required")
        if not 0 < self.train_ratio < 1:
            raise SimulationError(f"train_ratio must be in (0, 1), got {self.train_ratio}")
        n_train = int(round(self.train_ratio * self.clouds_per_cell))
        if n_train < 1 or self.clouds_per_cell - n_train < 2:
            raise SimulationError(f"clouds_per_cell={self.clouds_per_cell} too small for a train/test split")
        if self.points < 8:
            raise SimulationError(f"points must be >= 8, got {self.points}")

    def spec(self, name: str) -> SimSourceSpec:
        for s in self.sources:
            if s.name == name:
                return s
        raise SimulationError(f"unknown source {name!r}")


@dataclass
class Dataset:
    """Clouds stacked as ``(N, n, 3)`` with integer labels (-1 for unknown sources)."""

    points: np.ndarray
    labels: np.ndarray
    sources: List[str]
    shapes: List[str]
    seeds: List[int]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return Dataset(
            self.points[idx],
            self.labels[idx],
            [self.sources[i] for i in idx],
            [self.shapes[i] for i in idx],
            [self.seeds[i] for i in idx],
        )

    def clouds(self, names: Sequence[str]) -> List[PointCloud]:
        out = []
        for p, y, src, shp in zip(self.points, self.labels, self.sources, self.shapes):
            label = SourceLabel.unknown() if y < 0 else SourceLabel.known(int(y), names[y])
            out.append(PointCloud(p, source_label=label, shape_tag=shp, meta={"source": src}))
        return out

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Dataset(np.zeros((0, 0, 3)), np.zeros(0, dtype=np.int64), [], [], [])
        return Dataset(
            np.concatenate([p.points for p in parts]),
            np.concatenate([p.labels for p in parts]),
            [s for p in parts for s in p.sources],
            [s for p in parts for s in p.shapes],
            [s for p in parts for s in p.seeds],
        )


@dataclass
class Scenario:
    config: ScenarioConfig
    train: Dataset
    validation: Dataset
    test: Dataset

    @property
    def known_names(self) -> List[str]:
        return list(self.config.known)


def cloud_seed(base: int, source_index: int, shape: str, i: int) -> int:
    """Instance seed shared by every source for the i-th cloud of a shape."""
    del source_index
    return int(base) * 1_000_003 + SHAPES.index(shape) * 100_003 + i


def _generate(config: ScenarioConfig, source: str, shape: str, label: int) -> Dataset:
    spec = config.spec(source)
    seeds = [cloud_seed(config.seed, 0, shape, i) for i in range(config.clouds_per_cell)]
    pts = np.stack([sample_cloud(spec, shape, config.points, s, variation=config.variation).points for s in seeds])
    k = len(seeds)
    return Dataset(pts, np.full(k, label, dtype=np.int64), [source] * k, [shape] * k, seeds)


def build_scenario(config: ScenarioConfig) -> Scenario:
    """Generate every (source, shape) cell and split it.

    Each cell is shuffled and cut ``train_ratio`` / rest. Unknown sources and
    unseen shapes keep only their held-out part. A validation set of about
    ``validation_size`` clouds is carved from the seen-shape held-out parts,
    proportionally per cell; everything else held out is test.
    """
    config.validate()
    rng = make_rng(config.seed)
    train_parts, held_parts = [], []
    label_of = {name: k for k, name in enumerate(config.known)}
    for source in (*config.known, *config.unknown):
        for shape in (*config.seen_shapes, *config.unseen_shapes):
            cell = _generate(config, source, shape, label_of.get(source, -1))
            order = rng.permutation(len(cell))
            n_train = int(round(config.train_ratio * len(cell)))
            if source in label_of and shape in config.seen_shapes:
                train_parts.append(cell.subset(np.sort(order[:n_train])))
            held_parts.append((shape in config.seen_shapes, cell.subset(np.sort(order[n_train:]))))
    seen_total = sum(len(d) for seen, d in held_parts if seen)
    frac = min(1.0, config.validation_size / seen_total) if seen_total else 0.0
    val_parts, test_parts = [], []
    for seen, held in held_parts:
        n_val = int(round(frac * len(held))) if seen else 0
        if seen and len(held) - n_val < 1:
            raise SimulationError("validation carve-out leaves an empty test cell")
        order = rng.permutation(len(held))
        val_parts.append(held.subset(np.sort(order[:n_val])))
        test_parts.append(held.subset(np.sort(order[n_val:])))
    return Scenario(config, Dataset.concat(train_parts), Dataset.concat(val_parts), Dataset.concat(test_parts))
