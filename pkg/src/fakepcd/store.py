"""On-disk datasets (pcda files plus a manifest CSV) and per-run JSON manifests."""

from __future__ import annotations

import csv
import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .pointcloud import PointCloud, read_point_cloud, write_point_cloud
from .simsource import Dataset, Scenario

MANIFEST_CSV = "manifest.csv"
MANIFEST_FIELDS = ("path", "source", "shape", "split", "label", "seed")
RUN_MANIFEST = "run.json"


class StoreError(ValueError):
    pass


def write_dataset_dir(scenario: Scenario, root: Path) -> List[Path]:
    """Write every split as ``<split>/<source>/<shape>_<seed>.pcda`` and index them in manifest.csv."""
    root = Path(root)
    rows, written = [], []
    for split in ("train", "validation", "test"):
        data: Dataset = getattr(scenario, split)
        for pts, label, source, shape, seed in zip(data.points, data.labels, data.sources, data.shapes, data.seeds):
            rel = Path(split) / source / f"{shape}_{seed}.pcda"
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            write_point_cloud(PointCloud(pts), root / rel)
            written.append(root / rel)
            rows.append((rel.as_posix(), source, shape, split, int(label), int(seed)))
    with open(root / MANIFEST_CSV, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    written.append(root / MANIFEST_CSV)
    return written


@dataclass
class StoredData:
    """A dataset directory read back: per split, a Dataset and the file paths behind it."""

    root: Path
    known: List[str]
    splits: Dict[str, Dataset] = field(default_factory=dict)
    paths: Dict[str, List[str]] = field(default_factory=dict)

    def split(self, name: str) -> Dataset:
        if name not in self.splits or len(self.splits[name]) == 0:
            raise StoreError(f"{self.root}: no {name!r} split in the dataset")
        return self.splits[name]


def read_dataset_dir(root: Path) -> StoredData:
    root = Path(root)
    index = root / MANIFEST_CSV
    if not index.is_file():
        raise StoreError(f"{root}: missing {MANIFEST_CSV}")
    with open(index, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise StoreError(f"{index}: expected columns {','.join(MANIFEST_FIELDS)}")
        rows = list(reader)
    known: Dict[int, str] = {}
    grouped: Dict[str, list] = {}
    for row in rows:
        label = int(row["label"])
        if label >= 0:
            if known.setdefault(label, row["source"]) != row["source"]:
                raise StoreError(f"{index}: label {label} used by two sources")
        grouped.setdefault(row["split"], []).append(row)
    if sorted(known) != list(range(len(known))):
        raise StoreError(f"{index}: known labels must be 0..K-1")
    out = StoredData(root, [known[k] for k in range(len(known))])
    for split, items in grouped.items():
        clouds = [read_point_cloud(root / r["path"]).points for r in items]
        if len({len(c) for c in clouds}) != 1:
            raise StoreError(f"{root}: split {split!r} mixes point counts")
        out.splits[split] = Dataset(
            np.stack(clouds),
            np.array([int(r["label"]) for r in items], dtype=np.int64),
            [r["source"] for r in items],
            [r["shape"] for r in items],
            [int(r["seed"]) for r in items],
        )
        out.paths[split] = [r["path"] for r in items]
    return out


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: str
    seeds: Dict[str, int]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    notes: Dict[str, object] = field(default_factory=dict)
    tool_version: str = __version__
    threads: Optional[int] = None
    started: float = field(default_factory=time.time)
    wall_clock_seconds: float = 0.0

    def finish(self, out_dir: Path) -> Path:
        self.wall_clock_seconds = round(time.time() - self.started, 3)
        out_dir = Path(out_dir)
        self.outputs = sorted(self.outputs)
        payload = {
            "command": self.command,
            "argv": self.argv,
            "config": self.config.splitlines(),
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "notes": self.notes,
            "tool_version": self.tool_version,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "threads": self.threads,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(self.started)),
            "wall_clock_seconds": self.wall_clock_seconds,
        }
        path = out_dir / RUN_MANIFEST
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        return path


def read_run_manifest(path: Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StoreError(f"cannot read run manifest {path}: {exc}") from None
    if "argv" not in data or not isinstance(data["argv"], list):
        raise StoreError(f"{path}: no argv recorded")
    return data


def write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    """CSV with floats in round-trip repr so reruns compare value-exactly."""

    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        return v

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
