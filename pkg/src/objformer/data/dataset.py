"""On-disk dataset layout, manifest and batch assembly.

Layout::

    <root>/manifest.json
    <root>/pairs/<id>/osm.ppm  opt.ppm  y_osm.pgm  y_bcd.pgm  [y_opt.pgm]
    <root>/pairs/<id>/inst.pgm  obj_<scale>.pgm      (16-bit)

``y_opt.pgm`` holds the full optical land cover and only exists for
synthetic data.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ..net.model import Batch
from ..segmentation import InstanceMap, ObjectMap, connected_components, downsample_map
from . import netpbm
from .sample import SamplePair

FORMAT_VERSION = 1
BASEMAP_LIMIT = 0.8
MEAN, STD = 0.5, 0.25


@dataclass
class SampleRecord:
    id: str
    split: str = "train"
    region: str = "synthetic"
    shape: tuple[int, int] = (0, 0)
    files: dict[str, str] = field(default_factory=dict)
    object_scales: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"id": self.id, "split": self.split, "region": self.region, "shape": list(self.shape),
                "files": dict(self.files), "object_scales": list(self.object_scales)}

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(d["id"], d.get("split", "train"), d.get("region", "synthetic"), tuple(d["shape"]),
                   dict(d["files"]), [int(s) for s in d.get("object_scales", [])])


@dataclass
class DatasetManifest:
    records: list[SampleRecord] = field(default_factory=list)
    version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps({"version": self.version, "samples": [r.to_dict() for r in self.records]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('version')!r}")
        return cls([SampleRecord.from_dict(r) for r in d["samples"]], d["version"])

    def split(self, name: Optional[str]) -> list[SampleRecord]:
        return [r for r in self.records if name is None or r.split == name]

    def validate(self, root: os.PathLike) -> None:
        """Every referenced file exists and has the recorded spatial shape."""
        root = Path(root)
        for r in self.records:
            for key, rel in r.files.items():
                p = root / rel
                if not p.is_file():
                    raise ValueError(f"{r.id}: missing {key} file {p}")
                arr = netpbm.read(p)
                if tuple(arr.shape[:2]) != tuple(r.shape):
                    raise ValueError(f"{r.id}: {key} has shape {arr.shape[:2]}, manifest says {r.shape}")


def save_sample(s: SamplePair, root: os.PathLike, split: str = "train", region: str = "synthetic") -> SampleRecord:
    root = Path(root)
    rel = Path("pairs") / s.id
    (root / rel).mkdir(parents=True, exist_ok=True)
    files = {}

    def put(key, name, arr, maxval=None):
        netpbm.write(root / rel / name, arr, maxval)
        files[key] = str(rel / name)

    put("osm", "osm.ppm", s.x_osm)
    put("opt", "opt.ppm", s.x_opt)
    put("y_osm", "y_osm.pgm", s.y_osm)
    put("y_bcd", "y_bcd.pgm", s.y_bcd)
    if s.y_opt_full is not None:
        put("y_opt", "y_opt.pgm", s.y_opt_full)
    if s.instance_map is not None:
        put("inst", "inst.pgm", s.instance_map.labels, 65535)
    for scale in sorted(s.object_maps):
        put(f"obj_{scale}", f"obj_{scale}.pgm", s.object_maps[scale].labels, 65535)
    return SampleRecord(s.id, split, region, tuple(s.shape), files, sorted(int(k) for k in s.object_maps))


def load_sample(rec: SampleRecord, root: os.PathLike) -> SamplePair:
    root = Path(root)

    def get(key):
        return netpbm.read(root / rec.files[key]) if key in rec.files else None

    inst = get("inst")
    return SamplePair(
        x_osm=get("osm"),
        x_opt=get("opt"),
        y_osm=get("y_osm"),
        y_bcd=get("y_bcd"),
        y_opt_full=get("y_opt"),
        object_maps={sc: ObjectMap(get(f"obj_{sc}").astype(np.int32)) for sc in rec.object_scales},
        instance_map=None if inst is None else InstanceMap(inst.astype(np.int32)),
        id=rec.id,
    )


def save_dataset(samples: Iterable[tuple[SamplePair, str]], root: os.PathLike) -> DatasetManifest:
    """Write ``(sample, split)`` pairs and the manifest; returns the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    man = DatasetManifest([save_sample(s, root, split) for s, split in samples])
    write_manifest(man, root)
    return man


def write_manifest(man: DatasetManifest, root: os.PathLike) -> None:
    Path(root, "manifest.json").write_text(man.to_json())


def read_manifest(root: os.PathLike) -> DatasetManifest:
    return DatasetManifest.from_json(Path(root, "manifest.json").read_text())


def basemap_fraction(s: SamplePair) -> float:
    return float(np.mean(s.y_osm == 0))


def load_dataset(root: os.PathLike, split: Optional[str] = None, basemap_filter: bool = False) -> list[SamplePair]:
    """Load all samples of ``split``. With ``basemap_filter`` samples whose
    map is at least 80 % unmapped background are dropped."""
    man = read_manifest(root)
    out = [load_sample(r, root) for r in man.split(split)]
    if basemap_filter:
        out = [s for s in out if basemap_fraction(s) < BASEMAP_LIMIT]
    return out


# ---------------------------------------------------------------------------
# batches


@dataclass
class LabeledBatch:
    """Network inputs plus (B, H, W) targets."""

    x_osm: np.ndarray
    x_opt: np.ndarray
    instance_maps: list
    object_maps: list
    y_bcd: np.ndarray
    y_osm: np.ndarray
    y_opt_partial: np.ndarray
    y_opt_full: Optional[np.ndarray]

    def inputs(self) -> Batch:
        return Batch(self.x_osm, self.x_opt, self.instance_maps, self.object_maps)


def normalize(x: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 HWC (or BHWC) -> standardised NCHW floats."""
    x = (x.astype(dtype) / 255.0 - MEAN) / STD
    return np.moveaxis(x, -1, -3).astype(dtype, copy=False)


def stage_maps(labels: np.ndarray, strides: Sequence[int], kind=ObjectMap) -> list[np.ndarray]:
    h, w = labels.shape
    return [downsample_map(kind(labels), h // s, w // s).labels for s in strides]


def make_batch(samples: Sequence[SamplePair], scale: int, strides: Sequence[int], dtype=np.float32) -> LabeledBatch:
    """Stack samples, using object map ``scale`` to guide the optical branch."""
    inst, obj = [], []
    for s in samples:
        im = s.instance_map if s.instance_map is not None else connected_components(s.y_osm)
        inst.append(stage_maps(im.labels, strides, InstanceMap))
        obj.append(stage_maps(s.object_maps[scale].labels, strides))
    full = None
    if all(s.y_opt_full is not None for s in samples):
        full = np.stack([s.y_opt_full for s in samples]).astype(np.int64)
    return LabeledBatch(
        x_osm=normalize(np.stack([s.x_osm for s in samples]), dtype),
        x_opt=normalize(np.stack([s.x_opt for s in samples]), dtype),
        instance_maps=[np.stack([m[i] for m in inst]) for i in range(len(strides))],
        object_maps=[np.stack([m[i] for m in obj]) for i in range(len(strides))],
        y_bcd=np.stack([s.y_bcd for s in samples]).astype(np.int64),
        y_osm=np.stack([s.y_osm for s in samples]).astype(np.int64),
        y_opt_partial=np.stack([s.y_opt_partial for s in samples]).astype(np.int64),
        y_opt_full=full,
    )
