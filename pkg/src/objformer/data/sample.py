"""Paired samples, the land-cover palette and label construction."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..segmentation import InstanceMap, ObjectMap, connected_components

BACKGROUND = 255  # y_bcd sentinel

CLASS_NAMES = ("background", "bareland", "cropland", "vegetation", "water", "road", "building", "developed")
N_CLASSES_LCM = len(CLASS_NAMES) - 1


@dataclass(frozen=True)
class CategoryPalette:
    """Class id <-> flat colour used when rasterising map data."""

    colors: tuple[tuple[int, int, int], ...]
    names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if len(set(self.colors)) != len(self.colors) or len(self.colors) != len(self.names):
            raise ValueError("palette must be a bijection between class ids and colours")

    def render(self, labels: np.ndarray) -> np.ndarray:
        return np.asarray(self.colors, dtype=np.uint8)[labels]

    def decode(self, rgb: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`render`; unknown colours raise ``ValueError``."""
        key = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
        table = {(r << 16) | (g << 8) | b: i for i, (r, g, b) in enumerate(self.colors)}
        uniq, inv = np.unique(key, return_inverse=True)
        try:
            ids = np.array([table[int(k)] for k in uniq], dtype=np.uint8)
        except KeyError as e:
            raise ValueError(f"colour {int(e.args[0]):06x} is not in the palette") from None
        return ids[inv].reshape(key.shape)


MAP_PALETTE = CategoryPalette(
    colors=(
        (242, 239, 233),  # background: unedited base map
        (128, 0, 0),
        (75, 181, 73),
        (34, 97, 38),
        (0, 69, 255),
        (255, 255, 255),
        (222, 31, 7),
        (148, 148, 148),
    )
)


def generate_change_labels(y_osm: np.ndarray, y_opt_full: np.ndarray) -> np.ndarray:
    """Pixelwise XOR of map and image land cover: 0 same, 1 different,
    255 where the map has no category (background)."""
    y_osm, y_opt_full = np.asarray(y_osm), np.asarray(y_opt_full)
    if y_osm.shape != y_opt_full.shape:
        raise ValueError(f"shape mismatch {y_osm.shape} vs {y_opt_full.shape}")
    out = (y_osm != y_opt_full).astype(np.uint8)
    out[y_osm == 0] = BACKGROUND
    return out


def generate_partial_labels(y_osm: np.ndarray, y_bcd: np.ndarray) -> np.ndarray:
    """``(1 - y_bcd) * y_osm`` with background treated as unknown (0)."""
    y_osm, y_bcd = np.asarray(y_osm), np.asarray(y_bcd)
    if y_osm.shape != y_bcd.shape:
        raise ValueError(f"shape mismatch {y_osm.shape} vs {y_bcd.shape}")
    return np.where(y_bcd == 0, y_osm, 0).astype(np.uint8)


@dataclass
class SamplePair:
    x_osm: np.ndarray  # H x W x 3 uint8
    x_opt: np.ndarray  # H x W x 3 uint8
    y_osm: np.ndarray  # H x W uint8, 0 = background
    y_bcd: np.ndarray  # H x W uint8, {0, 1, 255}
    y_opt_full: Optional[np.ndarray] = None
    object_maps: dict[int, ObjectMap] = field(default_factory=dict)
    instance_map: Optional[InstanceMap] = None
    id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.y_osm.shape

    @property
    def y_opt_partial(self) -> np.ndarray:
        return generate_partial_labels(self.y_osm, self.y_bcd)

    def with_instance_map(self) -> "SamplePair":
        return replace(self, instance_map=connected_components(self.y_osm))


def check_invariants(s: SamplePair) -> None:
    """Raise ``ValueError`` listing every violated sample invariant."""
    errs = []
    h, w = s.shape
    for name in ("x_osm", "x_opt"):
        a = getattr(s, name)
        if a.shape != (h, w, 3):
            errs.append(f"{name} shape {a.shape} != {(h, w, 3)}")
    if s.y_bcd.shape != (h, w):
        errs.append(f"y_bcd shape {s.y_bcd.shape}")
    else:
        if not np.isin(s.y_bcd, (0, 1, BACKGROUND)).all():
            errs.append("y_bcd has values outside {0, 1, 255}")
        if not np.array_equal(s.y_bcd == BACKGROUND, s.y_osm == 0):
            errs.append("y_bcd background does not coincide with y_osm == 0")
        partial = s.y_opt_partial
        if not (np.array_equal(partial[s.y_bcd == 0], s.y_osm[s.y_bcd == 0]) and np.all(partial[s.y_bcd != 0] == 0)):
            errs.append("partial labels inconsistent")
    if s.y_osm.max(initial=0) > N_CLASSES_LCM:
        errs.append("y_osm class out of range")
    if s.y_opt_full is not None:
        if s.y_opt_full.shape != (h, w):
            errs.append("y_opt_full shape")
        elif not np.array_equal(generate_change_labels(s.y_osm, s.y_opt_full), s.y_bcd):
            errs.append("y_bcd disagrees with generate_change_labels(y_osm, y_opt_full)")
    for scale, om in s.object_maps.items():
        try:
            if om.shape != (h, w):
                raise ValueError(f"shape {om.shape}")
            om.validate()
        except ValueError as e:
            errs.append(f"object map {scale}: {e}")
    if s.instance_map is not None:
        try:
            if s.instance_map.shape != (h, w):
                raise ValueError(f"shape {s.instance_map.shape}")
            s.instance_map.validate()
        except ValueError as e:
            errs.append(f"instance map: {e}")
    if errs:
        raise ValueError(f"sample {s.id!r}: " + "; ".join(errs))
