"""Geometric augmentation, registration-error simulation and guiding maps."""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Optional, Sequence

import numpy as np

from ..autograd.ops import ConfigurationError
from ..segmentation import ObjectMap, connected_components, relabel_first_occurrence, slic
from .sample import SamplePair

DIRECTIONS = ("horizontal", "vertical", "diag45")
REFERENCE_AREA = 512 * 512


def segments_for(scale: int, h: int, w: int) -> int:
    """Superpixel count giving the same object density as ``scale`` objects
    on a 512 x 512 image."""
    return max(1, min(h * w, int(round(scale * h * w / REFERENCE_AREA))))


def attach_maps(s: SamplePair, scales: Sequence[int] = (1500,), **slic_kwargs) -> SamplePair:
    """Compute the instance map of ``y_osm`` and one SLIC object map of
    ``x_opt`` per nominal scale."""
    h, w = s.shape
    maps = {int(sc): slic(s.x_opt, segments_for(int(sc), h, w), **slic_kwargs) for sc in scales}
    return replace(s, object_maps=maps, instance_map=connected_components(s.y_osm))


def map_fields(s: SamplePair, fn: Callable[[np.ndarray], np.ndarray]) -> SamplePair:
    """Apply one spatial transform to every raster, label and guiding map.

    Guiding maps are renumbered afterwards (a crop can drop objects) and the
    instance map is recomputed, since a crop may split an instance.
    """
    objs = {k: ObjectMap(relabel_first_occurrence(fn(m.labels))) for k, m in s.object_maps.items()}
    y_osm = np.ascontiguousarray(fn(s.y_osm))
    return replace(
        s,
        x_osm=np.ascontiguousarray(fn(s.x_osm)),
        x_opt=np.ascontiguousarray(fn(s.x_opt)),
        y_osm=y_osm,
        y_bcd=np.ascontiguousarray(fn(s.y_bcd)),
        y_opt_full=None if s.y_opt_full is None else np.ascontiguousarray(fn(s.y_opt_full)),
        object_maps=objs,
        instance_map=None if s.instance_map is None else connected_components(y_osm),
    )


def hflip(s: SamplePair) -> SamplePair:
    return map_fields(s, lambda a: a[:, ::-1])


def vflip(s: SamplePair) -> SamplePair:
    return map_fields(s, lambda a: a[::-1])


def rot90(s: SamplePair, k: int = 1) -> SamplePair:
    return map_fields(s, lambda a: np.rot90(a, k, axes=(0, 1)))


def crop(s: SamplePair, top: int, left: int, size_h: int, size_w: int) -> SamplePair:
    h, w = s.shape
    if size_h <= 0 or size_w <= 0 or top < 0 or left < 0 or top + size_h > h or left + size_w > w:
        raise ConfigurationError(f"crop {size_h}x{size_w}+{top}+{left} does not fit a {h}x{w} sample")
    return map_fields(s, lambda a: a[top : top + size_h, left : left + size_w])


def augment(s: SamplePair, seed, crop_size: Optional[int] = None) -> SamplePair:
    """Random crop (if ``crop_size``), horizontal/vertical flips and a
    rotation by a multiple of 90 degrees, shared by all fields."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = s.shape
    if crop_size is not None:
        if crop_size > min(h, w):
            raise ConfigurationError(f"crop size {crop_size} larger than sample {h}x{w}")
        top, left = int(rng.integers(0, h - crop_size + 1)), int(rng.integers(0, w - crop_size + 1))
        s = crop(s, top, left, crop_size, crop_size)
    if rng.random() < 0.5:
        s = hflip(s)
    if rng.random() < 0.5:
        s = vflip(s)
    k = int(rng.integers(0, 4))
    if k:
        s = rot90(s, k)
    return s


def shift_replicate(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[i, j] = a[clip(i - dy), clip(j - dx)]`` (edge replication)."""
    h, w = a.shape[:2]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return a[np.ix_(ys, xs)]


def offset_vector(offset_px: int, direction: str) -> tuple[int, int]:
    if direction == "horizontal":
        return 0, offset_px
    if direction == "vertical":
        return offset_px, 0
    if direction == "diag45":
        return offset_px, offset_px
    raise ConfigurationError(f"unknown direction {direction!r}; expected one of {DIRECTIONS}")


def apply_registration_offset(s: SamplePair, offset_px: int, direction: str = "horizontal") -> SamplePair:
    """Translate the optical raster relative to the map by ``offset_px``.

    Labels stay in map geometry. The optical object maps travel with the
    optical raster, as if segmentation had been run on the shifted image.
    """
    dy, dx = offset_vector(int(offset_px), direction)
    h, w = s.shape
    if offset_px < 0:
        raise ConfigurationError("offset must be >= 0")
    if offset_px >= min(h, w):
        raise ConfigurationError(f"offset {offset_px} >= min sample side {min(h, w)}")
    if offset_px == 0:
        return s
    objs = {k: ObjectMap(relabel_first_occurrence(shift_replicate(m.labels, dy, dx)))
            for k, m in s.object_maps.items()}
    return replace(s, x_opt=shift_replicate(s.x_opt, dy, dx), object_maps=objs)


def random_registration(s: SamplePair, rng: np.random.Generator, max_offset: int) -> SamplePair:
    """Training-time misregistration: random offset and direction."""
    if max_offset <= 0:
        return s
    off = int(rng.integers(0, max_offset + 1))
    return apply_registration_offset(s, off, DIRECTIONS[int(rng.integers(0, 3))])
