"""Synthetic paired samples: a flat-colour map raster and a textured
"optical" raster of a partly changed copy of the same layout.

A layout is a stack of shapes (a base fill, then rectangles, ellipses and
road bands painted in order), each carrying a land-cover class. Layout A
is rendered with the map palette; layout B changes the class of a
``change_rate`` fraction of the shapes and is rendered with per-class base
colours, Gaussian noise and per-shape brightness jitter.
"""

from __future__ import annotations

import numpy as np

from ..autograd.ops import ConfigurationError
from .sample import MAP_PALETTE, N_CLASSES_LCM, SamplePair, generate_change_labels

# optical appearance per class id (index 0 unused: background has real content).
# Base colours are spaced so that, under the brightness jitter below, a
# shape's mean colour identifies its class for more than 99 % of shapes;
# otherwise some changes would be invisible in the optical image.
OPTICAL_COLORS = np.array(
    [
        (0, 0, 0),
        (196, 164, 112),  # bareland
        (150, 190, 80),  # cropland
        (40, 100, 45),  # vegetation
        (35, 65, 120),  # water
        (96, 96, 100),  # road
        (200, 80, 64),  # building
        (206, 200, 212),  # developed
    ],
    dtype=np.float64,
)
JITTER = 0.08  # std of the per-shape multiplicative brightness jitter
NOISE = 12.0  # std of the per-pixel Gaussian noise (8-bit units)

ROAD, CROPLAND = 5, 2


def _paint_shapes(rng: np.random.Generator, h: int, w: int, n_shapes: int) -> np.ndarray:
    """Shape-id image: 0 is the base fill, ``1..n_shapes`` painted on top."""
    ids = np.zeros((h, w), dtype=np.int32)
    yy, xx = np.mgrid[0:h, 0:w]
    scale = min(h, w)
    for sid in range(1, n_shapes + 1):
        kind = rng.choice(3, p=(0.45, 0.35, 0.2))
        if kind == 0:  # axis-aligned rectangle
            rh, rw = rng.integers(max(2, scale // 8), max(3, scale // 3), size=2)
            y0, x0 = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
            mask = (yy >= y0) & (yy < y0 + rh) & (xx >= x0) & (xx < x0 + rw)
        elif kind == 1:  # ellipse
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            ry, rx = rng.uniform(scale / 12, scale / 5, size=2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:  # straight road band
            theta = rng.uniform(0, np.pi)
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            half = rng.uniform(1.0, max(1.5, scale / 24))
            mask = np.abs((yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta)) <= half
        ids[mask] = sid
    return ids


def _other_class(rng: np.random.Generator, c: int) -> int:
    k = int(rng.integers(1, N_CLASSES_LCM))
    return k if k < c else k + 1


def synth_layouts(seed: int, h: int, w: int, n_shapes: int = 8, change_rate: float = 0.3,
                  background_fraction: float = 0.0):
    """Return (shape ids, classes in A, classes in B) for one sample.

    Roads get the road class; other shapes a random foreground class.
    ``round(change_rate * n)`` of the ``n = n_shapes + 1`` shapes (painted
    shapes first, then the base) receive a different class in B. Before
    that, ``round(background_fraction * n_shapes)`` painted shapes are made
    unmapped (class 0) in A; those are never counted as changes.
    """
    if h < 4 or w < 4:
        raise ConfigurationError(f"degenerate sample size {h}x{w}")
    if n_shapes < 0:
        raise ConfigurationError("n_shapes must be >= 0")
    if not 0.0 <= change_rate <= 1.0 or not 0.0 <= background_fraction <= 1.0:
        raise ConfigurationError("change_rate and background_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    ids = _paint_shapes(rng, h, w, n_shapes)
    cls_b = rng.integers(1, N_CLASSES_LCM + 1, size=n_shapes + 1)
    cls_a = cls_b.copy()
    n_bg = int(round(background_fraction * n_shapes))
    unmapped = (rng.permutation(n_shapes) + 1)[:n_bg]
    mapped = np.setdiff1d(np.arange(1, n_shapes + 1), unmapped)
    order = np.concatenate([rng.permutation(mapped), [0]]).astype(int)
    n_change = min(len(order), int(round(change_rate * (n_shapes + 1))))
    for sid in order[:n_change]:
        cls_a[sid] = _other_class(rng, int(cls_b[sid]))
    cls_a[unmapped] = 0
    return ids, cls_a, cls_b, rng


def render_optical(rng: np.random.Generator, ids: np.ndarray, classes: np.ndarray,
                   texture_strength: float = 1.0) -> np.ndarray:
    h, w = ids.shape
    n = len(classes)
    base = OPTICAL_COLORS[classes]  # (n, 3)
    jitter = 1.0 + JITTER * texture_strength * rng.standard_normal(n)
    img = base[ids] * jitter[ids][..., None]
    yy, xx = np.mgrid[0:h, 0:w]
    crop = classes[ids] == CROPLAND
    if crop.any():
        stripes = np.where(((yy + xx) // 2) % 2 == 0, 1.0, -1.0)
        img[crop] += (10.0 * texture_strength * stripes[crop])[:, None]
    img += NOISE * texture_strength * rng.standard_normal(img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_generate(seed: int, h: int = 64, w: int = 64, n_shapes: int = 8, change_rate: float = 0.3,
                   texture_strength: float = 1.0, background_fraction: float = 0.0, id: str = "") -> SamplePair:
    """One deterministic synthetic map/image pair (no guiding maps attached)."""
    ids, cls_a, cls_b, rng = synth_layouts(seed, h, w, n_shapes, change_rate, background_fraction)
    y_osm = cls_a[ids].astype(np.uint8)
    y_opt = cls_b[ids].astype(np.uint8)
    x_osm = MAP_PALETTE.render(y_osm)
    x_opt = render_optical(rng, ids, cls_b, texture_strength)
    return SamplePair(
        x_osm=x_osm,
        x_opt=x_opt,
        y_osm=y_osm,
        y_bcd=generate_change_labels(y_osm, y_opt),
        y_opt_full=y_opt,
        id=id or f"s{seed:06d}",
    )
