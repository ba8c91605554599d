"""Object maps (SLIC superpixels) and instance maps (connected components).

Both kinds are integer label images whose labels are contiguous in
``[0, n)``: every pixel belongs to exactly one object and every label in
range is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _cc_graph

from .autograd.ops import ConfigurationError


@dataclass(frozen=True)
class ObjectMap:
    labels: np.ndarray

    @property
    def n_objects(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def validate(self) -> None:
        """Check the partition invariants; raise ``ValueError`` if violated."""
        lab = self.labels
        if lab.ndim != 2 or not np.issubdtype(lab.dtype, np.integer):
            raise ValueError(f"label map must be a 2-d integer image, got {lab.dtype} {lab.shape}")
        if lab.size == 0:
            raise ValueError("empty label map")
        if lab.min() < 0:
            raise ValueError("negative labels")
        counts = np.bincount(lab.ravel())
        if np.any(counts == 0):
            raise ValueError(f"labels not contiguous: missing {np.flatnonzero(counts == 0)[:5]}")


@dataclass(frozen=True)
class InstanceMap(ObjectMap):
    @property
    def n_instances(self) -> int:
        return self.n_objects


def relabel_first_occurrence(labels: np.ndarray) -> np.ndarray:
    """Renumber labels 0..n-1 in raster order of first appearance."""
    flat = labels.ravel()
    uniq, first, inv = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    return rank[inv].reshape(labels.shape).astype(np.int32)


def relabel_sorted(labels: np.ndarray) -> np.ndarray:
    """Renumber labels 0..n-1 preserving their relative order."""
    _, inv = np.unique(labels.ravel(), return_inverse=True)
    return inv.reshape(labels.shape).astype(np.int32)


def _edges4(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(h * w).reshape(h, w)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    return a, b


def _component_ids(label_image: np.ndarray) -> tuple[int, np.ndarray]:
    h, w = label_image.shape
    flat = label_image.ravel()
    a, b = _edges4(h, w)
    same = flat[a] == flat[b]
    graph = coo_matrix((np.ones(int(same.sum()), dtype=np.int8), (a[same], b[same])), shape=(h * w, h * w))
    return _cc_graph(graph, directed=False)


def connected_components(label_image: np.ndarray, connectivity: int = 4) -> InstanceMap:
    """Split a label image into 4-connected regions of equal value."""
    if connectivity != 4:
        raise ConfigurationError("only 4-connectivity is supported")
    lab = np.asarray(label_image)
    if lab.ndim != 2:
        raise ConfigurationError(f"expected a 2-d label image, got shape {lab.shape}")
    _, comp = _component_ids(lab)
    return InstanceMap(relabel_first_occurrence(comp.reshape(lab.shape)))


# ---------------------------------------------------------------------------
# SLIC


def _as_unit_rgb(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ConfigurationError(f"expected an HxWx3 image, got shape {img.shape}")
    if np.issubdtype(img.dtype, np.integer):
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def _grid_shape(h: int, w: int, n: int) -> tuple[int, int]:
    gh = max(1, min(h, int(round(math.sqrt(n * h / w)))))
    gw = max(1, min(w, int(round(n / gh))))
    return gh, gw


def slic_centers(image: np.ndarray, n_segments: int, jitter: float = 0.0, seed: int = 0) -> np.ndarray:
    """Grid-initialised cluster centres as rows ``(y, x, r, g, b)``."""
    img = _as_unit_rgb(image)
    h, w, _ = img.shape
    gh, gw = _grid_shape(h, w, n_segments)
    ys = (np.arange(gh) + 0.5) * (h / gh) - 0.5
    xs = (np.arange(gw) + 0.5) * (w / gw) - 0.5
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    cy, cx = cy.ravel(), cx.ravel()
    if jitter > 0:
        rng = np.random.default_rng(seed)
        cy = np.clip(cy + rng.uniform(-jitter, jitter, cy.shape), 0, h - 1)
        cx = np.clip(cx + rng.uniform(-jitter, jitter, cx.shape), 0, w - 1)
    iy = np.clip(np.rint(cy).astype(int), 0, h - 1)
    ix = np.clip(np.rint(cx).astype(int), 0, w - 1)
    return np.column_stack([cy, cx, img[iy, ix]])


def slic_assign(img: np.ndarray, centers: np.ndarray, step: float, compactness: float,
                radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Assign each pixel to the closest centre inside a box of half-size ``radius``.

    Distance is ``sqrt(d_color^2 + (d_xy / step)^2 * compactness^2)``.
    Returns ``(labels, distance)``; pixels reached by no window get -1.
    """
    h, w, _ = img.shape
    labels = np.full((h, w), -1, dtype=np.int64)
    best = np.full((h, w), np.inf)
    spatial_w = (compactness / step) ** 2
    r = int(math.ceil(radius))
    for k, (cy, cx, *col) in enumerate(centers):
        y0, y1 = max(0, int(math.floor(cy)) - r), min(h, int(math.ceil(cy)) + r + 1)
        x0, x1 = max(0, int(math.floor(cx)) - r), min(w, int(math.ceil(cx)) + r + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        patch = img[y0:y1, x0:x1]
        dc = ((patch - np.asarray(col)) ** 2).sum(axis=2)
        yy = (np.arange(y0, y1) - cy) ** 2
        xx = (np.arange(x0, x1) - cx) ** 2
        d = dc + spatial_w * (yy[:, None] + xx[None, :])
        sub = best[y0:y1, x0:x1]
        better = d < sub
        sub[better] = d[better]
        labels[y0:y1, x0:x1][better] = k
    return labels, np.sqrt(best)


def _update_centers(img: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> np.ndarray:
    h, w, _ = img.shape
    k = len(centers)
    flat = labels.ravel()
    ok = flat >= 0
    lab = flat[ok]
    counts = np.bincount(lab, minlength=k).astype(np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    feats = np.column_stack([yy.ravel(), xx.ravel(), img.reshape(-1, 3)])[ok]
    sums = np.zeros((k, 5))
    for j in range(5):
        sums[:, j] = np.bincount(lab, weights=feats[:, j], minlength=k)
    new = centers.copy()
    nz = counts > 0
    new[nz] = sums[nz] / counts[nz, None]
    return new


def _merge_small(labels: np.ndarray, min_size: int, max_count: int) -> np.ndarray:
    """Split labels into 4-connected pieces and fold small pieces into the
    neighbour they share the longest border with."""
    h, w = labels.shape
    n, comp = _component_ids(labels)
    sizes = np.bincount(comp, minlength=n)
    a, b = _edges4(h, w)
    ca, cb = comp[a], comp[b]
    diff = ca != cb
    pairs = np.concatenate([np.column_stack([ca[diff], cb[diff]]), np.column_stack([cb[diff], ca[diff]])])
    if len(pairs):
        uniq, border = np.unique(pairs, axis=0, return_counts=True)
    else:
        uniq, border = np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    neighbours: dict[int, list[tuple[int, int]]] = {}
    for (p, q), c in zip(uniq.tolist(), border.tolist()):
        neighbours.setdefault(p, []).append((q, c))

    parent = np.arange(n)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    merged_size = sizes.astype(np.int64).copy()
    alive = n
    order = np.lexsort((np.arange(n), sizes))
    for i in order.tolist():
        root = find(i)
        if merged_size[root] >= min_size and alive <= max_count:
            continue
        # dominant neighbour = longest shared border, ties to the lower id
        score: dict[int, int] = {}
        for q, c in neighbours.get(i, ()):
            rq = find(q)
            if rq != root:
                score[rq] = score.get(rq, 0) + c
        if not score:
            continue
        target = min(score, key=lambda r: (-score[r], r))
        parent[root] = target
        merged_size[target] += merged_size[root]
        alive -= 1
    roots = np.array([find(i) for i in range(n)])
    return roots[comp].reshape(h, w)


def slic(image: np.ndarray, n_segments: int, compactness: float = 0.1, iters: int = 10,
         seed: int = 0, enforce_connectivity: bool = True, jitter: float = 0.0) -> ObjectMap:
    """Superpixel segmentation by simple linear iterative clustering.

    Colour distance is Euclidean in RGB scaled to [0, 1]; spatial distance
    is normalised by the grid step ``S = sqrt(HW / n_segments)``. After the
    final assignment, 4-connected fragments smaller than ``S^2 / 4`` are
    merged into their dominant neighbour. ``seed`` only matters when
    ``jitter`` perturbs the initial grid.
    """
    if n_segments < 1 or iters < 1:
        raise ConfigurationError("n_segments and iters must be >= 1")
    img = _as_unit_rgb(image)
    h, w, _ = img.shape
    if n_segments > h * w:
        raise ConfigurationError(f"n_segments={n_segments} exceeds pixel count {h * w}")
    step = math.sqrt(h * w / n_segments)
    centers = slic_centers(img, n_segments, jitter=jitter, seed=seed)
    gh, gw = _grid_shape(h, w, n_segments)
    radius = 2.0 * max(h / gh, w / gw)
    labels = None
    for _ in range(iters):
        labels, _ = slic_assign(img, centers, step, compactness, radius)
        centers = _update_centers(img, labels, centers)
    assert labels is not None
    if np.any(labels < 0):  # unreachable with radius >= 2 grid steps, kept as a guard
        labels[labels < 0] = 0
    if enforce_connectivity:
        labels = _merge_small(labels, max(1, int(step * step / 4)), 2 * n_segments)
    return ObjectMap(relabel_first_occurrence(labels))


def multiscale_objects(image: np.ndarray, scales: Sequence[int], **kwargs) -> list[ObjectMap]:
    if len(scales) < 1:
        raise ConfigurationError("need at least one scale")
    return [slic(image, int(s), **kwargs) for s in scales]


def downsample_map(m: ObjectMap, target_h: int, target_w: int) -> ObjectMap:
    """Nearest-neighbour resample (pixel centres), then contiguous relabel.

    Objects too small to be sampled at the coarse grid disappear.
    """
    h, w = m.shape
    if target_h <= 0 or target_w <= 0:
        raise ConfigurationError("target dimensions must be positive")
    if target_h > h or target_w > w:
        raise ConfigurationError(f"target {target_h}x{target_w} larger than source {h}x{w}")
    return type(m)(relabel_sorted(downsample_labels(m.labels, target_h, target_w)))


def downsample_labels(labels: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbour sampling of raw labels (no relabelling)."""
    h, w = labels.shape
    ys = np.minimum(((np.arange(target_h) + 0.5) * (h / target_h)).astype(int), h - 1)
    xs = np.minimum(((np.arange(target_w) + 0.5) * (w / target_w)).astype(int), w - 1)
    return labels[np.ix_(ys, xs)]
