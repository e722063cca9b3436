"""Block-level scene classification and hypercolumn pixel segmentation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import SceneRaster, colorize, write_pgm, write_png
from .errors import InputError
from .features import LayerSelector, assemble_hypercolumns, capture_activations, descriptor_dim
from .net import Network
from .seeding import rng_for

log = logging.getLogger(__name__)


@dataclass
class LabelGrid:
    labels: np.ndarray  # [rows, cols] integer class or cluster index
    cell_size: int

    @property
    def rows(self) -> int:
        return self.labels.shape[0]

    @property
    def cols(self) -> int:
        return self.labels.shape[1]

    def write(self, path) -> None:
        if self.labels.max(initial=0) > 255:
            raise InputError("label grids with indices above 255 do not fit an 8-bit raster")
        write_pgm(self.labels.astype(np.uint8), path, maxval=255)

    def write_preview(self, path) -> None:
        write_png(colorize(self.labels), path)


def label_grid_shape(height: int, width: int, cell_size: int) -> tuple[int, int]:
    if cell_size < 1:
        raise InputError(f"cell size must be positive, got {cell_size}")
    return math.ceil(height / cell_size), math.ceil(width / cell_size)


def _band(scene) -> np.ndarray:
    return scene.band if isinstance(scene, SceneRaster) else np.asarray(scene, dtype=np.float32)


def block_windows(band: np.ndarray, block: int, context: int):
    """Yield ``((row, col), window)`` for every block; windows are reflect-padded at the borders."""
    h, w = band.shape
    rows, cols = label_grid_shape(h, w, block)
    half = context // 2
    padded = np.pad(band, context, mode="reflect")
    for r in range(rows):
        bh = min(block, h - r * block)
        cy = r * block + bh // 2
        for c in range(cols):
            bw = min(block, w - c * block)
            cx = c * block + bw // 2
            y0, x0 = cy - half + context, cx - half + context
            yield (r, c), padded[y0 : y0 + context, x0 : x0 + context]


def classify_scene_blocks(
    net: Network, scene, block: int = 16, context: int | None = None, chunk: int = 256
) -> LabelGrid:
    """Label every ``block``-square cell by classifying a context window centred on it."""
    band = _band(scene)
    s = net.spec.input_size
    context = s if context is None else context
    if context != s:
        raise InputError(f"context window {context} must equal the network input size {s}")
    if block < 1:
        raise InputError(f"block must be >= 1, got {block}")
    if band.shape[0] < block or band.shape[1] < block:
        raise InputError(f"scene {band.shape} is smaller than one {block}x{block} block")
    rows, cols = label_grid_shape(*band.shape, block)
    labels = np.empty(rows * cols, dtype=np.int64)
    buf = np.empty((chunk, 1, s, s), np.float32)
    filled, done = 0, 0
    for _, window in block_windows(band, block, context):
        buf[filled, 0] = window
        filled += 1
        if filled == chunk:
            labels[done : done + filled] = net.forward_batch(buf)[0].argmax(axis=1)
            done += filled
            filled = 0
    if filled:
        labels[done : done + filled] = net.forward_batch(buf[:filled])[0].argmax(axis=1)
    return LabelGrid(labels.reshape(rows, cols), block)


# ---------------------------------------------------------------------------
# Mini-batch K-means


@dataclass
class ClusterModel:
    centroids: np.ndarray  # [K, D] float64
    counts: np.ndarray  # [K] cumulative assignment counts
    inertia_trace: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 8192) -> np.ndarray:
    out = np.empty((len(x), len(c)))
    for i in range(0, len(x), chunk):
        diff = x[i : i + chunk, None, :] - c[None, :, :]
        out[i : i + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen[0]][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            j = int(rng.choice(n, p=closest / total))
        else:
            j = int(np.argmax(closest))  # every sample already coincides with a centre
        chosen.append(j)
        closest = np.minimum(closest, _sq_dists(x, x[j][None])[:, 0])
    return x[chosen].astype(np.float64)


def minibatch_kmeans_fit(
    samples: np.ndarray, K: int, batch_size: int = 1024, iterations: int = 100, seed: int = 0
) -> ClusterModel:
    """Mini-batch K-means with k-means++ seeding and per-centre 1/count learning rates.

    Assignments for a batch are made against the centroids at the start of
    that batch; each centroid then becomes the running mean of every sample
    ever assigned to it. ``inertia_trace[t]`` is the batch inertia measured at
    assignment time in iteration ``t``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise InputError(f"samples must be [N, D], got shape {x.shape}")
    n = len(x)
    if K < 2 or K > n:
        raise InputError(f"K={K} must lie in [2, {n}] for {n} samples")
    if batch_size < 1 or iterations < 0:
        raise InputError("batch_size must be >= 1 and iterations >= 0")
    rng = rng_for(seed, "mapping/kmeans")
    centroids = kmeans_plus_plus(x, K, rng)
    counts = np.zeros(K, dtype=np.int64)
    trace = []
    for _ in range(iterations):
        idx = np.arange(n) if batch_size >= n else rng.choice(n, size=batch_size, replace=False)
        batch = x[idx]
        d = _sq_dists(batch, centroids)
        assign = d.argmin(axis=1)
        trace.append(float(d[np.arange(len(batch)), assign].sum()))
        n_j = np.bincount(assign, minlength=K)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, batch)
        hit = n_j > 0
        rate = (n_j[hit] / (counts[hit] + n_j[hit]))[:, None]
        centroids[hit] += (sums[hit] / n_j[hit, None] - centroids[hit]) * rate
        counts += n_j
    return ClusterModel(centroids, counts, trace)


def kmeans_predict(model: ClusterModel, samples: np.ndarray) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.centroids.shape[1]:
        raise InputError(f"samples of shape {x.shape} do not match centroid dim {model.centroids.shape[1]}")
    return _sq_dists(x, model.centroids).argmin(axis=1)  # first index wins ties


def inertia(model: ClusterModel, samples: np.ndarray) -> float:
    d = _sq_dists(np.asarray(samples, dtype=np.float64), model.centroids)
    return float(d.min(axis=1).sum())


# ---------------------------------------------------------------------------
# Pixel segmentation


def _tiles(band: np.ndarray, size: int):
    h, w = band.shape
    ph, pw = (-h) % size, (-w) % size
    padded = np.pad(band, ((0, ph), (0, pw)), mode="reflect") if ph or pw else band
    for y in range(0, h, size):
        for x in range(0, w, size):
            yield (y, x), padded[y : y + size, x : x + size]


def _tile_descriptors(net: Network, tile: np.ndarray, sel: LayerSelector) -> np.ndarray:
    stack = capture_activations(net, tile[None].astype(np.float32))
    return assemble_hypercolumns(stack, sel).data  # [D, S, S]


def segment_pixels(
    net: Network,
    scene,
    sel: LayerSelector | None = None,
    K: int = 4,
    sample_stride: int = 4,
    seed: int = 0,
    batch_size: int = 1024,
    iterations: int = 200,
    normalize: bool = False,
) -> LabelGrid:
    """Cluster hypercolumn descriptors of every scene pixel into ``K`` groups.

    The scene is cut into non-overlapping network-sized tiles (bottom/right
    edges reflect-padded). K-means is fitted on pixels on a ``sample_stride``
    grid and then every pixel is assigned to its nearest centroid.
    ``normalize`` standardizes each descriptor channel with statistics of the
    fitted samples.
    """
    sel = sel or LayerSelector()
    if K < 2:
        raise InputError(f"segmentation needs K >= 2, got {K}")
    if sample_stride < 1:
        raise InputError(f"sample_stride must be >= 1, got {sample_stride}")
    descriptor_dim(net, sel)  # validates layer names against the architecture
    band = _band(scene)
    h, w = band.shape
    s = net.spec.input_size

    samples = []
    for (y, x), tile in _tiles(band, s):
        desc = _tile_descriptors(net, tile, sel)
        ys = np.arange((-y) % sample_stride, min(s, h - y), sample_stride)
        xs = np.arange((-x) % sample_stride, min(s, w - x), sample_stride)
        if len(ys) and len(xs):
            samples.append(desc[:, ys[:, None], xs[None, :]].reshape(desc.shape[0], -1).T)
    samples = np.concatenate(samples)
    log.info("fitting K=%d on %d hypercolumn samples of dim %d", K, len(samples), samples.shape[1])
    shift, scale = 0.0, 1.0
    if normalize:
        shift = samples.mean(axis=0)
        scale = samples.std(axis=0)
        scale[scale == 0] = 1.0
        samples = (samples - shift) / scale
    model = minibatch_kmeans_fit(samples, K, batch_size, iterations, seed)

    out = np.empty((h, w), dtype=np.int64)
    for (y, x), tile in _tiles(band, s):
        desc = _tile_descriptors(net, tile, sel)
        th, tw = min(s, h - y), min(s, w - x)
        pix = desc[:, :th, :tw].reshape(desc.shape[0], -1).T
        out[y : y + th, x : x + tw] = kmeans_predict(model, (pix - shift) / scale).reshape(th, tw)
    return LabelGrid(out, 1)
