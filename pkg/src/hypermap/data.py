"""Synthetic scenes, single-band raster I/O, grid tiling and dataset manifests.

The synthetic generator stands in for overhead imagery: "settlement" zones are
lattices of bright rectangular structures over a dark floor, everything else is
smooth low-frequency terrain. All intensities live in [0, 1] as float32 and are
quantized only when written to disk.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .net import PatchSet
from .seeding import rng_for

SPLITS = ("train", "val", "map")

# Fixed preview palette (RGB) for label and cluster rasters; indices wrap modulo its length.
PALETTE = np.array(
    [
        (40, 40, 40),  # 0 dark grey
        (230, 60, 40),  # 1 red
        (40, 150, 220),  # 2 blue
        (250, 200, 40),  # 3 yellow
        (60, 180, 80),  # 4 green
        (170, 80, 200),  # 5 purple
        (250, 140, 30),  # 6 orange
        (220, 220, 220),  # 7 light grey
    ],
    dtype=np.uint8,
)


@dataclass
class SceneRaster:
    band: np.ndarray  # [H, W] float32 in [0, 1]
    resolution: float = 0.5  # metres per pixel, metadata only

    @property
    def height(self) -> int:
        return self.band.shape[0]

    @property
    def width(self) -> int:
        return self.band.shape[1]


@dataclass
class SyntheticSceneConfig:
    width: int = 1728
    height: int = 1728
    settlement_density: float = 0.5
    structure_size: int = 6
    spacing: int = 10
    noise_sigma: float = 0.04
    region_size: int = 144
    layout: str = "cells"  # "cells": random region grid; "half": left half settlement
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.region_size < 1:
            raise InputError(f"degenerate scene dimensions {self.width}x{self.height}")
        if not 0.0 <= self.settlement_density <= 1.0:
            raise InputError(f"settlement_density {self.settlement_density} outside [0, 1]")
        if self.structure_size < 1 or self.spacing <= self.structure_size:
            raise InputError("spacing must exceed structure_size, both positive")
        if self.noise_sigma < 0:
            raise InputError("noise_sigma must be non-negative")
        if self.layout not in ("cells", "half"):
            raise InputError(f"unknown layout {self.layout!r}")


def _smooth_field(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    """Low-frequency noise: a coarse random grid bilinearly interpolated to full size."""
    gh, gw = h // cell + 2, w // cell + 2
    coarse = rng.standard_normal((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    ty, tx = (ys - y0)[:, None], (xs - x0)[None, :]
    top = coarse[y0][:, x0] * (1 - tx) + coarse[y0][:, x0 + 1] * tx
    bottom = coarse[y0 + 1][:, x0] * (1 - tx) + coarse[y0 + 1][:, x0 + 1] * tx
    return top * (1 - ty) + bottom * ty


def settlement_mask(cfg: SyntheticSceneConfig) -> np.ndarray:
    h, w = cfg.height, cfg.width
    if cfg.layout == "half":
        mask = np.zeros((h, w), bool)
        mask[:, : w // 2] = cfg.settlement_density > 0
        return mask
    rng = rng_for(cfg.seed, "data-io/regions")
    rows, cols = math.ceil(h / cfg.region_size), math.ceil(w / cfg.region_size)
    cells = rng.random((rows, cols)) < cfg.settlement_density
    mask = np.repeat(np.repeat(cells, cfg.region_size, 0), cfg.region_size, 1)
    return mask[:h, :w]


def generate_synthetic_scene(cfg: SyntheticSceneConfig) -> tuple[SceneRaster, np.ndarray]:
    """Return ``(scene, mask)``; ``mask`` is True on settlement-zone pixels."""
    h, w = cfg.height, cfg.width
    mask = settlement_mask(cfg)
    rng = rng_for(cfg.seed, "data-io/texture")

    terrain = 0.45 + 0.08 * _smooth_field(rng, h, w, 48) + 0.03 * _smooth_field(rng, h, w, 12)
    floor = 0.22 + 0.02 * _smooth_field(rng, h, w, 48)
    img = np.where(mask, floor, terrain)

    # Structures on a jittered lattice; each is kept only if its centre lies in a zone.
    s, sp = cfg.structure_size, cfg.spacing
    grid_y = np.arange(0, h, sp)
    grid_x = np.arange(0, w, sp)
    jitter = sp - s
    jy = rng.integers(0, jitter + 1, (len(grid_y), len(grid_x)))
    jx = rng.integers(0, jitter + 1, (len(grid_y), len(grid_x)))
    dh = rng.integers(-1, 2, (len(grid_y), len(grid_x)))
    dw = rng.integers(-1, 2, (len(grid_y), len(grid_x)))
    level = 0.75 + 0.1 * rng.random((len(grid_y), len(grid_x)))
    for i, gy in enumerate(grid_y):
        for j, gx in enumerate(grid_x):
            y0, x0 = gy + jy[i, j], gx + jx[i, j]
            y1, x1 = min(y0 + max(s + dh[i, j], 1), h), min(x0 + max(s + dw[i, j], 1), w)
            cy, cx = min((y0 + y1) // 2, h - 1), min((x0 + x1) // 2, w - 1)
            if mask[cy, cx]:
                img[y0:y1, x0:x1] = np.where(mask[y0:y1, x0:x1], level[i, j], img[y0:y1, x0:x1])

    img = img + cfg.noise_sigma * rng.standard_normal((h, w))
    band = np.clip(img, 0.0, 1.0).astype(np.float32)
    return SceneRaster(band), mask


def tile_offsets(height: int, width: int, size: int, stride: int) -> list[tuple[int, int]]:
    if stride <= 0:
        raise InputError(f"stride must be positive, got {stride}")
    if size < 1 or size > height or size > width:
        raise InputError(f"tile size {size} does not fit a {height}x{width} scene")
    return [(y, x) for y in range(0, height - size + 1, stride) for x in range(0, width - size + 1, stride)]


def tile_scene(scene, size: int, stride: int) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """Row-major grid of ``size``-square crops as ``(patch, (row, col))`` pairs."""
    band = scene.band if isinstance(scene, SceneRaster) else np.asarray(scene)
    return [(band[y : y + size, x : x + size], (y, x)) for y, x in tile_offsets(*band.shape, size, stride)]


def label_patch(offset: tuple[int, int], size: int, mask: np.ndarray, threshold: float = 0.5) -> int:
    """1 when the settlement fraction of the patch is at least ``threshold``."""
    y, x = offset
    if y < 0 or x < 0 or y + size > mask.shape[0] or x + size > mask.shape[1]:
        raise InputError(f"patch at {offset} of size {size} leaves the {mask.shape} mask")
    return int(np.mean(mask[y : y + size, x : x + size]) >= threshold)


# ---------------------------------------------------------------------------
# PGM / PNG


_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_fields(buf: bytes) -> tuple[list[int], int]:
    if buf[:2] != b"P5":
        raise FormatError(f"offset 0: bad magic {buf[:2]!r}, expected b'P5'")
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        m = _PGM_TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"offset {pos}: missing {name}")
        try:
            values.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"offset {m.start(1)}: {name} is not an integer: {m.group(1)!r}") from None
        pos = m.end(1)
    if pos >= len(buf) or buf[pos : pos + 1] not in b" \t\r\n":
        raise FormatError(f"offset {pos}: expected a single whitespace byte before the raster")
    return values, pos + 1


def read_pgm_array(path) -> tuple[np.ndarray, int]:
    """Raw integer samples and maxval of a binary (P5) PGM."""
    buf = Path(path).read_bytes()
    (w, h, maxval), start = _header_fields(buf)
    if w < 1 or h < 1:
        raise FormatError(f"bad dimensions {w}x{h}")
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval {maxval} outside 1..65535")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    body = buf[start:]
    if len(body) < need:
        raise FormatError(f"offset {start + len(body)}: raster truncated, {len(body)} of {need} bytes")
    arr = np.frombuffer(body[:need], dtype=dtype).reshape(h, w)
    return arr.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def read_pgm(path) -> SceneRaster:
    arr, maxval = read_pgm_array(path)
    return SceneRaster((arr.astype(np.float32) / np.float32(maxval)).astype(np.float32))


def write_pgm(raster, path, maxval: int | None = None) -> None:
    """Write a P5 PGM.

    Float rasters are taken as [0, 1] intensities and quantized to ``maxval``
    (default 255). Integer rasters are written as-is.
    """
    band = raster.band if isinstance(raster, SceneRaster) else np.asarray(raster)
    if band.ndim != 2 or band.size == 0:
        raise InputError(f"PGM needs a non-empty 2-D raster, got shape {band.shape}")
    if np.issubdtype(band.dtype, np.floating):
        maxval = maxval or 255
        q = np.rint(np.clip(band, 0.0, 1.0) * maxval)
    else:
        q = band
        maxval = maxval or (255 if band.max() <= 255 else 65535)
        if q.min() < 0 or q.max() > maxval:
            raise InputError(f"integer raster values outside 0..{maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{band.shape[1]} {band.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + q.astype(dtype).tobytes())


def colorize(labels: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(labels) % len(PALETTE)]


def write_png(rgb: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path, format="PNG")


# ---------------------------------------------------------------------------
# Manifests


@dataclass
class ManifestRecord:
    path: str
    x: int
    y: int
    label: int
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    patch_size: int
    num_classes: int = 2
    base_dir: Path = field(default=Path("."), compare=False)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def to_text(self) -> str:
        lines = [f"# patch_size={self.patch_size}\tnum_classes={self.num_classes}"]
        lines += [f"{r.path}\t{r.x}\t{r.y}\t{r.label}\t{r.split}" for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        meta: dict[str, int] = {}
        records = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            if line.startswith("#"):
                for item in line[1:].split():
                    key, _, value = item.partition("=")
                    meta[key] = int(value)
                continue
            parts = line.split("\t")
            if len(parts) != 5 or parts[4] not in SPLITS:
                raise FormatError(f"{path}:{lineno}: expected path, x, y, label, split")
            try:
                records.append(ManifestRecord(parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4]))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer coordinate or label") from None
        if "patch_size" not in meta:
            raise FormatError(f"{path}: missing '# patch_size=' header")
        return cls(records, meta["patch_size"], meta.get("num_classes", 2), path.parent)


def _apportion(n: int, ratios: tuple[float, ...]) -> list[int]:
    raw = [r * n for r in ratios]
    counts = [int(math.floor(v + 1e-9)) for v in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def build_manifest(
    scenes: list[tuple[str, np.ndarray]],
    patch_size: int,
    stride: int,
    split_ratios: tuple[float, float, float] = (0.5, 0.25, 0.25),
    seed: int = 0,
    threshold: float = 0.5,
) -> DatasetManifest:
    """Grid-crop every scene and assign whole scenes to train/val/map splits.

    ``scenes`` pairs each scene's path (as it should appear in the manifest)
    with its settlement mask.
    """
    ratios = tuple(float(r) for r in split_ratios)
    if len(ratios) != len(SPLITS) or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-6:
        raise InputError(f"split ratios {split_ratios} must be three non-negative values summing to 1")
    counts = _apportion(len(scenes), ratios)
    for name, r, c in zip(SPLITS, ratios, counts):
        if r > 0 and c == 0:
            raise InputError(f"{len(scenes)} scene(s) cannot fill split {name!r} with ratio {r}")
    order = rng_for(seed, "data-io/manifest").permutation(len(scenes))
    assignment = {}
    pos = 0
    for name, c in zip(SPLITS, counts):
        for k in order[pos : pos + c]:
            assignment[int(k)] = name
        pos += c
    records = []
    for k, (scene_path, mask) in enumerate(scenes):
        for y, x in tile_offsets(*mask.shape, patch_size, stride):
            label = label_patch((y, x), patch_size, mask, threshold)
            records.append(ManifestRecord(str(scene_path), x, y, label, assignment[k]))
    return DatasetManifest(records, patch_size)


def load_patch_set(manifest: DatasetManifest, split: str, limit: int | None = None) -> PatchSet:
    """Crop the patches of one split into memory as ``[N, 1, S, S]`` float32."""
    records = manifest.split(split)[:limit]
    s = manifest.patch_size
    cache: dict[str, np.ndarray] = {}
    patches = np.empty((len(records), 1, s, s), np.float32)
    for i, r in enumerate(records):
        if r.path not in cache:
            p = Path(r.path)
            cache[r.path] = read_pgm(p if p.is_absolute() else manifest.base_dir / p).band
        band = cache[r.path]
        if r.y + s > band.shape[0] or r.x + s > band.shape[1]:
            raise InputError(f"record {r} leaves its {band.shape} scene")
        patches[i, 0] = band[r.y : r.y + s, r.x : r.x + s]
    return PatchSet(patches, np.array([r.label for r in records], dtype=np.int64))

