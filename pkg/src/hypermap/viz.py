"""Deconvnet-style probing of maximally activated conv feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InputError, StateError
from .net import ActivationStack, Network


@dataclass
class BackprojectionResult:
    layer_id: str
    filter_index: int
    reconstruction: np.ndarray  # [1, S, S], min-max normalized to [0, 1]
    activation_score: float
    raw: np.ndarray  # [1, S, S] before normalization


def max_activation_select(stack: ActivationStack, layer_id: str, mode: str = "sum") -> tuple[int, float]:
    """Filter with the largest total (``mode="sum"``) or peak (``mode="max"``) activation."""
    maps = stack.conv_map(layer_id)
    flat = maps.reshape(maps.shape[0], -1).astype(np.float64)
    if mode == "sum":
        scores = flat.sum(axis=1)
    elif mode == "max":
        scores = flat.max(axis=1)
    else:
        raise InputError(f"unknown selection mode {mode!r}")
    best = int(np.argmax(scores))
    return best, float(scores[best])


def backproject_map(net: Network, stack: ActivationStack, layer_id: str, signal: np.ndarray) -> np.ndarray:
    """Carry ``signal`` (shaped like ``layer_id``'s activation) down to input space.

    Each conv is inverted by its transposed convolution, each ReLU by the
    forward-pass sign mask and each pool by unpooling through its switches.
    The masks and switches come from ``stack``, so the map is linear in
    ``signal``.
    """
    names = [l.name for l in net.spec.layers]
    if layer_id not in names or net.spec.layer(layer_id).kind != "conv":
        raise InputError(f"{layer_id!r} is not a conv layer of this network")
    expected = stack.conv_map(layer_id).shape
    if signal.shape != expected:
        raise InputError(f"signal shape {signal.shape} does not match layer {layer_id} maps {expected}")
    top = names.index(layer_id)
    g = signal
    # The signal lives in post-ReLU space of layer_id; walk down from there.
    for l in reversed(net.spec.layers[: top + 1]):
        if l.kind == "conv":
            g = np.where(stack.conv_map(l.name) > 0, g, 0).astype(g.dtype, copy=False)
            g = T.conv2d_transpose(g, net.conv_params(l.name))
        elif l.kind == "pool":
            if l.name not in stack.switches:
                raise StateError(f"activation stack has no switches for {l.name}")
            g = T.unpool2x2(g, stack.switches[l.name])
        elif l.kind == "dense":
            raise InputError(f"cannot backproject through dense layer {l.name}")
    return g


def normalize01(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros_like(x)
    return ((x - lo) / (hi - lo)).astype(x.dtype)


def backproject(net: Network, stack: ActivationStack, layer_id: str, filter_index: int) -> BackprojectionResult:
    maps = stack.conv_map(layer_id)
    if not 0 <= filter_index < maps.shape[0]:
        raise InputError(f"filter {filter_index} out of range for {maps.shape[0]} maps in {layer_id}")
    signal = np.zeros_like(maps)
    signal[filter_index] = maps[filter_index]
    raw = backproject_map(net, stack, layer_id, signal)
    score = float(maps[filter_index].sum(dtype=np.float64))
    return BackprojectionResult(layer_id, filter_index, normalize01(raw), score, raw)


def render_panel(patch: np.ndarray, results: list[BackprojectionResult], separator: int = 2) -> np.ndarray:
    """Original patch followed by one reconstruction tile per result, white separators."""
    if not results:
        raise InputError("render_panel needs at least one result")
    tiles = [np.clip(np.asarray(patch, dtype=np.float32).reshape(patch.shape[-2:]), 0, 1)]
    tiles += [r.reconstruction.reshape(r.reconstruction.shape[-2:]) for r in results]
    h, w = tiles[0].shape
    if any(t.shape != (h, w) for t in tiles):
        raise InputError("all panel tiles must share the patch size")
    panel = np.ones((h, len(tiles) * w + (len(tiles) - 1) * separator), np.float32)
    for i, t in enumerate(tiles):
        x0 = i * (w + separator)
        panel[:, x0 : x0 + w] = t
    return panel


def probe_patch(net: Network, patch: np.ndarray, layers: list[str] | None = None, mode: str = "sum"):
    """Backproject the strongest filter of each requested conv layer for one patch."""
    _, stack = net.capture(patch)
    layers = layers or net.spec.conv_names
    results = []
    for name in layers:
        idx, _ = max_activation_select(stack, name, mode)
        results.append(backproject(net, stack, name, idx))
    return results
