"""Reusable representations from one forward pass: activation stacks, hypercolumns, fcn vectors."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .net import ActivationStack, Network
from .tensor import bilinear_upsample

__all__ = [
    "ActivationStack",
    "LayerSelector",
    "HypercolumnField",
    "capture_activations",
    "assemble_hypercolumns",
    "fcn_features",
    "descriptor_dim",
    "dump_hypercolumns",
]


@dataclass(frozen=True)
class LayerSelector:
    layers: tuple[str, ...] = ("conv1", "conv2", "conv3", "conv4")
    include_fcn: bool = False

    def __post_init__(self):
        if not self.layers:
            raise InputError("layer selector must name at least one layer")

    @classmethod
    def parse(cls, text: str, include_fcn: bool = False) -> "LayerSelector":
        """Accept ``conv1,conv3`` or a range such as ``conv1..conv4``."""
        text = text.strip()
        if ".." in text:
            lo, hi = (t.strip() for t in text.split("..", 1))
            prefix = lo.rstrip("0123456789")
            if not prefix or prefix != hi.rstrip("0123456789"):
                raise InputError(f"cannot parse layer range {text!r}")
            a, b = int(lo[len(prefix):]), int(hi[len(prefix):])
            names = tuple(f"{prefix}{i}" for i in range(a, b + 1))
        else:
            names = tuple(t.strip() for t in text.split(",") if t.strip())
        return cls(names, include_fcn)


@dataclass
class HypercolumnField:
    data: np.ndarray  # [D, H, W]
    layers: list[tuple[str, int]] = field(default_factory=list)  # (layer, channels) in descriptor order

    @property
    def descriptor_dim(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def pixels(self) -> np.ndarray:
        """Descriptors as ``[H*W, D]`` rows in row-major pixel order."""
        return self.data.reshape(self.descriptor_dim, -1).T


def capture_activations(net: Network, patch: np.ndarray) -> ActivationStack:
    _, stack = net.capture(patch)
    return stack


def descriptor_dim(net: Network, sel: LayerSelector) -> int:
    dims = 0
    for name in sel.layers:
        l = net.spec.layer(name)
        if l.kind != "conv":
            raise InputError(f"hypercolumn layers must be conv layers, {name!r} is {l.kind}")
        dims += l.width
    if sel.include_fcn:
        dims += net.spec.layer(net.spec.dense_names[-2]).width
    return dims


def assemble_hypercolumns(stack: ActivationStack, sel: LayerSelector) -> HypercolumnField:
    """Upsample every selected map to input resolution and stack along the descriptor axis."""
    if not sel.layers:
        raise InputError("empty layer selector")
    s = stack.input_size
    wanted = set(sel.layers)
    known = {name for name, _ in stack.conv}
    missing = wanted - known
    if missing:
        raise InputError(f"layers {sorted(missing)} are not in the activation stack {sorted(known)}")
    planes, layout = [], []
    for name, m in stack.conv:  # network order regardless of selector order
        if name in wanted:
            planes.append(bilinear_upsample(m, s, s))
            layout.append((name, m.shape[0]))
    if sel.include_fcn:
        v = stack.fcn1
        planes.append(np.broadcast_to(v[:, None, None], (v.shape[0], s, s)))
        layout.append(("fcn1", v.shape[0]))
    return HypercolumnField(np.concatenate(planes, axis=0), layout)


def fcn_features(net: Network, patch: np.ndarray) -> np.ndarray:
    return capture_activations(net, patch).fcn1


def batch_fcn_features(net: Network, patches: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Post-ReLU penultimate vectors for ``[N, 1, S, S]`` patches."""
    stop = net.feature_layer
    out = [net.forward_batch(patches[i : i + chunk], stop_after=stop)[0] for i in range(0, len(patches), chunk)]
    return np.concatenate(out)


def dump_hypercolumns(hc: HypercolumnField, directory) -> list[Path]:
    """Write one 16-bit PGM per descriptor plane, each min-max scaled to the full range."""
    from .data import write_pgm

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for d in range(hc.descriptor_dim):
        plane = hc.data[d].astype(np.float64)
        lo, hi = plane.min(), plane.max()
        scaled = (plane - lo) / (hi - lo) if hi > lo else np.zeros_like(plane)
        path = directory / f"plane_{d:04d}.pgm"
        write_pgm(scaled, path, maxval=65535)
        paths.append(path)
    return paths
