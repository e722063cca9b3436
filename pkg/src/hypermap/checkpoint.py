"""Binary checkpoint container.

Layout, all integers little-endian u32::

    b"HMAP" | version | len + architecture JSON | tensor count |
    per tensor: len + name, ndim, dims..., float32 LE row-major data |
    len + metadata JSON

A network restored from a checkpoint reproduces the saved weights bit for bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .net import ArchitectureSpec, Network

MAGIC = b"HMAP"
FORMAT_VERSION = 1


class UnsupportedVersionError(FormatError):
    pass


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(net: Network) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _blob(_json(net.spec.to_dict()))]
    parts.append(struct.pack("<I", len(net.params)))
    for name, arr in net.params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(_blob(name.encode("utf-8")))
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    parts.append(_blob(_json(getattr(net, "metadata", {}))))
    return b"".join(parts)


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(dumps(net))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{what}: truncated at offset {self.pos} (need {n} bytes, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def blob(self, what: str) -> bytes:
        return self.take(self.u32(f"{what} length"), what)

    def json(self, what: str):
        raw = self.blob(what)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{what}: invalid JSON ({e})") from None


def loads(buf: bytes) -> Network:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"magic: expected {MAGIC!r}, found {magic!r}")
    version = r.u32("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"format_version: checkpoint version {version} is not supported (expected {FORMAT_VERSION})"
        )
    arch = r.json("architecture")
    try:
        spec = ArchitectureSpec.from_dict(arch)
    except (KeyError, TypeError) as e:
        raise FormatError(f"architecture: malformed descriptor ({e})") from None
    params = {}
    for _ in range(r.u32("tensor count")):
        name = r.blob("tensor name").decode("utf-8", errors="replace")
        ndim = r.u32(f"tensor {name} ndim")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"tensor {name} shape"))
        count = int(np.prod(shape)) if ndim else 1
        data = r.take(4 * count, f"tensor {name} data")
        params[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
    meta = r.json("metadata")
    if r.pos != len(buf):
        raise FormatError(f"trailing bytes: {len(buf) - r.pos} unexpected bytes after metadata")
    net = Network(spec, params)
    net.metadata = meta
    return net


def load_checkpoint(path) -> Network:
    return loads(Path(path).read_bytes())
