"""Binary weight container.

Layout (little-endian)::

    b"CDPW"  u32 version=1  u32 count
    count x { u16 name_len, name (UTF-8), u8 ndim, ndim x u32 dims, f32 data (row-major) }
    u32 CRC-32 of every preceding byte

Layer tensors are named ``layer<i>/<role>`` with 1-based ``i``. Store-level
metadata (architecture name, seed) travels as the reserved tensor
``__manifest__``: a 1-D tensor holding the UTF-8 bytes of a JSON object, one
byte per element.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch import ArchSpec
from .errors import InvalidArgument, WeightMismatch
from .layers import check_weights, weight_shapes

MAGIC = b"CDPW"
VERSION = 1
MANIFEST = "__manifest__"


class FormatError(InvalidArgument):
    """The file is not a valid weight container."""


@dataclass
class WeightStore:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    @classmethod
    def from_layers(cls, weights: list[dict], **manifest) -> "WeightStore":
        tensors = {}
        for i, layer in enumerate(weights, start=1):
            for role, arr in layer.items():
                tensors[f"layer{i}/{role}"] = np.asarray(arr, dtype="<f4")
        return cls(tensors, dict(manifest))

    def to_layers(self, arch: ArchSpec) -> list[dict]:
        """Split into per-layer dicts, checking every tensor against ``arch``."""
        layers: list[dict] = [{} for _ in arch.layers]
        for name, arr in self.tensors.items():
            prefix, _, role = name.partition("/")
            if not prefix.startswith("layer") or not prefix[5:].isdigit() or not role:
                raise WeightMismatch(f"tensor {name!r} is not named layer<i>/<role>", name)
            index = int(prefix[5:])
            if not 1 <= index <= len(arch):
                raise WeightMismatch(f"tensor {name!r} refers to a missing layer", name)
            layers[index - 1][role] = arr
        for i, (spec, layer) in enumerate(zip(arch.layers, layers), start=1):
            check_weights(spec, layer, prefix=f"layer{i}/")
        return layers


def _encode_manifest(manifest: dict) -> np.ndarray:
    raw = json.dumps(manifest, sort_keys=True).encode()
    return np.frombuffer(raw, dtype=np.uint8).astype("<f4")


def _decode_manifest(arr: np.ndarray) -> dict:
    return json.loads(bytes(np.asarray(arr).astype(np.uint8)).decode())


def dumps(store: WeightStore) -> bytes:
    items = list(store.tensors.items())
    if store.manifest:
        items.append((MANIFEST, _encode_manifest(store.manifest)))
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if not 1 <= arr.ndim <= 255:
            raise InvalidArgument(f"tensor {name!r} has unsupported rank {arr.ndim}")
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes) -> WeightStore:
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError("not a CDPW weight file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("CRC mismatch: file is corrupt")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    manifest: dict = {}
    try:
        for _ in range(count):
            (length,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + length].decode()
            pos += length
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name!r}")
            if name == MANIFEST:
                manifest = _decode_manifest(arr)
            else:
                tensors[name] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or malformed weight file: {exc}") from None
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} trailing bytes after the last tensor")
    return WeightStore(tensors, manifest)


def save(store: WeightStore, path) -> None:
    Path(path).write_bytes(dumps(store))


def load(path) -> WeightStore:
    return loads(Path(path).read_bytes())


def expected_names(arch: ArchSpec) -> list[str]:
    return [f"layer{i}/{role}" for i, spec in enumerate(arch.layers, start=1)
            for role in weight_shapes(spec)]
