"""Architecture descriptions and sequential evaluation.

An :class:`ArchSpec` is an ordered list of :class:`LayerSpec` plus the
positions of 2x2 stride-2 max-pools. Layer indices are 1-based everywhere a
user sees them (plans, reports, weight names); ``pools`` holds the indices of
layers that are *followed* by a pool.

Architecture file (JSON)::

    {"name": "l2net", "input": [32, 32, 1],
     "layers": [{"kind": "standard", "k": 3, "c": 1, "n": 32, "stride": 1, "pad": 1}, ...],
     "pools": []}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, LayerError
from .layers import LayerSpec, batch_norm, layer_forward, max_pool2x2


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input: tuple[int, int, int]  # (width, height, channels)
    layers: tuple[LayerSpec, ...]
    pools: frozenset[int] = frozenset()
    provenance: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "input", tuple(int(v) for v in self.input))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "pools", frozenset(int(p) for p in self.pools))
        if len(self.input) != 3 or min(self.input) < 1:
            raise InvalidArgument(f"input must be three positive integers, got {self.input}")
        if not self.layers:
            raise InvalidArgument("architecture has no layers")
        bad = [p for p in self.pools if not 1 <= p <= len(self.layers)]
        if bad:
            raise InvalidArgument(f"pool positions {sorted(bad)} are not layer indices")
        shapes(self)

    def __len__(self):
        return len(self.layers)

    def layer(self, index: int) -> LayerSpec:
        return self.layers[index - 1]


@dataclass(frozen=True)
class LayerShape:
    index: int
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]
    pooled_hw: tuple[int, int]


def shapes(arch: ArchSpec) -> list[LayerShape]:
    """Propagate spatial dims through the network, checking channel chaining."""
    w, h, channels = arch.input
    out = []
    for i, spec in enumerate(arch.layers, start=1):
        if spec.c != channels:
            raise LayerError(i, f"expects {spec.c} input channels, previous layer gives {channels}")
        try:
            oh, ow = spec.out_hw(h, w)
        except InvalidArgument as exc:
            raise LayerError(i, exc) from None
        ph, pw = oh, ow
        if i in arch.pools:
            ph, pw = oh // 2, ow // 2
            if ph < 1 or pw < 1:
                raise LayerError(i, f"cannot pool a {oh}x{ow} map")
        out.append(LayerShape(i, (h, w), (oh, ow), (ph, pw)))
        h, w, channels = ph, pw, spec.n
    return out


def output_shape(arch: ArchSpec) -> tuple[int, int, int]:
    """(height, width, channels) of the final feature map."""
    last = shapes(arch)[-1]
    return (*last.pooled_hw, arch.layers[-1].n)


def _std(k, c, n, stride=1, pad=1, activation="relu", group=""):
    return LayerSpec("standard", k, c, n, stride=stride, pad=pad, activation=activation, group=group)


def l2net_spec() -> ArchSpec:
    """L2Net: 32x32 grayscale patch -> 1x1x128 descriptor, strided at layers 3 and 5."""
    layers = [
        _std(3, 1, 32),
        _std(3, 32, 32),
        _std(3, 32, 64, stride=2),
        _std(3, 64, 64),
        _std(3, 64, 128, stride=2),
        _std(3, 128, 128),
        _std(8, 128, 128, pad=0, activation=None),
    ]
    return ArchSpec("l2net", (32, 32, 1), layers)


def superpoint_spec() -> ArchSpec:
    """SuperPoint VGG backbone (layers 1-8) and detector head (9-10) at 240x320x3."""
    b, h = "backbone", "head"
    layers = [
        _std(3, 3, 64, group=b),
        _std(3, 64, 64, group=b),
        _std(3, 64, 64, group=b),
        _std(3, 64, 64, group=b),
        _std(3, 64, 128, group=b),
        _std(3, 128, 128, group=b),
        _std(3, 128, 128, group=b),
        _std(3, 128, 128, group=b),
        _std(3, 128, 256, group=h),
        _std(1, 256, 65, pad=0, activation=None, group=h),
    ]
    return ArchSpec("superpoint", (320, 240, 3), layers, pools={2, 4, 6})


BUILTINS = {"l2net": l2net_spec, "superpoint": superpoint_spec}

_LAYER_FIELDS = {f.name for f in fields(LayerSpec)}


def arch_from_dict(data: dict) -> ArchSpec:
    if not isinstance(data, dict):
        raise InvalidArgument("architecture must be a JSON object")
    try:
        layers = []
        for i, raw in enumerate(data["layers"], start=1):
            unknown = set(raw) - _LAYER_FIELDS
            if unknown:
                raise InvalidArgument(f"layer {i}: unknown fields {sorted(unknown)}")
            layers.append(LayerSpec(**raw))
        return ArchSpec(
            name=str(data.get("name", "custom")),
            input=tuple(data["input"]),
            layers=layers,
            pools=data.get("pools", ()),
        )
    except KeyError as exc:
        raise InvalidArgument(f"architecture is missing field {exc.args[0]!r}") from None
    except TypeError as exc:
        raise InvalidArgument(f"malformed architecture: {exc}") from None


def arch_to_dict(arch: ArchSpec) -> dict:
    defaults = {f.name: f.default for f in fields(LayerSpec)}
    layers = []
    for spec in arch.layers:
        d = asdict(spec)
        layers.append({k: v for k, v in d.items()
                       if k in ("kind", "k", "c", "n") or v != defaults[k]})
    return {"name": arch.name, "input": list(arch.input), "layers": layers,
            "pools": sorted(arch.pools)}


def load_arch(ref: str) -> ArchSpec:
    """Resolve a built-in name or parse a JSON architecture file.

    Raises ``json.JSONDecodeError`` (carrying line/column) on syntax errors.
    """
    if ref in BUILTINS:
        return BUILTINS[ref]()
    text = Path(ref).read_text()
    return arch_from_dict(json.loads(text))


def model_forward(x, arch: ArchSpec, weights: Sequence[dict], norms: dict | None = None) -> np.ndarray:
    """Apply every layer (and pool) in order.

    ``norms`` optionally maps a 1-based layer index to ``(mean, var)`` for an
    affine-free batch norm applied right after that layer.
    """
    if len(weights) != len(arch.layers):
        raise InvalidArgument(f"got {len(weights)} weight sets for {len(arch.layers)} layers")
    y = np.asarray(x)
    for i, (spec, w) in enumerate(zip(arch.layers, weights), start=1):
        try:
            y = layer_forward(y, spec, w)
        except LayerError:
            raise
        except InvalidArgument as exc:
            raise LayerError(i, exc) from exc
        if norms and i in norms:
            y = batch_norm(y, *norms[i])
        if i in arch.pools:
            y = max_pool2x2(y)
    return y
