"""Layer specifications, weight allocation and forward passes.

Five layer kinds are supported:

``standard``
    Dense ``K x K x C x N`` convolution.
``depthsep``
    Depthwise ``K x K x (C*t)`` followed by pointwise ``(C*t) x N``.
``tucker2``
    Pointwise ``C -> R1``, core ``K x K x R1 x R2`` convolution, pointwise ``R2 -> N``.
``tdw``
    Depthwise stage as in ``depthsep`` with the pointwise map replaced by a
    rank-``R`` bottleneck ``(C*t) -> R -> N``.
``cdp``
    Standard convolution on input channels ``[0, alpha)`` producing ``N``
    maps, depthwise convolution on ``[alpha, C)``, concatenation (conv
    branch first), then a pointwise ``(N + C - alpha) -> N`` projection.

Feature maps are ``(H, W, C)`` arrays. No layer carries a bias.

``LayerSpec.activation`` is the nonlinearity applied right after the spatial
stage: the output for ``standard``, the intermediate maps for ``depthsep``,
``tdw`` and ``cdp`` (per branch). ``tucker2`` never has one.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgument, WeightMismatch
from .tensor import DTYPE

KINDS = ("standard", "depthsep", "tucker2", "tdw", "cdp")
ACTIVATIONS = (None, "relu")


def _norm_activation(act):
    if act is None:
        return None
    act = str(act).lower()
    if act in ("none", ""):
        return None
    if act not in ACTIVATIONS:
        raise InvalidArgument(f"unknown activation {act!r}")
    return act


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    k: int
    c: int
    n: int
    stride: int = 1
    pad: int = 0
    alpha: int | None = None
    t: int = 1
    r1: int | None = None
    r2: int | None = None
    rank: int | None = None
    activation: str | None = None
    group: str = ""

    def __post_init__(self):
        kind = str(self.kind).lower()
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "activation", _norm_activation(self.activation))
        if kind not in KINDS:
            raise InvalidArgument(f"unknown layer kind {self.kind!r}")
        for name in ("k", "c", "n", "stride", "t"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgument(f"{kind}: {name} must be positive")
        if self.pad < 0:
            raise InvalidArgument(f"{kind}: padding must be non-negative")
        if kind == "cdp":
            if self.alpha is None or not 0 <= self.alpha <= self.c:
                raise InvalidArgument(f"cdp: alpha={self.alpha} outside [0, {self.c}]")
            if self.t != 1:
                raise InvalidArgument("cdp: width multiplier must be 1")
        if kind == "tucker2":
            if self.r1 is None or self.r2 is None:
                raise InvalidArgument("tucker2: ranks r1 and r2 are required")
            if not (1 <= self.r1 <= self.c and 1 <= self.r2 <= self.n):
                raise InvalidArgument(
                    f"tucker2: ranks ({self.r1}, {self.r2}) exceed channels ({self.c}, {self.n})")
            if self.activation is not None:
                raise InvalidArgument("tucker2: no activation between stages")
        if kind == "tdw":
            if self.rank is None or not 1 <= self.rank <= max(self.c * self.t, self.n):
                raise InvalidArgument(
                    f"tdw: bottleneck rank {self.rank} outside [1, {max(self.c * self.t, self.n)}]")

    @property
    def expanded(self) -> int:
        """Depthwise output width ``C*t``."""
        return self.c * self.t

    def out_size(self, size: int) -> int:
        return conv_out_size(size, self.k, self.stride, self.pad)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return self.out_size(h), self.out_size(w)

    def with_(self, **changes) -> "LayerSpec":
        return replace(self, **changes)


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    """``floor((size + 2*pad - k) / stride) + 1``; raises when not positive."""
    span = size + 2 * pad - k
    if span < 0:
        raise InvalidArgument(f"kernel {k} does not fit input {size} with padding {pad}")
    return span // stride + 1


def weight_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    """Role -> dims for every tensor a layer owns.

    Empty CDP branches (``alpha == 0`` or ``alpha == C``) own no tensor.
    """
    k, c, n = spec.k, spec.c, spec.n
    if spec.kind == "standard":
        return {"kernel": (k, k, c, n)}
    if spec.kind == "depthsep":
        return {"depthwise": (k, k, spec.expanded), "pointwise": (spec.expanded, n)}
    if spec.kind == "tucker2":
        return {"proj_in": (c, spec.r1), "core": (k, k, spec.r1, spec.r2), "proj_out": (spec.r2, n)}
    if spec.kind == "tdw":
        return {
            "depthwise": (k, k, spec.expanded),
            "bottleneck_in": (spec.expanded, spec.rank),
            "bottleneck_out": (spec.rank, n),
        }
    shapes = {}
    if spec.alpha > 0:
        shapes["conv"] = (k, k, spec.alpha, n)
    if spec.alpha < c:
        shapes["depthwise"] = (k, k, c - spec.alpha)
    shapes["pointwise"] = (n + c - spec.alpha, n)
    return shapes


def param_count(spec: LayerSpec) -> int:
    return sum(int(np.prod(s)) for s in weight_shapes(spec).values())


def zero_weights(spec: LayerSpec) -> dict[str, np.ndarray]:
    return {role: np.zeros(shape, dtype=DTYPE) for role, shape in weight_shapes(spec).items()}


def _fan_in(role: str, shape: tuple[int, ...]) -> int:
    if role in ("depthwise",):
        return shape[0] * shape[1]
    if len(shape) == 4:
        return shape[0] * shape[1] * shape[2]
    return shape[0]


def random_weights(spec: LayerSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal initialization for every role."""
    out = {}
    for role, shape in weight_shapes(spec).items():
        std = np.sqrt(2.0 / max(_fan_in(role, shape), 1))
        out[role] = (rng.standard_normal(shape) * std).astype(DTYPE)
    return out


def check_weights(spec: LayerSpec, weights: Mapping[str, np.ndarray], prefix: str = "") -> None:
    expected = weight_shapes(spec)
    for role, shape in expected.items():
        if role not in weights:
            raise WeightMismatch(f"missing tensor {prefix}{role}", f"{prefix}{role}")
        got = tuple(np.shape(weights[role]))
        if got != shape:
            raise WeightMismatch(
                f"tensor {prefix}{role} has dims {list(got)}, expected {list(shape)}", f"{prefix}{role}")
    extra = set(weights) - set(expected)
    if extra:
        name = f"{prefix}{sorted(extra)[0]}"
        raise WeightMismatch(f"unexpected tensor {name}", name)


# -- primitives (float64 in, float64 out) ------------------------------------

def _windows(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """``(Ho, Wo, C, k, k)`` view of the zero-padded input patches."""
    h, w = x.shape[:2]
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(0, 1))
    return win[::stride, ::stride][:ho, :wo]


def _conv(x, kernel, stride, pad):
    win = _windows(x, kernel.shape[0], stride, pad)
    return np.tensordot(win, kernel, axes=([3, 4, 2], [0, 1, 2]))


def _depthwise(x, kernel, t, stride, pad):
    k, c = kernel.shape[0], x.shape[2]
    win = _windows(x, k, stride, pad)
    out = np.einsum("hwcab,abcj->hwcj", win, kernel.reshape(k, k, c, t))
    return out.reshape(out.shape[0], out.shape[1], c * t)


def _pointwise(x, matrix):
    return x @ matrix


def _act(x, activation):
    return np.maximum(x, 0.0) if activation == "relu" else x


def _prepare(x, spec, weights):
    x = np.asarray(x)
    if x.ndim != 3:
        raise InvalidArgument(f"feature map must be (H, W, C), got shape {x.shape}")
    if x.shape[2] != spec.c:
        raise InvalidArgument(f"{spec.kind}: input has {x.shape[2]} channels, expected {spec.c}")
    spec.out_hw(x.shape[0], x.shape[1])
    check_weights(spec, weights)
    w = {role: np.asarray(v, dtype=np.float64) for role, v in weights.items()}
    return x.astype(np.float64), w


# -- forward passes -----------------------------------------------------------

def conv2d_forward(x, spec: LayerSpec, weights) -> np.ndarray:
    x, w = _prepare(x, spec, weights)
    y = _conv(x, w["kernel"], spec.stride, spec.pad)
    return _act(y, spec.activation).astype(DTYPE)


def depthsep_forward(x, spec: LayerSpec, weights) -> np.ndarray:
    x, w = _prepare(x, spec, weights)
    d = _act(_depthwise(x, w["depthwise"], spec.t, spec.stride, spec.pad), spec.activation)
    return _pointwise(d, w["pointwise"]).astype(DTYPE)


def tucker2_forward(x, spec: LayerSpec, weights) -> np.ndarray:
    x, w = _prepare(x, spec, weights)
    z = _pointwise(x, w["proj_in"])
    z = _conv(z, w["core"], spec.stride, spec.pad)
    return _pointwise(z, w["proj_out"]).astype(DTYPE)


def tdw_forward(x, spec: LayerSpec, weights) -> np.ndarray:
    x, w = _prepare(x, spec, weights)
    d = _act(_depthwise(x, w["depthwise"], spec.t, spec.stride, spec.pad), spec.activation)
    return _pointwise(_pointwise(d, w["bottleneck_in"]), w["bottleneck_out"]).astype(DTYPE)


def cdp_forward(x, spec: LayerSpec, weights) -> np.ndarray:
    x, w = _prepare(x, spec, weights)
    a = spec.alpha
    ho, wo = spec.out_hw(x.shape[0], x.shape[1])
    if a > 0:
        conv = _conv(x[:, :, :a], w["conv"], spec.stride, spec.pad)
    else:
        conv = np.zeros((ho, wo, spec.n))
    branches = [_act(conv, spec.activation)]
    if a < spec.c:
        dw = _depthwise(x[:, :, a:], w["depthwise"], 1, spec.stride, spec.pad)
        branches.append(_act(dw, spec.activation))
    y = np.concatenate(branches, axis=2)
    return _pointwise(y, w["pointwise"]).astype(DTYPE)


FORWARDS = {
    "standard": conv2d_forward,
    "depthsep": depthsep_forward,
    "tucker2": tucker2_forward,
    "tdw": tdw_forward,
    "cdp": cdp_forward,
}


def layer_forward(x, spec: LayerSpec, weights) -> np.ndarray:
    return FORWARDS[spec.kind](x, spec, weights)


def max_pool2x2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    if h == 0 or w == 0:
        raise InvalidArgument(f"cannot pool a {x.shape[0]}x{x.shape[1]} map")
    x = x[:h, :w]
    return x.reshape(h // 2, 2, w // 2, 2, -1).max(axis=(1, 3))


def batch_norm(x: np.ndarray, mean, var, eps: float = 1e-5) -> np.ndarray:
    """Affine-free per-channel normalization with caller-supplied statistics."""
    x = np.asarray(x, dtype=np.float64)
    return ((x - np.asarray(mean)) / np.sqrt(np.asarray(var) + eps)).astype(DTYPE)
