"""Exact parameter and FLOP accounting.

FLOPs are floating-point multiplications, counted at the layer's output
spatial resolution (the Tucker-2 input projection is the one stage evaluated
at input resolution, since it runs before the strided core). Pools and batch
norm contribute nothing. Activation element-ops are tallied separately in
``activation_flops`` and only folded into ``flops`` when requested.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

from .arch import ArchSpec, shapes
from .errors import InvalidArgument
from .layers import LayerSpec


@dataclass(frozen=True)
class LayerCost:
    params: int
    flops: int
    activation_flops: int = 0


def _act_flops(spec, out_w, out_h, width):
    return out_w * out_h * width if spec.activation else 0


def conv_cost(spec: LayerSpec, out_w: int, out_h: int) -> LayerCost:
    k2cn = spec.k ** 2 * spec.c * spec.n
    return LayerCost(k2cn, out_w * out_h * k2cn, _act_flops(spec, out_w, out_h, spec.n))


def depthsep_cost(spec: LayerSpec, out_w: int, out_h: int) -> LayerCost:
    ct = spec.c * spec.t
    params = spec.k ** 2 * ct + ct * spec.n
    return LayerCost(params, out_w * out_h * params, _act_flops(spec, out_w, out_h, ct))


def tucker2_cost(spec: LayerSpec, out_w: int, out_h: int,
                 in_w: int | None = None, in_h: int | None = None) -> LayerCost:
    """Input projection at input resolution, core and output projection at output resolution."""
    in_w = out_w if in_w is None else in_w
    in_h = out_h if in_h is None else in_h
    proj_in = spec.c * spec.r1
    core = spec.k ** 2 * spec.r1 * spec.r2
    proj_out = spec.r2 * spec.n
    flops = in_w * in_h * proj_in + out_w * out_h * (core + proj_out)
    return LayerCost(proj_in + core + proj_out, flops)


def tdw_compresses(c: int, n: int, rank: int) -> bool:
    """Bottleneck pays off only when ``C*N > C*R + R*N``."""
    return c * n > c * rank + rank * n


def tdw_cost(spec: LayerSpec, out_w: int, out_h: int) -> LayerCost:
    ct = spec.c * spec.t
    params = spec.k ** 2 * ct + ct * spec.rank + spec.rank * spec.n
    return LayerCost(params, out_w * out_h * params, _act_flops(spec, out_w, out_h, ct))


def cdp_cost(spec: LayerSpec, out_w: int, out_h: int) -> LayerCost:
    a, c, n, k2 = spec.alpha, spec.c, spec.n, spec.k ** 2
    if a is None or not 0 <= a <= c:
        raise InvalidArgument(f"cdp: alpha={a} outside [0, {c}]")
    concat = n + (c - a)
    params = k2 * a * n + k2 * (c - a) + concat * n
    return LayerCost(params, out_w * out_h * params, out_w * out_h * concat)


_COSTS = {
    "standard": conv_cost,
    "depthsep": depthsep_cost,
    "tdw": tdw_cost,
    "cdp": cdp_cost,
}


def layer_cost(spec: LayerSpec, in_hw: tuple[int, int]) -> LayerCost:
    """Cost of one layer given its input ``(height, width)``."""
    out_h, out_w = spec.out_hw(*in_hw)
    if spec.kind == "tucker2":
        return tucker2_cost(spec, out_w, out_h, in_w=in_hw[1], in_h=in_hw[0])
    return _COSTS[spec.kind](spec, out_w, out_h)


@dataclass(frozen=True)
class CostReport:
    per_layer: list[tuple[int, LayerCost]]
    total_params: int
    total_flops: int
    compression_ratio: float = 1.0
    speedup: float = 1.0
    groups: dict[str, tuple[int, int]] = field(default_factory=dict)  # group -> (params, flops)

    def layer(self, index: int) -> LayerCost:
        return dict(self.per_layer)[index]


def model_cost(arch: ArchSpec, baseline: ArchSpec | None = None,
               include_activations: bool = False) -> CostReport:
    """Per-layer and total costs, with ratios against ``baseline`` when given."""
    per_layer = []
    groups: dict[str, tuple[int, int]] = {}
    for shape, spec in zip(shapes(arch), arch.layers):
        cost = layer_cost(spec, shape.in_hw)
        flops = cost.flops + (cost.activation_flops if include_activations else 0)
        if include_activations:
            cost = LayerCost(cost.params, flops, cost.activation_flops)
        per_layer.append((shape.index, cost))
        if spec.group:
            p, f = groups.get(spec.group, (0, 0))
            groups[spec.group] = (p + cost.params, f + cost.flops)
    params = sum(c.params for _, c in per_layer)
    flops = sum(c.flops for _, c in per_layer)
    ratio = speedup = 1.0
    if baseline is not None:
        base = model_cost(baseline, include_activations=include_activations)
        ratio = base.total_params / params
        speedup = base.total_flops / flops
    return CostReport(per_layer, params, flops, ratio, speedup, groups)


class AlphaBound(NamedTuple):
    """Largest CDP offsets that still beat a standard convolution.

    ``exact`` and ``simplified`` bound the parameter count (the latter assumes
    many output channels); ``flops_exact`` is the bound when the ReLU term is
    counted. A ``None`` bound means no offset compresses.
    """

    exact: float | None
    simplified: float | None
    flops_exact: float | None

    @property
    def achievable(self) -> bool:
        return self.exact is not None and self.exact > 0


def _exact_param_bound(k, c, n) -> Fraction | None:
    denom = k * k * (n - 1) - n
    if denom <= 0:
        return None
    return Fraction(c) - Fraction(n * n, denom)


def alpha_bound(k: int, c: int, n: int) -> AlphaBound:
    exact = _exact_param_bound(k, c, n)
    simplified = c - n / (k * k - 1) if k >= 2 else None
    flops_denom = k * k * (1 - n) + n + 1
    flops_exact = c + n * (n + 1) / flops_denom if flops_denom < 0 else None
    return AlphaBound(None if exact is None else float(exact), simplified, flops_exact)


def cdp_compresses(k: int, c: int, n: int, alpha: int) -> bool:
    """Whether ``alpha`` lies strictly below the exact parameter bound (exact arithmetic)."""
    bound = _exact_param_bound(k, c, n)
    return bound is not None and alpha < bound
