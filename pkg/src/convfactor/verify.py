"""Numerical equivalence checks over an architecture's weights.

Every layer kind is linear once its intermediate activation is switched off,
so each layer's own forward pass must agree with a dense convolution using
the contracted kernel. CDP layers additionally get their two degenerate
offsets (``alpha = 0`` and ``alpha = C``) checked against the depthwise
separable and conv+pointwise paths on seeded random weights.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .arch import ArchSpec, shapes
from .factorize import merge_depthsep, merged_kernel
from .layers import (LayerSpec, conv2d_forward, depthsep_forward, layer_forward,
                     random_weights)

DEFAULT_TOLERANCE = 1e-4
_MAX_SIDE = 12


@dataclass
class Check:
    name: str
    layer: int
    max_rel_error: float
    passed: bool
    detail: str = ""

    def as_dict(self):
        d = asdict(self)
        if not np.isfinite(d["max_rel_error"]):
            d["max_rel_error"] = str(d["max_rel_error"])
        return d


def relative_error(got, want) -> float:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if not (np.all(np.isfinite(got)) and np.all(np.isfinite(want))):
        return float("inf")
    scale = np.max(np.abs(want)) if want.size else 0.0
    diff = np.max(np.abs(got - want)) if want.size else 0.0
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return float(diff / scale)


def _probe(spec: LayerSpec, in_hw, rng) -> np.ndarray:
    side = lambda v: max(spec.k, min(v, _MAX_SIDE))  # noqa: E731
    return rng.standard_normal((side(in_hw[0]), side(in_hw[1]), spec.c)).astype(np.float32)


def _dense(spec: LayerSpec) -> LayerSpec:
    return LayerSpec("standard", spec.k, spec.c, spec.n, stride=spec.stride, pad=spec.pad)


def _check(name, layer, got, want, tol, detail=""):
    err = relative_error(got, want)
    return Check(name, layer, err, bool(err <= tol), detail)


def cdp_degenerate_checks(k: int, c: int, n: int, rng, tol=DEFAULT_TOLERANCE, layer: int = 0,
                          side: int = 8) -> list[Check]:
    side = max(side, k)
    x = rng.standard_normal((side, side, c)).astype(np.float32)
    checks = []

    spec0 = LayerSpec("cdp", k, c, n, pad=k // 2, alpha=0)
    w0 = random_weights(spec0, rng)
    ds = LayerSpec("depthsep", k, c, n, pad=k // 2)
    want = depthsep_forward(x, ds, {"depthwise": w0["depthwise"], "pointwise": w0["pointwise"][n:]})
    checks.append(_check("cdp alpha=0 == depthsep", layer, layer_forward(x, spec0, w0), want, tol,
                         f"K={k} C={c} N={n}"))

    spec_c = LayerSpec("cdp", k, c, n, pad=k // 2, alpha=c)
    wc = random_weights(spec_c, rng)
    conv = conv2d_forward(x, LayerSpec("standard", k, c, n, pad=k // 2), {"kernel": wc["conv"]})
    want = conv.astype(np.float64) @ wc["pointwise"].astype(np.float64)
    checks.append(_check("cdp alpha=C == conv+pointwise", layer, layer_forward(x, spec_c, wc), want,
                         tol, f"K={k} C={c} N={n}"))
    return checks


def run_battery(arch: ArchSpec, weights: list[dict], seed: int = 0,
                tolerance: float = DEFAULT_TOLERANCE) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks: list[Check] = []
    for shape, spec, w in zip(shapes(arch), arch.layers, weights):
        i = shape.index
        bad = [role for role, arr in w.items() if not np.all(np.isfinite(arr))]
        if bad:
            checks.append(Check("finite weights", i, float("inf"), False,
                                "non-finite values in " + ", ".join(f"layer{i}/{r}" for r in bad)))
            continue
        linear = spec.with_(activation=None)
        x = _probe(spec, shape.in_hw, rng)
        got = layer_forward(x, linear, w)
        want = conv2d_forward(x, _dense(spec), {"kernel": merged_kernel(linear, w)})
        checks.append(_check(f"{spec.kind} == dense merged kernel", i, got, want, tolerance))
        if spec.kind == "depthsep" and spec.t == 1:
            merged = merge_depthsep(w["depthwise"], w["pointwise"])
            want = conv2d_forward(x, _dense(spec), {"kernel": merged})
            checks.append(_check("merge_depthsep == depthsep", i, got, want, tolerance))
        if spec.kind == "cdp":
            checks.extend(cdp_degenerate_checks(spec.k, spec.c, spec.n, rng, tolerance, layer=i))
    return checks
