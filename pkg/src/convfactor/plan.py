"""Replacement plans: which layers get rewritten into which factorized kind.

Plan text is a comma-separated list of directives ``kind:range [key=value ...]``
where ``range`` is ``i`` or ``i-j`` (1-based, inclusive). Values may
themselves contain commas, so a new directive starts only at ``kind:``.

=========  =================================================================
kind       keys
=========  =================================================================
depthsep   ``t=2`` (all layers) or ``t=2@3,5`` (only the listed layers)
tucker     ``ranks=R1,R2`` or ``ranks=vbmf`` (default)
tdw        ``r=R`` or ``r=vbmf`` (default); ``t`` as for depthsep
cdp        ``alpha=A`` or ``alpha=a2,a3,...`` (one per layer in range)
=========  =================================================================

All kinds accept ``act=relu|none`` for the intermediate activation.

Examples: ``depthsep:2-7 t=2@3,5``, ``cdp:2-7 alpha=2,4,4,8,8,16``,
``depthsep:7, tdw:5-6 r=33``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchSpec
from .errors import InvalidArgument, RejectedDirective
from .cost import tdw_compresses
from .factorize import decompose_layer, select_bottleneck_rank, split_pointwise
from .layers import LayerSpec, random_weights

KIND_ALIASES = {"depthsep": "depthsep", "tucker": "tucker2", "tucker2": "tucker2",
                "tdw": "tdw", "cdp": "cdp"}
_DIRECTIVE_START = re.compile(r"(?:^|(?<=[\s,;]))(" + "|".join(KIND_ALIASES) + r"):", re.I)
_KEYS = {"depthsep": {"t", "act"}, "tucker2": {"ranks"}, "tdw": {"r", "t", "act"},
         "cdp": {"alpha", "act"}}
FIRST_LAYER_EXCLUDED = ("depthsep", "tucker2")
VBMF = "vbmf"


@dataclass(frozen=True)
class Directive:
    kind: str
    layers: tuple[int, ...]
    t: dict = field(default_factory=dict)  # layer -> width multiplier
    alpha: dict = field(default_factory=dict)  # layer -> offset
    ranks: tuple[int, int] | str | None = None
    rank: int | str | None = None
    activation: str | None = "unset"
    text: str = ""

    def width(self, index: int) -> int:
        return self.t.get(index, 1)


@dataclass(frozen=True)
class ReplacementPlan:
    directives: tuple[Directive, ...] = ()

    def targets(self) -> dict[int, Directive]:
        out = {}
        for d in self.directives:
            for i in d.layers:
                if i in out:
                    raise InvalidArgument(f"layer {i} is targeted by more than one directive")
                out[i] = d
        return out


def _int(value: str, what: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise InvalidArgument(f"{what}: expected an integer, got {value!r}") from None


def _int_list(value: str, what: str) -> list[int]:
    return [_int(v, what) for v in value.split(",") if v.strip()]


def _parse_range(text: str) -> tuple[int, ...]:
    m = re.fullmatch(r"(\d+)(?:-(\d+))?", text)
    if not m:
        raise InvalidArgument(f"bad layer range {text!r}")
    lo = int(m.group(1))
    hi = int(m.group(2) or lo)
    if lo < 1 or hi < lo:
        raise InvalidArgument(f"bad layer range {text!r}")
    return tuple(range(lo, hi + 1))


def _parse_directive(chunk: str) -> Directive:
    head, _, rest = chunk.partition(":")
    kind = KIND_ALIASES[head.strip().lower()]
    tokens = rest.split()
    if not tokens:
        raise InvalidArgument(f"directive {chunk!r} has no layer range")
    layers = _parse_range(tokens[0])
    args: dict = {"kind": kind, "layers": layers, "text": chunk}
    for tok in tokens[1:]:
        key, eq, value = tok.partition("=")
        key = key.lower()
        if not eq or not value:
            raise InvalidArgument(f"expected key=value, got {tok!r}")
        if key not in _KEYS[kind]:
            raise InvalidArgument(f"{head.strip()}: unknown key {key!r}")
        value = value.rstrip(",")
        if key == "t":
            mult, at, scope = value.partition("@")
            mult = _int(mult, "t")
            if mult < 1:
                raise InvalidArgument("t must be positive")
            scoped = _int_list(scope, "t scope") if at else list(layers)
            stray = set(scoped) - set(layers)
            if stray:
                raise InvalidArgument(f"t scope {sorted(stray)} outside the directive's range")
            args["t"] = {i: mult for i in scoped}
        elif key == "alpha":
            values = _int_list(value, "alpha")
            if len(values) == 1:
                values = values * len(layers)
            if len(values) != len(layers):
                raise InvalidArgument(
                    f"alpha lists {len(values)} offsets for {len(layers)} layers")
            args["alpha"] = dict(zip(layers, values))
        elif key == "ranks":
            if value.lower() == VBMF:
                args["ranks"] = VBMF
            else:
                pair = _int_list(value, "ranks")
                if len(pair) != 2:
                    raise InvalidArgument("ranks needs two values R1,R2 or 'vbmf'")
                args["ranks"] = tuple(pair)
        elif key == "r":
            args["rank"] = VBMF if value.lower() == VBMF else _int(value, "r")
        elif key == "act":
            args["activation"] = None if value.lower() == "none" else value.lower()
    if kind == "cdp" and "alpha" not in args:
        raise InvalidArgument("cdp directive needs alpha=")
    if kind == "tucker2":
        args.setdefault("ranks", VBMF)
    if kind == "tdw":
        args.setdefault("rank", VBMF)
    return Directive(**args)


def parse_plan(text: str) -> ReplacementPlan:
    text = (text or "").strip()
    if not text:
        return ReplacementPlan()
    starts = [m.start(1) for m in _DIRECTIVE_START.finditer(text)]
    if not starts or text[:starts[0]].strip(" ,;"):
        raise InvalidArgument(f"plan must start with a directive 'kind:range', got {text!r}")
    chunks = [text[a:b].strip().rstrip(",;").strip() for a, b in zip(starts, starts[1:] + [len(text)])]
    plan = ReplacementPlan(tuple(_parse_directive(c) for c in chunks))
    plan.targets()
    return plan


@dataclass
class Rewrite:
    """What happened to one layer."""

    index: int
    directive: str
    kind: str
    ranks: tuple[int, ...] | None = None
    estimated: bool = False
    reconstruction_error: float | None = None
    compresses: bool | None = None


@dataclass
class PlanResult:
    arch: ArchSpec
    weights: list[dict] | None
    rewrites: list[Rewrite]


def validate_plan(arch: ArchSpec, plan: ReplacementPlan) -> dict[int, Directive]:
    targets = plan.targets()
    for i, d in sorted(targets.items()):
        if not 1 <= i <= len(arch):
            raise InvalidArgument(f"{d.text!r}: layer {i} does not exist (have {len(arch)})")
        if i == 1 and d.kind in FIRST_LAYER_EXCLUDED:
            raise RejectedDirective(
                f"{d.text!r}: layer 1 is never factorized with {d.kind} (single input channel)")
        source = arch.layer(i).kind
        if source != "standard" and not (d.kind == "tdw" and source == "depthsep"):
            raise RejectedDirective(
                f"{d.text!r}: layer {i} is already {source}; rewrites apply to standard layers"
                " (or depthsep -> tdw)")
    return targets


def _activation(d: Directive, default):
    return default if d.activation == "unset" else d.activation


def apply_plan(arch: ArchSpec, plan: ReplacementPlan, weights: list[dict] | None = None,
               rng: np.random.Generator | None = None) -> PlanResult:
    """Rewrite the targeted layers; transform weights when they are supplied.

    Tucker targets are decomposed from the dense kernel, TDW targets on a
    depthsep layer keep its depthwise filters and split its pointwise kernel.
    Targets with no weight transform (depthsep, cdp, tdw from a dense
    layer) receive fresh He-normal weights drawn from ``rng``.
    """
    targets = validate_plan(arch, plan)
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = list(arch.layers)
    new_weights = [dict(w) for w in weights] if weights is not None else None
    rewrites = []
    provenance = dict(arch.provenance)

    for i, d in sorted(targets.items()):
        src = arch.layer(i)
        w = weights[i - 1] if weights is not None else None
        base = dict(k=src.k, c=src.c, n=src.n, stride=src.stride, pad=src.pad, group=src.group)
        rec = Rewrite(i, d.text, d.kind)
        fresh = True
        if d.kind == "depthsep":
            spec = LayerSpec("depthsep", t=d.width(i), activation=_activation(d, None), **base)
        elif d.kind == "cdp":
            spec = LayerSpec("cdp", alpha=d.alpha[i], activation=_activation(d, "relu"), **base)
        elif d.kind == "tucker2":
            if d.ranks == VBMF and w is None:
                raise InvalidArgument(f"{d.text!r}: ranks=vbmf needs weights")
            if d.ranks != VBMF:
                r1, r2 = d.ranks
                if not (1 <= r1 <= src.c and 1 <= r2 <= src.n):
                    raise InvalidArgument(
                        f"{d.text!r}: ranks ({r1}, {r2}) exceed layer {i} channels ({src.c}, {src.n})")
            if w is not None:
                factors = decompose_layer(w["kernel"], None if d.ranks == VBMF else d.ranks)
                r1, r2 = factors.ranks
                rec.reconstruction_error = factors.reconstruction_error
                rec.estimated = factors.ranks_estimated
                new_weights[i - 1] = factors.weights()
                fresh = False
            spec = LayerSpec("tucker2", r1=r1, r2=r2, **base)
            rec.ranks = (r1, r2)
        else:
            t = src.t if src.kind == "depthsep" else d.width(i)
            if src.kind == "depthsep" and d.t and d.width(i) != src.t:
                raise InvalidArgument(f"{d.text!r}: t must match the source depthsep layer ({src.t})")
            base_act = src.activation if src.kind == "depthsep" else None
            if src.kind == "depthsep" and w is not None:
                if d.rank == VBMF:
                    sel = select_bottleneck_rank(w["pointwise"])
                    rank = sel.rank
                    rec.estimated = True
                else:
                    rank = d.rank
                spec = LayerSpec("tdw", t=t, rank=rank, activation=_activation(d, base_act), **base)
                b_in, b_out = split_pointwise(w["pointwise"], rank)
                p = np.asarray(w["pointwise"], dtype=np.float64)
                approx = b_in.astype(np.float64) @ b_out
                denom = np.linalg.norm(p)
                rec.reconstruction_error = float(np.linalg.norm(p - approx) / denom) if denom else 0.0
                new_weights[i - 1] = {"depthwise": w["depthwise"], "bottleneck_in": b_in,
                                      "bottleneck_out": b_out}
                fresh = False
            else:
                if d.rank == VBMF:
                    raise InvalidArgument(
                        f"{d.text!r}: r=vbmf needs a depthsep layer with weights to analyze")
                spec = LayerSpec("tdw", t=t, rank=d.rank, activation=_activation(d, base_act), **base)
            rec.ranks = (spec.rank,)
            rec.compresses = tdw_compresses(spec.expanded, spec.n, spec.rank)
        if new_weights is not None and fresh:
            new_weights[i - 1] = random_weights(spec, rng)
        layers[i - 1] = spec
        provenance[i] = d.text
        rewrites.append(rec)

    new_arch = ArchSpec(arch.name, arch.input, layers, arch.pools, tuple(sorted(provenance.items())))
    return PlanResult(new_arch, new_weights, rewrites)
