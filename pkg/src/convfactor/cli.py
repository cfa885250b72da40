"""``convfactor`` command line.

Exit codes: 0 success, 2 parse/validation error, 3 rejected directive,
4 weight file missing or mismatched, 5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import weights_io
from .arch import ArchSpec, arch_to_dict, load_arch, shapes
from .cost import layer_cost, model_cost
from .errors import InvalidArgument, LayerError, RejectedDirective, WeightMismatch
from .factorize import decompose_layer, evbmf_rank
from .layers import LayerSpec, random_weights, zero_weights
from .plan import apply_plan, parse_plan
from .verify import DEFAULT_TOLERANCE, run_battery

EXIT_OK, EXIT_PARSE, EXIT_REJECTED, EXIT_WEIGHTS, EXIT_VERIFY = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class Report:
    """Structured result plus its plain-text table; both come from ``data``."""

    def __init__(self, data: dict, lines: list[str]):
        self.data = data
        self.lines = lines

    def render(self, as_json: bool) -> str:
        if as_json:
            return json.dumps(self.data, indent=2, default=_jsonable)
        return "\n".join(self.lines)


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _table(headers, rows) -> list[str]:
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    fmt = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))  # noqa: E731
    return [fmt(cells[0]), "  ".join("-" * w for w in widths)] + [fmt(r) for r in cells[1:]]


# -- loading ------------------------------------------------------------------

def _load_arch(ref: str) -> ArchSpec:
    try:
        return load_arch(ref)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_PARSE, f"{ref}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    except FileNotFoundError:
        raise CliError(EXIT_PARSE, f"{ref}: no such architecture file or built-in") from None
    except InvalidArgument as exc:
        raise CliError(EXIT_PARSE, f"{ref}: {exc}") from None


def _load_store(path: str) -> weights_io.WeightStore:
    try:
        return weights_io.load(path)
    except FileNotFoundError:
        raise CliError(EXIT_WEIGHTS, f"{path}: weight file not found") from None
    except InvalidArgument as exc:
        raise CliError(EXIT_WEIGHTS, f"{path}: {exc}") from None


def _load_weights(arch: ArchSpec, path: str) -> list[dict]:
    store = _load_store(path)
    try:
        return store.to_layers(arch)
    except WeightMismatch as exc:
        raise CliError(EXIT_WEIGHTS, f"{path}: {exc}") from None


def _ratio(x: float) -> str:
    return f"{x:.2f}x"


# -- commands -------------------------------------------------------------------

def _variant_spec(spec: LayerSpec, index: int, args, weights) -> LayerSpec | None:
    base = dict(k=spec.k, c=spec.c, n=spec.n, stride=spec.stride, pad=spec.pad)
    v = args.variant
    if v == "depthsep":
        return LayerSpec("depthsep", t=args.t, **base)
    if index == 1:
        return None
    if v == "cdp":
        if args.alpha is None:
            raise CliError(EXIT_PARSE, "--variant cdp needs --alpha")
        return LayerSpec("cdp", alpha=min(args.alpha, spec.c), **base)
    if v == "tdw":
        if args.rank is None:
            raise CliError(EXIT_PARSE, "--variant tdw needs --rank")
        return LayerSpec("tdw", t=args.t, rank=args.rank, **base)
    if args.ranks:
        r1, r2 = (int(v) for v in args.ranks.split(","))
        return LayerSpec("tucker2", r1=min(r1, spec.c), r2=min(r2, spec.n), **base)
    if weights is None:
        raise CliError(EXIT_PARSE, "--variant tucker needs --ranks R1,R2 or --weights for VBMF ranks")
    r1, r2 = decompose_layer(weights[index - 1]["kernel"]).ranks
    return LayerSpec("tucker2", r1=r1, r2=r2, **base)


def cmd_analyze(args) -> Report:
    arch = _load_arch(args.arch)
    weights = _load_weights(arch, args.weights) if args.weights else None
    base = model_cost(arch, include_activations=args.include_activations)
    rows, layers = [], []
    var_params = var_flops = 0
    for shape, spec, (_, cost) in zip(shapes(arch), arch.layers, base.per_layer):
        entry = {"layer": shape.index, "kind": spec.kind, "k": spec.k, "c": spec.c, "n": spec.n,
                 "out": list(shape.out_hw), "params": cost.params, "flops": cost.flops}
        row = [shape.index, spec.kind, f"{spec.k}x{spec.k}", f"{spec.c}->{spec.n}",
               f"{shape.out_hw[0]}x{shape.out_hw[1]}", f"{cost.params:,}", f"{cost.flops:,}"]
        if args.variant != "standard":
            vspec = _variant_spec(spec, shape.index, args, weights) if spec.kind == "standard" else None
            vcost = layer_cost(vspec, shape.in_hw) if vspec is not None else cost
            if args.include_activations:
                vcost = type(vcost)(vcost.params, vcost.flops + vcost.activation_flops)
            entry[args.variant] = {"params": vcost.params, "flops": vcost.flops,
                                   "applied": vspec is not None}
            if vspec is not None and vspec.kind == "tucker2":
                entry[args.variant]["ranks"] = [vspec.r1, vspec.r2]
            row += [f"{vcost.params:,}", f"{vcost.flops:,}"]
            var_params += vcost.params
            var_flops += vcost.flops
        layers.append(entry)
        rows.append(row)
    headers = ["layer", "kind", "kernel", "channels", "out", "params", "flops"]
    data = {"arch": arch.name, "seed": args.seed, "layers": layers,
            "total_params": base.total_params, "total_flops": base.total_flops,
            "groups": {g: {"params": p, "flops": f} for g, (p, f) in base.groups.items()}}
    total_row = ["total", "", "", "", "", f"{base.total_params:,}", f"{base.total_flops:,}"]
    if args.variant != "standard":
        headers += [f"{args.variant} params", f"{args.variant} flops"]
        total_row += [f"{var_params:,}", f"{var_flops:,}"]
        data["variant"] = {"kind": args.variant, "total_params": var_params, "total_flops": var_flops,
                           "compression_ratio": base.total_params / var_params,
                           "speedup": base.total_flops / var_flops}
    lines = [f"{arch.name}: input {arch.input[0]}x{arch.input[1]}x{arch.input[2]}"]
    lines += _table(headers, rows + [total_row])
    for g, (p, f) in base.groups.items():
        lines.append(f"{g}: {p:,} params, {f / 1e9:.3f} GFLOPs")
    if args.variant != "standard":
        v = data["variant"]
        lines.append(f"{args.variant}: compression {_ratio(v['compression_ratio'])}, "
                     f"speedup {_ratio(v['speedup'])}")
    return Report(data, lines)


def _plan(arch, text, weights=None, seed=0):
    try:
        plan = parse_plan(text)
    except InvalidArgument as exc:
        raise CliError(EXIT_PARSE, f"invalid plan: {exc}") from None
    try:
        return apply_plan(arch, plan, weights, np.random.default_rng(seed))
    except RejectedDirective as exc:
        raise CliError(EXIT_REJECTED, f"rejected: {exc}") from None
    except InvalidArgument as exc:
        raise CliError(EXIT_PARSE, f"invalid plan: {exc}") from None


def cmd_plan(args) -> Report:
    arch = _load_arch(args.arch)
    weights = _load_weights(arch, args.weights) if args.weights else None
    result = _plan(arch, args.plan, weights, args.seed)
    base = model_cost(arch, include_activations=args.include_activations)
    new = model_cost(result.arch, arch, include_activations=args.include_activations)
    rows, layers = [], []
    for (i, b), (_, c), spec in zip(base.per_layer, new.per_layer, result.arch.layers):
        layers.append({"layer": i, "kind": spec.kind, "params": c.params, "flops": c.flops,
                       "params_delta": c.params - b.params, "flops_delta": c.flops - b.flops})
        rows.append([i, spec.kind, f"{b.params:,}", f"{c.params:,}", f"{c.params - b.params:+,}",
                     f"{b.flops:,}", f"{c.flops:,}"])
    data = {"arch": arch.name, "plan": args.plan, "seed": args.seed, "layers": layers,
            "baseline_params": base.total_params, "baseline_flops": base.total_flops,
            "total_params": new.total_params, "total_flops": new.total_flops,
            "compression_ratio": new.compression_ratio, "flop_ratio": new.speedup,
            "groups": {g: {"params": p, "flops": f} for g, (p, f) in new.groups.items()},
            "rewrites": [r.__dict__ for r in result.rewrites]}
    lines = [f"{arch.name} with plan {args.plan!r}"]
    lines += _table(["layer", "kind", "params", "new params", "delta", "flops", "new flops"], rows)
    lines.append(f"total params {base.total_params:,} -> {new.total_params:,}  "
                 f"compression {_ratio(new.compression_ratio)}")
    lines.append(f"total flops {base.total_flops:,} -> {new.total_flops:,}  "
                 f"speedup {_ratio(new.speedup)}")
    for r in result.rewrites:
        if r.compresses is False:
            lines.append(f"note: layer {r.index} bottleneck rank {r.ranks[0]} does not compress")
    return Report(data, lines)


def cmd_decompose(args) -> Report:
    arch = _load_arch(args.arch)
    weights = _load_weights(arch, args.weights)
    result = _plan(arch, args.plan, weights, args.seed)
    store = weights_io.WeightStore.from_layers(
        result.weights, arch=result.arch.name, seed=args.seed, format_version=weights_io.VERSION,
        architecture=arch_to_dict(result.arch))
    weights_io.save(store, args.out)
    arch_out = args.arch_out or f"{args.out}.arch.json"
    Path(arch_out).write_text(json.dumps(arch_to_dict(result.arch), indent=2))
    rows = []
    for r in result.rewrites:
        err = "" if r.reconstruction_error is None else f"{r.reconstruction_error:.3e}"
        ranks = "" if r.ranks is None else ",".join(map(str, r.ranks))
        rows.append([r.index, r.kind, ranks, "vbmf" if r.estimated else "explicit", err])
    data = {"arch": arch.name, "plan": args.plan, "seed": args.seed, "out": args.out,
            "arch_out": arch_out, "rewrites": [r.__dict__ for r in result.rewrites]}
    lines = [f"wrote {args.out} and {arch_out}"]
    lines += _table(["layer", "kind", "ranks", "rank source", "rel. error"], rows)
    return Report(data, lines)


def cmd_verify(args) -> Report:
    arch = _load_arch(args.arch)
    weights = _load_weights(arch, args.weights)
    checks = run_battery(arch, weights, seed=args.seed, tolerance=args.tolerance)
    failed = [c for c in checks if not c.passed]
    data = {"arch": arch.name, "seed": args.seed, "tolerance": args.tolerance,
            "passed": not failed, "checks": [c.as_dict() for c in checks]}
    rows = [[c.layer, c.name, f"{c.max_rel_error:.2e}", "ok" if c.passed else "FAIL", c.detail]
            for c in checks]
    lines = _table(["layer", "check", "max rel err", "status", "detail"], rows)
    if failed:
        lines.append("failing layers: " + ", ".join(sorted({f"layer{c.layer}" for c in failed})))
    else:
        lines.append(f"all {len(checks)} checks within {args.tolerance:g}")
    report = Report(data, lines)
    if failed:
        raise _VerifyFailed(report)
    return report


class _VerifyFailed(Exception):
    def __init__(self, report):
        super().__init__("verification failed")
        self.report = report


def cmd_rank(args) -> Report:
    store = _load_store(args.matrix)
    if len(store.tensors) != 1:
        raise CliError(EXIT_PARSE, f"{args.matrix}: expected exactly one tensor, found {len(store.tensors)}")
    (name, m), = store.tensors.items()
    if m.ndim != 2:
        raise CliError(EXIT_PARSE, f"{args.matrix}: tensor {name!r} is {m.ndim}-D, expected a matrix")
    est = evbmf_rank(m)
    data = {"tensor": name, "shape": list(m.shape), "rank": est.rank,
            "noise_variance": est.noise_variance,
            "retained_singular_values": est.retained_singular_values, "seed": args.seed}
    lines = [f"{name} {m.shape[0]}x{m.shape[1]}",
             f"rank: {est.rank}",
             f"noise variance: {est.noise_variance:.6g}",
             "retained singular values: " + ", ".join(f"{v:.4g}" for v in est.retained_singular_values)]
    return Report(data, lines)


def cmd_init(args) -> Report:
    arch = _load_arch(args.arch)
    rng = np.random.default_rng(args.seed)
    if args.plan:
        arch = _plan(arch, args.plan, None, args.seed).arch
    weights = [zero_weights(s) if args.zero else random_weights(s, rng) for s in arch.layers]
    store = weights_io.WeightStore.from_layers(
        weights, arch=arch.name, seed=args.seed, format_version=weights_io.VERSION,
        architecture=arch_to_dict(arch))
    weights_io.save(store, args.out)
    arch_out = args.arch_out or f"{args.out}.arch.json"
    Path(arch_out).write_text(json.dumps(arch_to_dict(arch), indent=2))
    n = sum(int(np.size(v)) for v in store.tensors.values())
    data = {"arch": arch.name, "seed": args.seed, "out": args.out, "arch_out": arch_out,
            "tensors": len(store.tensors), "params": n}
    return Report(data, [f"wrote {args.out} ({len(store.tensors)} tensors, {n:,} params) and {arch_out}"])


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--include-activations", action="store_true",
                        help="count activation element-ops in FLOPs")
    common.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)

    p = argparse.ArgumentParser(prog="convfactor", description="CNN layer factorization toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", parents=[common], help="per-layer parameter and FLOP counts")
    a.add_argument("arch", help="architecture JSON file or built-in name (l2net, superpoint)")
    a.add_argument("--variant", default="standard",
                   choices=["standard", "depthsep", "tucker", "tdw", "cdp"])
    a.add_argument("--t", type=int, default=1, help="width multiplier for depthsep/tdw")
    a.add_argument("--alpha", type=int, help="offset for --variant cdp")
    a.add_argument("--rank", type=int, help="bottleneck rank for --variant tdw")
    a.add_argument("--ranks", help="R1,R2 for --variant tucker")
    a.add_argument("--weights", help="weight file (VBMF ranks for --variant tucker)")
    a.set_defaults(func=cmd_analyze)

    pl = sub.add_parser("plan", parents=[common], help="cost a replacement plan")
    pl.add_argument("arch")
    pl.add_argument("plan", help='e.g. "depthsep:2-7 t=2@3,5" or "cdp:2-7 alpha=2"')
    pl.add_argument("--weights", help="weight file, needed for vbmf ranks")
    pl.set_defaults(func=cmd_plan)

    d = sub.add_parser("decompose", parents=[common], help="factorize weights per a plan")
    d.add_argument("arch")
    d.add_argument("weights")
    d.add_argument("plan")
    d.add_argument("out")
    d.add_argument("--arch-out", help="where to write the rewritten architecture JSON")
    d.set_defaults(func=cmd_decompose)

    v = sub.add_parser("verify", parents=[common], help="run the equivalence battery")
    v.add_argument("arch")
    v.add_argument("weights")
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("rank", parents=[common], help="EVBMF rank of a stored matrix")
    r.add_argument("matrix")
    r.set_defaults(func=cmd_rank)

    i = sub.add_parser("init", parents=[common], help="write seeded random (or zero) weights")
    i.add_argument("arch")
    i.add_argument("out")
    i.add_argument("--plan", default="", help="rewrite the architecture first")
    i.add_argument("--zero", action="store_true")
    i.add_argument("--arch-out")
    i.set_defaults(func=cmd_init)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        report = args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except _VerifyFailed as exc:
        print(exc.report.render(args.json))
        return EXIT_VERIFY
    except LayerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    print(report.render(args.json))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
