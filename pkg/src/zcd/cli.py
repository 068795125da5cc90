"""``zcd`` command line: params, flops, gradcheck, verify, forward, bench.

Exit codes: 0 success, 1 a check failed, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checks, gradcheck
from .analysis import bench, count_flops, count_params, millions
from .config import ConfigError, RunConfig
from .heads import HeadScheme

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

_BOOL_KEYS = ("anchor_free", "attention_relu", "centerness", "norm_affine")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat JSON file of RunConfig keys")
    p.add_argument("--json", metavar="PATH", dest="json_path", help="write the machine report here")
    g = p.add_argument_group("run configuration (overrides --config and ZCD_SEED)")
    g.add_argument("--backbone-profile", metavar="NAME", help="faithful-r50 | faithful-r101 | tiny")
    g.add_argument("--fpn-scheme", metavar="NAME", help="baseline | als | als-light | lls")
    g.add_argument("--head-scheme", metavar="NAME", help="parallel | cls-first | reg-first")
    for key in _BOOL_KEYS:
        g.add_argument(f"--{key.replace('_', '-')}", action=argparse.BooleanOptionalAction,
                       default=None)
    g.add_argument("--anchors-per-loc", type=int, metavar="A")
    g.add_argument("--num-classes", type=int, metavar="K")
    g.add_argument("--attention-dim-d", type=int, metavar="D")
    g.add_argument("--tiny-channels", type=int, nargs=3, metavar=("C3", "C4", "C5"))
    g.add_argument("--seed", type=int)
    g.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"))
    g.add_argument("--rounds", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zcd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in (
        ("params", "parameter counts by component"),
        ("flops", "symbolic FLOP count at the configured image size"),
        ("gradcheck", "central-difference gradient suite"),
    ):
        _add_config_flags(sub.add_parser(name, help=help_))

    p = sub.add_parser("verify", help="run the acceptance checks and print a pass/fail matrix")
    _add_config_flags(p)
    p.add_argument("--only", action="append", metavar="GROUP",
                   help=f"restrict to a group or check name; groups: {', '.join(checks.GROUPS)}")

    p = sub.add_parser("forward", help="forward pass statistics per pyramid level")
    _add_config_flags(p)
    p.add_argument("--dump-attention", action="store_true",
                   help="print (level, branch, channel, weight) rows")

    p = sub.add_parser("bench", help="median latency of each head scheme vs a baseline scheme")
    _add_config_flags(p)
    p.add_argument("--baseline-scheme", default="parallel", metavar="NAME")
    p.add_argument("--float64", action="store_true", help="time in double precision")
    p.add_argument("--budget-s", type=float, metavar="SECONDS",
                   help="keep adding rounds past --rounds while they fit in this wall time")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in RunConfig.keys()}
    for key in ("tiny_channels", "image_size"):
        if overrides[key] is not None:
            overrides[key] = list(overrides[key])
    return RunConfig.load(args.config, overrides)


def _write_json(path, payload: dict) -> None:
    if path:
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_default) + "\n")


def _default(o):
    if isinstance(o, (np.integer, np.floating, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _describe(cfg: RunConfig) -> str:
    kind = "anchor-free" if cfg.anchor_free else "anchor-based"
    return f"{cfg.backbone_profile} / {cfg.fpn_scheme} / {cfg.head_scheme} / {kind}"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_params(cfg: RunConfig, args) -> int:
    rep = count_params(cfg.build())
    print(_describe(cfg))
    print(f"{'component':<12}{'params':>14}{'Params /M':>12}")
    for name, n in rep.by_component.items():
        print(f"{name:<12}{n:>14,}{millions(n):>12.1f}")
    print(f"{'total':<12}{rep.total:>14,}{millions(rep.total):>12.1f}")
    _write_json(args.json_path, {"config": cfg.to_dict(), "params": rep.to_dict()})
    return EXIT_OK


def cmd_flops(cfg: RunConfig, args) -> int:
    shape = (1, 3, *cfg.image_size)
    rep = count_flops(cfg.build(), shape)
    print(f"{_describe(cfg)} at {cfg.image_size[0]}x{cfg.image_size[1]}")
    for kind, macs in sorted(rep.by_kind().items()):
        print(f"  {kind:<8}{2 * macs:>18,} FLOPs")
    print(f"  {'total':<8}{rep.total:>18,} FLOPs ({rep.total / 1e9:.2f} G, 1 MAC = 2 FLOPs)")
    if cfg.backbone_profile != "tiny":
        print("  (the faithful ResNet trunk is not counted)")
    _write_json(args.json_path, {"config": cfg.to_dict(), "flops": rep.to_dict()})
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    reports = gradcheck.run_suite(seed=cfg.seed)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  {r.failure}" if r.failure else ""
        print(f"{status}  {r.name:<28} max rel err {r.worst:.2e}{extra}")
    ok = all(r.passed for r in reports)
    print(f"{sum(r.passed for r in reports)}/{len(reports)} passed (eps {gradcheck.EPS}, tol {gradcheck.TOL})")
    _write_json(args.json_path, {
        "config": cfg.to_dict(),
        "gradcheck": {
            "max_rel_err": {r.name: r.worst for r in reports},
            "passed": ok,
            "reports": [r.to_dict() for r in reports],
        },
    })
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify(cfg: RunConfig, args) -> int:
    only = [g for item in (args.only or []) for g in item.split(",") if g]
    try:
        selected = checks.select(only)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    results = []
    for check in selected:
        r = check.run(cfg)
        results.append(r)
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<34} [{r.module}] {r.claim}", flush=True)
        measured = json.dumps(r.measured, default=_default)
        limit = 160 if r.passed else 800
        print(f"      measured: {measured if len(measured) <= limit else measured[:limit] + ' ...'}")
    n_ok = sum(r.passed for r in results)
    print(f"{n_ok}/{len(results)} checks passed")
    _write_json(args.json_path, {
        "config": cfg.to_dict(),
        "verify": {"passed": n_ok == len(results), "checks": [r.to_dict() for r in results]},
    })
    return EXIT_OK if n_ok == len(results) else EXIT_FAIL


def _image(cfg: RunConfig, dtype=np.float64) -> np.ndarray:
    return np.random.default_rng([cfg.seed, 99]).standard_normal((1, 3, *cfg.image_size)).astype(dtype)


def cmd_forward(cfg: RunConfig, args) -> int:
    det = cfg.build().initialize(cfg.seed)
    out = det.forward(_image(cfg))
    stats = {}
    print(f"{_describe(cfg)} at {cfg.image_size[0]}x{cfg.image_size[1]}, seed {cfg.seed}")
    print(f"{'level':<7}{'shape':<22}{'min':>12}{'mean':>12}{'max':>12}")
    for lvl, p in sorted(out.levels.items()):
        s = {"shape": list(p.shape), "min": float(p.min()), "mean": float(p.mean()),
             "max": float(p.max())}
        stats[f"P{lvl}"] = s
        print(f"P{lvl:<6}{str(tuple(p.shape)):<22}{s['min']:>12.5g}{s['mean']:>12.5g}{s['max']:>12.5g}")
    payload = {"config": cfg.to_dict(), "forward": {"levels": stats}}
    if args.dump_attention:
        rows = out.fpn.attention_table()
        if not rows:
            print("(no attention blocks in this scheme)")
        else:
            print("level,branch,channel,weight")
            for level, branch, channel, weight in rows:
                print(f"{level},{branch},{channel},{weight!r}")
        payload["forward"]["attention"] = [list(r) for r in rows]
    _write_json(args.json_path, payload)
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    try:
        reference = HeadScheme.parse(args.baseline_scheme).value
    except ValueError as e:
        raise ConfigError(f"--baseline-scheme: {e}") from None
    dtype = np.float64 if args.float64 else np.float32
    models = {}
    for scheme in HeadScheme:
        det = cfg.build(head_scheme=scheme.value).initialize(cfg.seed).astype(dtype)
        models[scheme.value] = det.forward
    rep = bench(models, _image(cfg, dtype), reference, rounds=cfg.rounds, budget_s=args.budget_s)
    print(f"{cfg.backbone_profile} / {cfg.fpn_scheme} at {cfg.image_size[0]}x{cfg.image_size[1]}, "
          f"{np.dtype(dtype).name}, {rep.rounds} rounds after {rep.warmup} warmup")
    print(f"{'scheme':<12}{'median ms':>12}{'mean ms':>12}{'ratio':>9}{'med/med':>9}")
    for name in models:
        print(f"{name:<12}{rep.median_ns(name) / 1e6:>12.2f}{rep.mean_ns(name) / 1e6:>12.2f}"
              f"{rep.ratio(name):>9.3f}{rep.ratio_of_medians(name):>9.3f}")
    print("ratio: median of per-round latency ratios; med/med: ratio of median latencies")
    _write_json(args.json_path, {"config": cfg.to_dict(), "bench": rep.to_dict()})
    return EXIT_OK


COMMANDS = {
    "params": cmd_params,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
    "verify": cmd_verify,
    "forward": cmd_forward,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"zcd: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except BrokenPipeError:
        # output piped into e.g. ``head``
        sys.stderr.close()
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
