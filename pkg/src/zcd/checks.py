"""The acceptance check suite behind ``zcd verify``.

Every check is a function of a :class:`RunConfig` returning a
:class:`CheckResult`; ``GROUPS`` names the filter keys accepted by ``--only``.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import gradcheck
from .analysis import bench, brute_force_param_count, count_flops, count_params, tape_macs
from .config import RunConfig
from .heads import HeadAssembly, HeadConfig, HeadScheme
from .model import Detector
from .pyramid import LEVELS, Pyramid, level_sizes, resnet_trunk_param_count
from .safpn import (
    FeaturePyramid,
    FpnScheme,
    ScaleAttentionBlock,
    aggregate,
    attention_weights,
    fuse,
    gather_branches,
    n_branches,
)
from .tensor import RngSpec, global_avg_pool

POST_CONV_PARAMS = 3 * 3 * 256 * 256 + 256
PARAM_TOLERANCE = 0.02
SIMPLEX_TOL = 1e-12
SATURATION_TOL = 1e-9
LATENCY_BAND = (0.95, 1.05)
# extra rounds run while they fit; keeps the whole check under 30 s
LATENCY_BUDGET_S = 25.0

# reported whole-model totals in millions
REPORTED = {
    ("retinanet", "faithful-r50", "baseline"): 37.7,
    ("retinanet", "faithful-r50", "als-light"): 36.5,
    ("retinanet", "faithful-r50", "als"): 39.4,
    ("fcos", "faithful-r50", "baseline"): 32.0,
    ("fcos", "faithful-r50", "als-light"): 30.8,
    ("retinanet", "faithful-r101", "baseline"): 56.6,
    ("retinanet", "faithful-r101", "als-light"): 55.4,
    ("fcos", "faithful-r101", "baseline"): 51.0,
    ("fcos", "faithful-r101", "als-light"): 49.8,
}


@dataclass
class CheckResult:
    name: str
    group: str
    module: str
    claim: str
    passed: bool
    measured: object
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Check:
    name: str
    group: str
    module: str
    claim: str
    fn: Callable[[RunConfig], tuple[bool, object]]

    def run(self, cfg: RunConfig) -> CheckResult:
        t0 = time.perf_counter()
        try:
            passed, measured = self.fn(cfg)
        except Exception as e:  # a crashing check is a failed check
            passed, measured = False, f"{type(e).__name__}: {e}"
        return CheckResult(self.name, self.group, self.module, self.claim, bool(passed),
                           _jsonable(measured), time.perf_counter() - t0)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def _detector(kind: str, profile: str, fpn="baseline", head="parallel", **kw) -> Detector:
    ctor = Detector.fcos if kind == "fcos" else Detector.retinanet
    return ctor(profile, fpn_scheme=fpn, head_scheme=head, **kw)


def _total(kind, profile, fpn="baseline", head="parallel", **kw) -> int:
    return count_params(_detector(kind, profile, fpn, head, **kw)).total


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


def _whole_model_total(kind: str, profile: str):
    def fn(cfg):
        target = REPORTED[(kind, profile, "baseline")]
        t0 = time.perf_counter()
        total = _total(kind, profile, attention_dim=cfg.attention_dim_d)
        elapsed = time.perf_counter() - t0
        dev = total / (target * 1e6) - 1.0
        return abs(dev) <= PARAM_TOLERANCE and elapsed < 1.0, {
            "total": total, "reported_m": target, "rel_dev": round(dev, 5), "seconds": elapsed}
    return fn


def _als_delta(cfg):
    deltas = {}
    for kind in ("retinanet", "fcos"):
        for profile in ("faithful-r50", "faithful-r101", "tiny"):
            als = _total(kind, profile, "als", attention_dim=cfg.attention_dim_d)
            light = _total(kind, profile, "als-light", attention_dim=cfg.attention_dim_d)
            deltas[f"{kind}/{profile}"] = als - light
    expected = 5 * POST_CONV_PARAMS
    reported = round(REPORTED[("retinanet", "faithful-r50", "als")]
                     - REPORTED[("retinanet", "faithful-r50", "als-light")], 1)
    ok = all(d == expected for d in deltas.values()) and abs(expected / 1e6 - reported) <= 0.1
    return ok, {"expected": expected, "reported_delta_m": reported, "deltas": deltas}


def _head_equality(cfg):
    counts = {}
    configs = {
        "anchor-based": HeadConfig.retinanet(num_classes=cfg.num_classes,
                                             anchors_per_loc=cfg.anchors_per_loc),
        "anchor-free": HeadConfig.fcos(num_classes=cfg.num_classes),
        "anchor-free-plain": HeadConfig.fcos(num_classes=cfg.num_classes, norm_affine=False,
                                             centerness=False),
    }
    for label, hc in configs.items():
        counts[label] = {s.value: HeadAssembly(hc, s).param_count() for s in HeadScheme}
    whole = {}
    for kind in ("retinanet", "fcos"):
        whole[kind] = {s.value: _total(kind, "faithful-r50", "baseline", s.value) for s in HeadScheme}
    ok = all(len(set(c.values())) == 1 for c in (*counts.values(), *whole.values()))
    return ok, {"heads": counts, "whole_model": whole}


def _ordering(cfg):
    d = cfg.attention_dim_d
    t = {s: _total("retinanet", "faithful-r50", s, attention_dim=d)
         for s in ("als-light", "baseline", "als")}
    ok = t["als-light"] < t["baseline"] < t["als"]
    return ok, t


def _reduction_signs(cfg):
    d = cfg.attention_dim_d
    rows = {}
    ok = True
    for kind in ("retinanet", "fcos"):
        for profile in ("faithful-r50", "faithful-r101"):
            base = _total(kind, profile, "baseline", "parallel", attention_dim=d)
            ours = _total(kind, profile, "als-light", "cls-first", attention_dim=d)
            reported = (REPORTED[(kind, profile, "baseline")], REPORTED[(kind, profile, "als-light")])
            same_sign = (ours < base) == (reported[1] < reported[0])
            ok &= same_sign
            rows[f"{kind}/{profile}"] = {"baseline": base, "als_light_cls_first": ours,
                                         "reported_m": list(reported)}
    return ok, rows


def _walks_agree(cfg):
    rows = {}
    for kind in ("retinanet", "fcos"):
        for scheme in FpnScheme:
            det = _detector(kind, "tiny", scheme.value, cfg.head_scheme,
                            head_config=HeadConfig(num_classes=3, anchors_per_loc=2, channels=16)
                            if kind == "retinanet" else
                            HeadConfig.fcos(num_classes=3, channels=16, norm_groups=4),
                            width=16)
            det.initialize(cfg.seed)
            rows[f"{kind}/{scheme.value}"] = (count_params(det).total, brute_force_param_count(det))
    return all(a == b for a, b in rows.values()), rows


def _trunk_delta(cfg):
    r50, r101 = resnet_trunk_param_count(50), resnet_trunk_param_count(101)
    block = 1024 * 256 + 9 * 256 * 256 + 256 * 1024 + 2 * (256 + 256 + 1024)
    return r101 - r50 == 17 * block, {"r50": r50, "r101": r101, "delta": r101 - r50,
                                      "per_block": block}


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------


def _flop_shapes(cfg):
    h, w = cfg.image_size
    return [(1, 3, h, w), (1, 3, 64, 64), (2, 3, 128, 96), (1, 3, 800, 1344)]


def _head_flop_parity(cfg):
    t0 = time.perf_counter()
    rows = {}
    ok = True
    for shape in _flop_shapes(cfg):
        reports = {s.value: count_flops(cfg.build(head_scheme=s.value), shape) for s in HeadScheme}
        totals = {k: r.total for k, r in reports.items()}
        multisets = [r.multiset() for r in reports.values()]
        ok &= len(set(totals.values())) == 1 and all(m == multisets[0] for m in multisets)
        rows["x".join(map(str, shape))] = totals
    elapsed = time.perf_counter() - t0
    return ok and elapsed < 1.0, {"totals": rows, "seconds": elapsed}


def _flops_match_tape(cfg):
    """Symbolic FPN+head MACs equal the MACs enumerated from an executed graph."""
    rows = {}
    ok = True
    for scheme in FpnScheme:
        for head in HeadScheme:
            det = cfg.replace(backbone_profile="tiny").build("tiny", scheme.value, head.value)
            det.initialize(cfg.seed)
            image = np.random.default_rng(cfg.seed).standard_normal((1, 3, 64, 96))
            pyr = det.pyramid(image)
            fpn_out = det.fpn.forward(pyr)
            tape = fpn_out.tape
            for lvl in LEVELS:
                det.heads.record(tape, fpn_out.out_keys[lvl], lvl, prefix=f"head{lvl}.")
            enumerated = tape_macs(tape)
            symbolic = count_flops(det, image.shape).layers
            sym = {}
            for name, kind, macs in symbolic:
                if name.startswith(("fpn.", "head.")):
                    sym[kind] = sym.get(kind, 0) + macs
            match = sym == dict(enumerated)
            ok &= match
            rows[f"{scheme.value}/{head.value}"] = match
    return ok, rows


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------


def _latency(cfg):
    h, w = cfg.image_size
    models = {}
    for s in HeadScheme:
        det = cfg.build("tiny", head_scheme=s.value).initialize(cfg.seed).astype(np.float32)
        models[s.value] = det.forward
    image = np.random.default_rng(cfg.seed).standard_normal((1, 3, h, w)).astype(np.float32)
    rep = bench(models, image, "parallel", rounds=cfg.rounds, budget_s=LATENCY_BUDGET_S)
    ratios = {k: rep.ratio(k) for k in ("cls-first", "reg-first")}
    lo, hi = LATENCY_BAND
    ok = all(lo <= r <= hi for r in ratios.values())
    return ok, {"ratio": ratios,
                "ratio_of_medians": {k: rep.ratio_of_medians(k) for k in ratios},
                "median_ns": {k: rep.median_ns(k) for k in models},
                "rounds": rep.rounds}


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _gradients(cfg):
    reports = gradcheck.run_suite(seed=cfg.seed % 2**32)
    worst = {r.name: r.worst for r in reports}
    failures = {r.name: r.failure for r in reports if r.failure}
    ok = all(r.passed for r in reports)
    return ok, {"max_rel_err": worst, "tol": gradcheck.TOL, "eps": gradcheck.EPS,
                "failures": failures}


# ---------------------------------------------------------------------------
# attention properties
# ---------------------------------------------------------------------------


def _random_block(cfg, level=4, channels=32, gain=1.0):
    g = np.random.default_rng([cfg.seed, level, 7])
    block = ScaleAttentionBlock(level, channels).initialize(g, RngSpec(cfg.seed, b=gain))
    return block, g


def _simplex(cfg):
    worst, neg = 0.0, False
    for level in LEVELS:
        block, g = _random_block(cfg, level, gain=0.5)
        branches = [g.standard_normal((2, 32, 5, 6)) * (1 + 3 * k) for k in range(block.n_branches)]
        w = attention_weights(aggregate(branches), block)
        neg |= bool((w < 0).any())
        worst = max(worst, float(np.abs(w.sum(axis=0) - 1.0).max()))
    # the full detector at the configured profile
    det = cfg.build().initialize(cfg.seed)
    image = np.random.default_rng(cfg.seed).standard_normal((1, 3, *_small_image(cfg)))
    out = det.fpn.forward(det.pyramid(image))
    for w in out.attention.values():
        neg |= bool((w < 0).any())
        worst = max(worst, float(np.abs(w.sum(axis=0) - 1.0).max()))
    return (not neg) and worst <= SIMPLEX_TOL, {"max_abs_sum_dev": worst, "negative": neg}


def _small_image(cfg):
    return (128, 160) if cfg.backbone_profile != "tiny" else tuple(cfg.image_size)


def _fixed_point(cfg):
    exact, worst = True, 0.0
    for level in LEVELS:
        block, g = _random_block(cfg, level, gain=0.5)
        x = g.standard_normal((2, 32, 4, 5))
        branches = [x.copy() for _ in range(block.n_branches)]
        p = fuse(branches, attention_weights(aggregate(branches), block))
        exact &= bool(np.array_equal(p, x))
        worst = max(worst, float(np.abs(p - x).max()))
    return exact, {"bitwise_equal": exact, "max_abs_diff": worst}


def _zero_init_mean(cfg):
    """Zero expand maps give exactly uniform weights; fused output is the branch mean."""
    worst_w, worst_p = 0.0, 0.0
    uniform = True
    for level in LEVELS:
        block, g = _random_block(cfg, level, gain=0.5)
        for p in block.expand:
            p.weight[...] = 0.0
            p.bias[...] = 0.0
        branches = [g.standard_normal((1, 32, 3, 4)) for _ in range(block.n_branches)]
        w = attention_weights(aggregate(branches), block)
        uniform &= bool(np.all(w == 1.0 / block.n_branches))
        fused = fuse(branches, w)
        mean = np.mean(np.stack(branches), axis=0)
        worst_p = max(worst_p, float(np.abs(fused - mean).max()))
        worst_w = max(worst_w, float(np.abs(w - 1.0 / block.n_branches).max()))
    return uniform and worst_p <= 1e-14, {"weights_exactly_uniform": uniform,
                                          "max_abs_diff_vs_mean": worst_p}


def _saturation(cfg, margin=40.0):
    block, g = _random_block(cfg, 4, gain=0.5)
    worst = 0.0
    for target in range(block.n_branches):
        for b, p in enumerate(block.expand):
            p.weight[...] = 0.0
            p.bias[...] = margin if b == target else 0.0
        branches = [g.standard_normal((1, 32, 3, 3)) for _ in range(block.n_branches)]
        w = attention_weights(aggregate(branches), block)
        p_i = fuse(branches, w)
        worst = max(worst, float(np.abs(p_i - branches[target]).max()))
    return worst <= SATURATION_TOL, {"margin": margin, "max_abs_diff": worst}


def _permutation_invariance(cfg):
    g = np.random.default_rng([cfg.seed, 11])
    branches = [g.standard_normal((2, 32, 4, 4)) for _ in range(6)]
    v1 = global_avg_pool(aggregate(branches))
    worst = 0.0
    for _ in range(20):
        perm = g.permutation(6)
        v1p = global_avg_pool(aggregate([branches[k] for k in perm]))
        worst = max(worst, float(np.abs(v1p - v1).max()))
    return worst <= SIMPLEX_TOL, {"max_abs_diff": worst}


# ---------------------------------------------------------------------------
# structure and initialization
# ---------------------------------------------------------------------------


def _casework(cfg):
    counts = {lvl: n_branches(lvl) for lvl in LEVELS}
    g = np.random.default_rng(cfg.seed)
    sizes = level_sizes(64, 64)
    pyr = Pyramid({lvl: g.standard_normal((1, 4, *sizes[lvl])) for lvl in LEVELS})
    gathered = {7: len(gather_branches(7, pyr))}
    for lvl in (3, 4, 5, 6):
        prev = g.standard_normal((1, 4, *sizes[lvl + 1]))
        br = gather_branches(lvl, pyr, prev)
        gathered[lvl] = len(br)
        if any(b.shape[2:] != sizes[lvl] for b in br):
            return False, {"bad_branch_shape_at": lvl}
    ok = counts == {3: 6, 4: 6, 5: 6, 6: 6, 7: 5} and gathered == counts
    return ok, {"n_branches": counts, "gathered": gathered}


def _top_down(cfg):
    order_ok = True
    for scheme in FpnScheme:
        fpn = FeaturePyramid(scheme, {3: 4, 4: 6, 5: 8}, 8).initialize(RngSpec(cfg.seed, b=0.3))
        out = fpn.forward(gradcheck._tiny_pyramid(np.random.default_rng(cfg.seed), 8))
        order_ok &= out.order == [7, 6, 5, 4, 3]
    # perturbing C7 reaches P3 in the all-level schemes
    deltas = {}
    for scheme in ("als", "als-light"):
        fpn = FeaturePyramid(scheme, {3: 4, 4: 6, 5: 8}, 8).initialize(RngSpec(cfg.seed, b=0.3))
        pyr = gradcheck._tiny_pyramid(np.random.default_rng(cfg.seed), 8)
        base = fpn.forward(pyr).levels[3]
        levels = dict(pyr.levels)
        levels[7] = levels[7] + 1e-3
        moved = fpn.forward(Pyramid(levels)).levels[3]
        deltas[scheme] = float(np.abs(moved - base).max())
    ok = order_ok and all(d > 0 for d in deltas.values())
    return ok, {"order": [7, 6, 5, 4, 3], "order_ok": order_ok, "p3_delta_from_c7": deltas}


def _channels(cfg):
    det = cfg.build().initialize(cfg.seed)
    image = np.random.default_rng(cfg.seed).standard_normal((1, 3, *_small_image(cfg)))
    out = det.fpn.forward(det.pyramid(image))
    shapes = {lvl: list(p.shape) for lvl, p in out.levels.items()}
    return all(s[1] == 256 for s in shapes.values()) and len(shapes) == 5, shapes


def _init_rules(cfg):
    det = cfg.build().initialize(cfg.seed)
    fc_bias_zero = all(np.all(p.bias == 0) for b in det.fpn.blocks.values()
                       for p in (b.reduce, *b.expand))
    weights = np.concatenate([p.weight.ravel() for b in det.fpn.blocks.values()
                              for p in (b.reduce, *b.expand)])
    # big-sample statistics from the same generator path
    big = FeaturePyramid("als").initialize(RngSpec(cfg.seed))
    sample = np.concatenate([p.weight.ravel() for b in big.blocks.values()
                             for p in (b.reduce, *b.expand)])[:100_000]
    mean, std = float(sample.mean()), float(sample.std())
    prior_bias = -math.log(99.0)
    cls_bias = det.heads.outputs["cls_out"].bias
    cls_ok = bool(np.allclose(cls_bias, prior_bias, rtol=0, atol=1e-12))
    other_biases_zero = all(
        np.all(arr == 0) for name, arr in det.heads.named_params()
        if name.endswith(".bias") and not name.startswith("cls_out")
    )
    probs = 1.0 / (1.0 + np.exp(-cls_bias))
    ok = (fc_bias_zero and cls_ok and other_biases_zero
          and abs(mean) <= 1e-3 and abs(std / 0.01 - 1) <= 0.05 and weights.size > 0
          and bool(np.allclose(probs, 0.01, atol=1e-12)))
    return ok, {"fc_bias_zero": fc_bias_zero, "init_mean": mean, "init_std": std,
                "cls_out_bias": float(cls_bias[0]), "other_head_biases_zero": other_biases_zero,
                "sample_size": int(sample.size)}


CHECKS: list[Check] = [
    Check("params.retinanet_r50_total", "params", "analysis",
          "RetinaNet R-50 baseline reported at 37.7M params (+/-2%)",
          _whole_model_total("retinanet", "faithful-r50")),
    Check("params.fcos_r50_total", "params", "analysis",
          "FCOS R-50 baseline reported at 32.0M params (+/-2%)",
          _whole_model_total("fcos", "faithful-r50")),
    Check("params.retinanet_r101_total", "params", "analysis",
          "RetinaNet R-101 baseline reported at 56.6M params (+/-2%)",
          _whole_model_total("retinanet", "faithful-r101")),
    Check("params.fcos_r101_total", "params", "analysis",
          "FCOS R-101 baseline reported at 51.0M params (+/-2%)",
          _whole_model_total("fcos", "faithful-r101")),
    Check("params.als_minus_als_light", "params", "sa-fpn",
          "ALS minus ALS-Light is five 3x3 256->256 convs (39.4M - 36.5M)", _als_delta),
    Check("params.head_scheme_equality", "params", "det-heads",
          "sequential heads add no parameters (37.7M for every head order)", _head_equality),
    Check("params.fpn_ordering", "params", "sa-fpn",
          "ALS-Light < Baseline < ALS (36.5M < 37.7M < 39.4M)", _ordering),
    Check("params.reduction_signs", "params", "analysis",
          "full-model variants are lighter than their baselines (R-50 and R-101)", _reduction_signs),
    Check("params.walks_agree", "params", "analysis",
          "symbolic count equals the sum over materialized arrays", _walks_agree),
    Check("params.trunk_block_delta", "params", "pyramid-source",
          "ResNet-101 adds 17 bottleneck blocks over ResNet-50", _trunk_delta),
    Check("flops.head_parity", "flops", "analysis",
          "sequential heads keep the FLOPs of parallel heads (equal FPS)", _head_flop_parity),
    Check("flops.symbolic_matches_graph", "flops", "analysis",
          "symbolic MACs equal MACs enumerated from an executed graph", _flops_match_tape),
    Check("bench.latency_parity", "bench", "analysis",
          "Cls-First and Reg-First run at the baseline's speed (15.8 FPS each)", _latency),
    Check("gradcheck.suite", "gradcheck", "tensor-core",
          "analytic gradients match central differences (rel err < 1e-4)", _gradients),
    Check("attention.simplex", "attention", "sa-fpn",
          "branch softmax: weights non-negative, sum 1 per channel", _simplex),
    Check("attention.fixed_point", "attention", "sa-fpn",
          "identical branches fuse to the branch itself", _fixed_point),
    Check("attention.zero_init_mean", "attention", "sa-fpn",
          "zero expand maps give uniform weights and the branch mean", _zero_init_mean),
    Check("attention.saturation", "attention", "sa-fpn",
          "a 40-logit margin selects one branch to within 1e-9", _saturation),
    Check("attention.descriptor_permutation", "attention", "sa-fpn",
          "pooled descriptor is invariant to branch order", _permutation_invariance),
    Check("structure.branch_casework", "structure", "sa-fpn",
          "level 7 fuses 5 inputs, levels 3-6 fuse 6", _casework),
    Check("structure.top_down", "structure", "sa-fpn",
          "levels are generated 7 -> 3 and C7 reaches P3", _top_down),
    Check("structure.fpn_width", "structure", "sa-fpn",
          "every output level has 256 channels", _channels),
    Check("structure.init_rules", "structure", "det-heads",
          "zero fc biases, N(0, 0.01) weights, classification prior bias -ln(99)", _init_rules),
]

GROUPS = sorted({c.group for c in CHECKS})


def select(only=None) -> list[Check]:
    if not only:
        return list(CHECKS)
    wanted = set(only)
    unknown = wanted - set(GROUPS) - {c.name for c in CHECKS}
    if unknown:
        raise ValueError(f"unknown check group(s) {sorted(unknown)}; groups are {GROUPS}")
    return [c for c in CHECKS if c.group in wanted or c.name in wanted]


def run_checks(cfg: RunConfig, only=None) -> list[CheckResult]:
    return [check.run(cfg) for check in select(only)]
