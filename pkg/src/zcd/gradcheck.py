"""Gradient-check cases for every kernel and the composed block/head graphs."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .analysis import GradCheckReport, grad_check
from .heads import HeadAssembly, HeadConfig
from .pyramid import LEVELS, Pyramid, level_sizes
from .safpn import FeaturePyramid, FuseNode, ScaleAttentionBlock
from .tensor import RngSpec

EPS = 1e-5
TOL = 1e-4
# random values for gradient checks: generic, O(1), away from ReLU kinks
_CHECK_STD = 0.5


def _away_from_zero(gen, shape, lo=0.1):
    mag = gen.uniform(lo, 1.0, size=shape)
    return mag * gen.choice([-1.0, 1.0], size=shape)


def _node_case(node_factory, inputs: dict[str, np.ndarray], params: dict[str, np.ndarray] | None = None):
    """Wrap a single node; ``params`` are arrays the node reads by reference."""
    params = params or {}

    def run():
        node = node_factory()
        out = node.forward(*inputs.values())

        def backward(seeds):
            in_grads, p = node.backward(seeds["out"])
            grads = {f"input:{k}": g for k, g in zip(inputs, in_grads)}
            grads.update({f"param:{k}": g for k, g in p.items()})
            return grads

        return {"out": out}, backward

    variables = {f"input:{k}": v for k, v in inputs.items()}
    variables.update({f"param:{k}": v for k, v in params.items()})
    return run, variables


def kernel_cases(seed: int = 0):
    """``{name: (run, variables)}`` for every tensor-core kernel."""
    g = np.random.default_rng([seed, 101])
    cases = {}

    x = g.standard_normal((1, 2, 5, 5))
    cp = T.ConvParams(g.standard_normal((3, 2, 3, 3)), g.standard_normal(3), stride=2, padding=1)
    cases["conv2d"] = _node_case(lambda: T.Conv2dNode(cp), {"x": x},
                                 {"weight": cp.weight, "bias": cp.bias})
    x1 = g.standard_normal((2, 3, 4, 5))
    cp1 = T.ConvParams(g.standard_normal((4, 3, 1, 1)), g.standard_normal(4), stride=1, padding=0)
    cases["conv2d_1x1"] = _node_case(lambda: T.Conv2dNode(cp1), {"x": x1},
                                     {"weight": cp1.weight, "bias": cp1.bias})
    cases["relu"] = _node_case(T.ReluNode, {"x": _away_from_zero(g, (2, 3, 4, 4))})
    cases["elementwise_add"] = _node_case(
        T.AddNode, {"a": g.standard_normal((1, 3, 4, 4)), "b": g.standard_normal((1, 3, 4, 4))})
    cases["bilinear_resize_up"] = _node_case(lambda: T.ResizeNode(5, 7),
                                             {"x": g.standard_normal((1, 2, 2, 3))})
    cases["bilinear_resize_down"] = _node_case(lambda: T.ResizeNode(3, 2),
                                               {"x": g.standard_normal((1, 2, 7, 6))})
    cases["global_avg_pool"] = _node_case(T.PoolNode, {"x": g.standard_normal((2, 3, 4, 5))})
    lp = T.LinearParams(g.standard_normal((5, 8)), g.standard_normal(5))
    cases["linear"] = _node_case(lambda: T.LinearNode(lp), {"x": g.standard_normal((2, 8))},
                                 {"weight": lp.weight, "bias": lp.bias})
    cases["softmax_branches"] = _node_case(T.SoftmaxBranchesNode,
                                           {"logits": g.standard_normal((4, 1, 8))})
    gamma, beta = 1.0 + 0.3 * g.standard_normal(8), 0.3 * g.standard_normal(8)
    cases["group_norm"] = _node_case(lambda: T.GroupNormNode(gamma, beta, 4),
                                     {"x": g.standard_normal((2, 8, 3, 3))},
                                     {"weight": gamma, "bias": beta})
    w = T.softmax_branches(g.standard_normal((3, 1, 4)))
    branches = {f"b{k}": g.standard_normal((1, 4, 3, 3)) for k in range(3)}
    cases["fuse"] = _node_case(FuseNode, {"weights": w, **branches})
    cases["aggregate"] = _node_case(T.SumNode, {f"b{k}": g.standard_normal((1, 3, 2, 2))
                                                for k in range(4)})
    return cases


def _rescale(named, gen, gain=1.0):
    """Overwrite every parameter array in place with generic random values.

    Weights get std ``gain / sqrt(fan_in)`` so activations and attention logits
    stay O(1); a saturated softmax would leave gradients below what central
    differences can resolve.
    """
    for name, arr in named:
        if arr.ndim >= 2:
            std = gain / np.sqrt(np.prod(arr.shape[1:]))
        elif name.endswith(".bias"):
            std = 0.1
        else:
            std = _CHECK_STD
        arr[...] = gen.normal(1.0 if "norm.weight" in name or "scale" in name else 0.0, std,
                              size=arr.shape)


def sa_block_case(seed: int = 0, level: int = 4, channels: int = 8):
    g = np.random.default_rng([seed, 202])
    block = ScaleAttentionBlock(level, channels).initialize(g, RngSpec(seed))
    _rescale(block.named_params(), g)
    branches = {f"b{k}": g.standard_normal((2, channels, 3, 3)) for k in range(block.n_branches)}
    params = dict(block.named_params())

    def run():
        tape = T.Tape(**branches)
        block.record(tape, list(branches), "", "P")

        def backward(seeds):
            values, p = tape.backward({"P": seeds["P"]})
            grads = {f"input:{k}": values[k] for k in branches}
            grads.update({f"param:{k}": v for k, v in p.items()})
            return grads

        return {"P": tape["P"]}, backward

    variables = {f"input:{k}": v for k, v in branches.items()}
    variables.update({f"param:{k}": v for k, v in params.items()})
    return run, variables


def _tiny_pyramid(gen, width: int, chans=(4, 6, 8), size=(64, 64), batch=1):
    sizes = level_sizes(*size)
    levels = {}
    for lvl in LEVELS:
        c = chans[lvl - 3] if lvl <= 5 else width
        levels[lvl] = gen.standard_normal((batch, c, *sizes[lvl]))
    return Pyramid(levels)


def fpn_case(scheme: str = "als-light", seed: int = 0, seek_levels=(5,), width: int = 8,
             chans=(4, 6, 8)):
    """FPN graph seeded only at ``seek_levels``; variables are the inputs and the
    parameters that reach those outputs."""
    g = np.random.default_rng([seed, 303])
    pyr = _tiny_pyramid(g, width, chans)
    fpn = FeaturePyramid(scheme, dict(zip((3, 4, 5), chans)), width).initialize(RngSpec(seed))
    _rescale(fpn.named_params(), g)
    params = dict(fpn.named_params())

    def run():
        out = fpn.forward(pyr)

        def backward(seeds):
            dC, p = out.backward({lvl: seeds[f"P{lvl}"] for lvl in seek_levels})
            grads = {f"input:C{lvl}": dC[lvl] for lvl in LEVELS}
            grads.update({f"param:{k}": v for k, v in p.items()})
            return grads

        return {f"P{lvl}": out.levels[lvl] for lvl in seek_levels}, backward

    # find which parameters actually reach the seeded levels
    outs, backward = run()
    reached = backward({k: np.ones_like(v) for k, v in outs.items()})
    variables = {f"input:C{lvl}": pyr[lvl] for lvl in LEVELS}
    variables.update({f"param:{k}": v for k, v in params.items() if f"param:{k}" in reached})
    return run, variables


def head_case(scheme: str = "cls-first", seed: int = 0, anchor_free: bool = False,
              width: int = 8, level: int = 3):
    g = np.random.default_rng([seed, 404])
    if anchor_free:
        cfg = HeadConfig.fcos(num_classes=3, channels=width, norm_groups=2)
    else:
        cfg = HeadConfig.retinanet(num_classes=3, anchors_per_loc=2, channels=width)
    head = HeadAssembly(cfg, scheme).initialize(RngSpec(seed))
    _rescale(head.named_params(), g)
    params = dict(head.named_params())
    p = g.standard_normal((1, width, 4, 5))

    def run():
        out = head.forward(p, level)

        def backward(seeds):
            dp, pg = out.backward(seeds)
            grads = {"input:p": dp}
            grads.update({f"param:{k}": v for k, v in pg.items()})
            return grads

        return out.maps(), backward

    variables = {"input:p": p}
    variables.update({f"param:{k}": v for k, v in params.items()
                      if anchor_free or not k.startswith("scale")})
    if anchor_free:
        # only the scale of ``level`` is used
        variables = {k: v for k, v in variables.items()
                     if not k.startswith("param:scale") or k == f"param:scale{level - 3}.value"}
    return run, variables


def composed_cases(seed: int = 0):
    return {
        "sa_block_level4": sa_block_case(seed, 4),
        "sa_block_level7": sa_block_case(seed, 7),
        "als_light_level5": fpn_case("als-light", seed, (5,)),
        "als_all_levels": fpn_case("als", seed, LEVELS),
        "lls_all_levels": fpn_case("lls", seed, LEVELS),
        "baseline_fpn_all_levels": fpn_case("baseline", seed, LEVELS),
        "head_cls_first": head_case("cls-first", seed),
        "head_reg_first": head_case("reg-first", seed),
        "head_parallel": head_case("parallel", seed),
        "head_cls_first_anchor_free": head_case("cls-first", seed, anchor_free=True),
    }


def run_suite(seed: int = 0, eps: float = EPS, tol: float = TOL, max_per_group: int = 12,
              names=None) -> list[GradCheckReport]:
    """Kernels are checked on every element; composed graphs on sampled elements."""
    reports = []
    for cases, limit in ((kernel_cases(seed), None), (composed_cases(seed), max_per_group)):
        for name, (run, variables) in cases.items():
            if names is not None and name not in names:
                continue
            reports.append(grad_check(run, variables, name=name, eps=eps, tol=tol,
                                      max_per_group=limit, seed=seed))
    return reports
