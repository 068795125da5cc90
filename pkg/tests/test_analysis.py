import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zcd import gradcheck
from zcd.analysis import (
    bench,
    bench_pair,
    brute_force_param_count,
    count_flops,
    count_params,
    grad_check,
    relative_error,
    tape_macs,
)
from zcd.heads import HeadConfig, HeadScheme
from zcd.model import Detector
from zcd.pyramid import LEVELS
from zcd.safpn import FpnScheme
from zcd.tensor import ConvSpec


def _tiny(kind="retinanet", fpn="als-light", head="cls-first", width=16):
    cfg = (HeadConfig.retinanet(num_classes=3, anchors_per_loc=2) if kind == "retinanet"
           else HeadConfig.fcos(num_classes=3, norm_groups=4))
    ctor = Detector.retinanet if kind == "retinanet" else Detector.fcos
    return ctor("tiny", fpn_scheme=fpn, head_scheme=head, head_config=cfg, width=width)


# -- parameters -----------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(kind=st.sampled_from(["retinanet", "fcos"]), fpn=st.sampled_from([s.value for s in FpnScheme]),
       head=st.sampled_from([s.value for s in HeadScheme]), width=st.sampled_from([8, 16]))
def test_symbolic_and_brute_force_counts_agree(kind, fpn, head, width):
    det = _tiny(kind, fpn, head, width).initialize(1)
    assert count_params(det).total == brute_force_param_count(det)


def test_param_report_serialization():
    rep = count_params(Detector.retinanet("faithful-r50", fpn_scheme="baseline"))
    d = rep.to_dict()
    assert d["total"] == rep.total == sum(d["by_component"].values())
    assert set(d["by_component"]) == {"trunk", "fpn", "heads"}
    assert d["total_m"] == 38.0


def test_whole_model_totals_near_reported():
    for kind, profile, target in (("retinanet", "faithful-r50", 37.7), ("fcos", "faithful-r50", 32.0),
                                  ("retinanet", "faithful-r101", 56.6), ("fcos", "faithful-r101", 51.0)):
        ctor = Detector.fcos if kind == "fcos" else Detector.retinanet
        total = count_params(ctor(profile, fpn_scheme="baseline", head_scheme="parallel")).total
        assert abs(total / (target * 1e6) - 1) <= 0.02, (kind, profile, total)


def test_count_needs_no_materialization():
    det = Detector.retinanet("faithful-r101")
    assert not det.initialized
    assert count_params(det).total > 5e7


# -- FLOPs ----------------------------------------------------------------------


def test_conv_mac_closed_form():
    assert ConvSpec(256, 256, 3, 1, 1).macs(1, 4, 4) == 9 * 256 * 256 * 16 == 9_437_184


def test_doubling_height_doubles_every_conv():
    det = _tiny()
    a, b = count_flops(det, (1, 3, 256, 320)), count_flops(det, (1, 3, 512, 320))
    conv_a = {n: m for n, k, m in a.layers if k == "conv"}
    conv_b = {n: m for n, k, m in b.layers if k == "conv"}
    assert conv_a.keys() == conv_b.keys()
    assert all(conv_b[n] == 2 * conv_a[n] for n in conv_a)


def test_flops_additive_and_batch_linear():
    det = _tiny()
    one, two = count_flops(det, (1, 3, 128, 128)), count_flops(det, (2, 3, 128, 128))
    assert one.total == 2 * one.total_macs == 2 * sum(m for _, _, m in one.layers)
    assert two.total == 2 * one.total
    assert sum(one.by_kind().values()) == one.total_macs


@pytest.mark.parametrize("shape", [(1, 3, 64, 64), (1, 3, 256, 320), (2, 3, 100, 150),
                                   (1, 3, 800, 1333)])
@pytest.mark.parametrize("kind", ["retinanet", "fcos"])
def test_head_schemes_have_identical_flops(shape, kind):
    reps = [count_flops(_tiny(kind, head=s.value), shape) for s in HeadScheme]
    assert len({r.total for r in reps}) == 1
    assert all(r.multiset() == reps[0].multiset() for r in reps)


@pytest.mark.parametrize("fpn", [s.value for s in FpnScheme])
@pytest.mark.parametrize("kind", ["retinanet", "fcos"])
def test_symbolic_flops_match_executed_graph(fpn, kind):
    det = _tiny(kind, fpn).initialize(0)
    image = np.random.default_rng(0).standard_normal((1, 3, 96, 64))
    out = det.fpn.forward(det.pyramid(image))
    for lvl in LEVELS:
        det.heads.record(out.tape, out.out_keys[lvl], lvl, prefix=f"h{lvl}.")
    enumerated = tape_macs(out.tape)
    symbolic = {}
    for name, k, m in count_flops(det, image.shape).layers:
        if name.startswith(("fpn.", "head.")):
            symbolic[k] = symbolic.get(k, 0) + m
    assert symbolic == dict(enumerated)


def test_flop_report_serialization():
    d = count_flops(_tiny(), (1, 3, 64, 64)).to_dict()
    assert d["total"] == 2 * d["total_macs"]
    assert all({"name", "kind", "macs"} == set(layer) for layer in d["layers"])


# -- gradient checking ------------------------------------------------------------


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-12]))[0] == pytest.approx(1e-4)
    assert relative_error(np.array([2.0]), np.array([1.0]))[0] == 0.5


def _quadratic(bad=False):
    x = np.array([0.3, -1.2, 2.0])

    def run():
        def backward(seeds):
            g = 2 * x * seeds["y"]
            return {"x": g * (1.1 if bad else 1.0)}
        return {"y": x ** 2}, backward

    return run, {"x": x}


def test_grad_check_passes_correct_and_flags_wrong():
    assert grad_check(*_quadratic()).passed
    rep = grad_check(*_quadratic(bad=True))
    assert not rep.passed and rep.worst > 0.05


def test_grad_check_reports_non_finite_location():
    x = np.array([1.0, np.inf])

    def run():
        return {"y": x * 2}, lambda seeds: {"x": 2 * seeds["y"]}

    rep = grad_check(run, {"x": x}, name="inf")
    assert not rep.passed and "non-finite" in rep.failure


def test_grad_check_restores_variables():
    run, variables = _quadratic()
    before = variables["x"].copy()
    grad_check(run, variables)
    assert np.array_equal(variables["x"], before)


@pytest.mark.parametrize("name", ["conv2d", "softmax_branches", "bilinear_resize_up", "group_norm",
                                  "fuse"])
def test_kernel_cases_pass(name):
    (rep,) = gradcheck.run_suite(names={name})
    assert rep.passed, rep.to_dict()


def test_als_light_level5_subgraph_passes():
    (rep,) = gradcheck.run_suite(names={"als_light_level5"})
    assert rep.passed and rep.worst < 1e-4


# -- bench --------------------------------------------------------------------------


def test_bench_rejects_too_few_rounds():
    with pytest.raises(ValueError):
        bench({"a": lambda x: x}, 0, "a", rounds=9)
    with pytest.raises(ValueError):
        bench({"a": lambda x: x}, 0, "b")


def test_bench_self_ratio_near_one():
    a = np.random.default_rng(0).standard_normal((384, 384))

    def model(x):
        return x @ x

    rep = bench_pair(model, model, a, rounds=40)
    assert 0.98 <= rep.ratio("a") <= 1.02
    d = rep.to_dict()
    assert d["rounds"] == 40 and len(d["times_ns"]["a"]) == 40
    assert set(d) >= {"median_ns", "mean_ns", "ratio", "ratio_of_medians"}


def test_bench_paired_ratio_definition():
    from zcd.analysis import BenchReport

    rep = BenchReport(3, 0, {"ref": [10, 20, 40], "x": [11, 22, 36]}, "ref")
    assert rep.ratio("x") == pytest.approx(1.1)
    assert rep.ratio_of_medians("x") == pytest.approx(22 / 20)
    assert rep.ratio("ref") == 1.0
