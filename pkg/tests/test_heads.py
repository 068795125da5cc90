import math

import numpy as np
import pytest

from zcd.heads import HeadAssembly, HeadConfig, HeadScheme, count_head_params
from zcd.tensor import Conv2dNode, ReluNode, RngSpec, ShapeError, Tape, conv2d, relu


def _heads(scheme, cfg=None, seed=0):
    return HeadAssembly(cfg or HeadConfig.retinanet(), scheme).initialize(RngSpec(seed))


def test_anchor_based_shapes():
    out = _heads("cls-first").forward(np.random.default_rng(0).standard_normal((1, 256, 4, 4)))
    assert out.cls.shape == (1, 720, 4, 4) and out.reg.shape == (1, 36, 4, 4)
    assert out.centerness is None


def test_anchor_free_shapes():
    out = _heads("cls-first", HeadConfig.fcos()).forward(np.zeros((1, 256, 4, 4)), level=3)
    assert out.cls.shape == (1, 80, 4, 4)
    assert out.reg.shape == (1, 4, 4, 4)
    assert out.centerness.shape == (1, 1, 4, 4)


def test_channel_mismatch_rejected():
    with pytest.raises(ShapeError):
        _heads("parallel").forward(np.zeros((1, 128, 4, 4)))


def test_closed_form_counts():
    h = HeadAssembly(HeadConfig.retinanet(), "parallel")
    assert h.out_specs["cls_out"].param_count == 3 * 3 * 256 * 720 + 720 == 1_659_600
    assert 4 * h.tower_spec.param_count == 2_360_320
    expected = 2 * 2_360_320 + 1_659_600 + (3 * 3 * 256 * 36 + 36)
    assert h.param_count() == expected


@pytest.mark.parametrize("cfg", [HeadConfig.retinanet(), HeadConfig.fcos(),
                                 HeadConfig.fcos(norm_affine=False, centerness=False),
                                 HeadConfig.retinanet(num_classes=20, anchors_per_loc=3)])
def test_count_independent_of_scheme(cfg):
    counts = {count_head_params(cfg, s) for s in HeadScheme}
    assert len(counts) == 1
    heads = _heads("reg-first", cfg)
    assert sum(a.size for _, a in heads.named_params()) == counts.pop()


def _chain(layers, x):
    for p in layers:
        x = relu(conv2d(x, p))
    return x


@pytest.mark.parametrize("scheme", list(HeadScheme))
def test_data_flow_matches_hand_composition(scheme):
    heads = _heads(scheme, HeadConfig.retinanet(num_classes=3, anchors_per_loc=2, channels=16))
    p = np.random.default_rng(1).standard_normal((2, 16, 5, 6))
    out = heads.forward(p)
    if scheme is HeadScheme.PARALLEL:
        cls_feat, reg_feat = _chain(heads.cls_tower, p), _chain(heads.reg_tower, p)
    elif scheme is HeadScheme.CLS_FIRST:
        cls_feat = _chain(heads.cls_tower, p)
        reg_feat = _chain(heads.reg_tower, cls_feat)
    else:
        reg_feat = _chain(heads.reg_tower, p)
        cls_feat = _chain(heads.cls_tower, reg_feat)
    assert np.array_equal(out.cls, conv2d(cls_feat, heads.outputs["cls_out"]))
    assert np.array_equal(out.reg, conv2d(reg_feat, heads.outputs["reg_out"]))


def test_cls_first_and_parallel_share_cls_map():
    cfg = HeadConfig.retinanet(num_classes=3, anchors_per_loc=2, channels=16)
    a, b = _heads("parallel", cfg, 4), _heads("cls-first", cfg, 4)
    p = np.random.default_rng(2).standard_normal((1, 16, 4, 4))
    oa, ob = a.forward(p), b.forward(p)
    assert np.array_equal(oa.cls, ob.cls)
    assert not np.array_equal(oa.reg, ob.reg)


def test_init_rules():
    heads = _heads("cls-first")
    assert np.all(heads.outputs["cls_out"].bias == -math.log(99))
    assert abs(heads.outputs["cls_out"].bias[0] + 4.59512) < 1e-5
    for name, arr in heads.named_params():
        if name.endswith(".bias") and not name.startswith("cls_out"):
            assert np.all(arr == 0), name
    out = heads.forward(np.zeros((1, 256, 3, 3)))
    probs = 1 / (1 + np.exp(-out.cls))
    assert np.allclose(probs, 0.01, rtol=0, atol=1e-12)
    w = heads.cls_tower[0].weight
    assert abs(w.std() - 0.01) < 0.0005


def test_fcos_scale_and_norm_init():
    heads = _heads("cls-first", HeadConfig.fcos())
    assert len(heads.scales) == 5 and all(s[0] == 1.0 for s in heads.scales)
    assert all(np.all(g == 1) and np.all(b == 0) for g, b in heads.norms.values())


def test_fcos_scale_is_per_level():
    heads = _heads("cls-first", HeadConfig.fcos(num_classes=3, channels=8, norm_groups=2))
    p = np.random.default_rng(3).standard_normal((1, 8, 3, 3))
    heads.scales[2][0] = 2.0
    assert np.allclose(heads.forward(p, 5).reg, 2 * heads.forward(p, 3).reg)


def test_same_weights_for_every_scheme():
    a, b = _heads("parallel", seed=9), _heads("reg-first", seed=9)
    for (na, xa), (nb, xb) in zip(a.named_params(), b.named_params()):
        assert na == nb and np.array_equal(xa, xb)


def test_record_on_shared_tape_accumulates_shared_grads():
    cfg = HeadConfig.retinanet(num_classes=2, anchors_per_loc=1, channels=8)
    heads = _heads("cls-first", cfg, 1)
    g = np.random.default_rng(5)
    tape = Tape(a=g.standard_normal((1, 8, 4, 4)), b=g.standard_normal((1, 8, 2, 2)))
    ka, kb = heads.record(tape, "a", prefix="A."), heads.record(tape, "b", prefix="B.")
    seeds = {ka["cls"]: np.ones_like(tape[ka["cls"]]), kb["cls"]: np.ones_like(tape[kb["cls"]])}
    _, both = tape.backward(seeds)
    _, only_a = heads.forward(tape["a"]).backward({"cls": np.ones_like(tape[ka["cls"]])})
    _, only_b = heads.forward(tape["b"]).backward({"cls": np.ones_like(tape[kb["cls"]])})
    assert np.allclose(both["cls_out.weight"], only_a["cls_out.weight"] + only_b["cls_out.weight"])


def test_scheme_parse_and_config_validation():
    assert HeadScheme.parse("ClsFirst") is HeadScheme.CLS_FIRST
    with pytest.raises(ValueError):
        HeadScheme.parse("diagonal")
    with pytest.raises(ValueError):
        HeadConfig(num_classes=0)


def test_nodes_used_are_plain():
    # ReLU after every tower conv: the graph holds 8 relu and 10 conv nodes for RetinaNet
    heads = _heads("cls-first", HeadConfig.retinanet(channels=8, num_classes=2, anchors_per_loc=1))
    out = heads.forward(np.zeros((1, 8, 2, 2)))
    kinds = [type(node) for node, *_ in out.tape.entries]
    assert kinds.count(Conv2dNode) == 10 and kinds.count(ReluNode) == 8
