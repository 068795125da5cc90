import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zcd.pyramid import (
    BackboneProfile,
    BackboneStub,
    LevelExtender,
    Pyramid,
    extend_levels,
    level_sizes,
    resnet_trunk_param_count,
    stride_of,
)
from zcd.tensor import RngSpec, ShapeError

# one bottleneck at the 1024-channel stage: 1x1 reduce, 3x3, 1x1 expand, three BN affines
STAGE4_BLOCK = 1024 * 256 + 9 * 256 * 256 + 256 * 1024 + 2 * (256 + 256 + 1024)


def _stub(name, seed=0):
    return BackboneStub(BackboneProfile(name)).initialize(RngSpec(seed))


def test_tiny_profile_shapes():
    feats = _stub("tiny").forward(np.random.default_rng(0).standard_normal((1, 3, 64, 64)))
    assert feats[3].shape == (1, 8, 8, 8)
    assert feats[4].shape == (1, 16, 4, 4)
    assert feats[5].shape == (1, 32, 2, 2)


def test_faithful_profile_channels():
    feats = _stub("faithful-r50").forward(np.zeros((1, 3, 64, 64)))
    assert [feats[lvl].shape[1] for lvl in (3, 4, 5)] == [512, 1024, 2048]
    assert BackboneProfile("faithful-r101").level_channels == {3: 512, 4: 1024, 5: 2048}


def test_backbone_is_deterministic():
    x = np.random.default_rng(1).standard_normal((1, 3, 64, 96))
    a, b = _stub("tiny", 5).forward(x), _stub("tiny", 5).forward(x)
    assert all(np.array_equal(a[k], b[k]) for k in (3, 4, 5))
    c = _stub("tiny", 6).forward(x)
    assert not np.array_equal(a[3], c[3])


@settings(max_examples=25, deadline=None)
@given(h=st.integers(64, 200), w=st.integers(64, 200))
def test_strides_and_level_sizes(h, w):
    feats = _stub("tiny").forward(np.zeros((1, 3, h, w)))
    sizes = level_sizes(h, w)
    for lvl in (3, 4, 5):
        assert feats[lvl].shape[2:] == sizes[lvl]
        assert sizes[lvl] == (-(-h // stride_of(lvl)), -(-w // stride_of(lvl)))


def test_extender_shapes_and_counts():
    ext = LevelExtender(2048)
    assert ext.specs["c6"].param_count == 3 * 3 * 2048 * 256 + 256 == 4_718_848
    assert ext.specs["c7"].param_count == 3 * 3 * 256 * 256 + 256 == 590_080
    c6, c7 = extend_levels(np.zeros((1, 2048, 8, 8)), RngSpec(0))
    assert c6.shape == (1, 256, 4, 4) and c7.shape == (1, 256, 2, 2)


def test_extender_rejects_tiny_c5():
    with pytest.raises(ShapeError):
        extend_levels(np.zeros((1, 8, 1, 4)), RngSpec(0))


def test_extender_relu_variant_same_params():
    assert LevelExtender(32, relu_between=True).param_count() == LevelExtender(32).param_count()


def test_trunk_counts_and_block_delta():
    r50, r101 = resnet_trunk_param_count(50), resnet_trunk_param_count(101)
    assert 23.4e6 < r50 < 23.6e6 and 42.4e6 < r101 < 42.6e6
    assert r101 - r50 == 17 * STAGE4_BLOCK
    with pytest.raises(ValueError):
        resnet_trunk_param_count(34)


@pytest.mark.parametrize("depth", [50, 101])
def test_trunk_matches_torchvision(depth):
    models = pytest.importorskip("torchvision.models")
    net = getattr(models, f"resnet{depth}")(weights=None)
    total = sum(p.numel() for name, p in net.named_parameters() if not name.startswith("fc."))
    assert resnet_trunk_param_count(depth) == total


def test_pyramid_container():
    p = Pyramid({5: np.zeros((1, 4, 2, 2)), 3: np.zeros((1, 2, 8, 8))})
    assert list(p.levels) == [3, 5]
    assert p.channels(3) == 2 and p.spatial(5) == (2, 2) and p.stride(5) == 32
    with pytest.raises(KeyError):
        p[4]
    with pytest.raises(ValueError):
        p.require()
    with pytest.raises(ValueError):
        Pyramid({2: np.zeros((1, 1, 1, 1))})


def test_unknown_profile_rejected():
    with pytest.raises(ValueError):
        BackboneProfile("resnet18")
