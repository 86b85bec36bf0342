import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, rel_err
from usmtl import tensor as T
from usmtl.bridge import (
    FPN,
    BridgeConfig,
    FeatureBridge,
    build_token_pyramid,
    build_v1_pathway,
    fpn_fuse,
    level_sizes,
    pool_global,
)
from usmtl.encoder import EncoderConfig, HookedActivations, ToyEncoder, map_to_tokens, tokens_to_map
from usmtl.nn import LazyConv1x1
from usmtl.tensor import Tensor


@pytest.fixture(scope="module")
def encoder():
    return ToyEncoder(EncoderConfig(), np.random.default_rng(0))


def small_encoder(seed=0):
    cfg = EncoderConfig(image_size=16, patch_size=4, width=8, depth=4, heads=2, hook_depths=(0, 1, 2, 3))
    return ToyEncoder(cfg, np.random.default_rng(seed))


# ------------------------------------------------------------- encoder


def test_default_hook_shapes(encoder):
    img = np.random.default_rng(1).random((2, 3, 64, 64))
    hooked = encoder(Tensor(img))
    assert len(hooked) == 4
    assert all(t.shape == (2, 64, 64) for t in hooked.levels)
    assert hooked.grid == (8, 8)


def test_zero_image_finite(encoder):
    hooked = encoder(Tensor(np.zeros((1, 3, 64, 64))))
    assert all(np.all(np.isfinite(t.data)) for t in hooked.levels)


def test_pixel_perturbation_reaches_all_hooks(encoder):
    img = np.random.default_rng(2).random((1, 3, 64, 64))
    base = encoder(Tensor(img))
    img2 = img.copy()
    img2[0, :, 5, 60] += 0.5
    moved = encoder(Tensor(img2))
    for a, b in zip(base.levels, moved.levels):
        diff = np.abs(a.data - b.data)
        assert diff.max() > 0
        # attention spreads the change beyond the perturbed patch
        assert np.count_nonzero(diff.max(axis=2) > 0) == a.shape[1]


def test_wrong_size_rejected(encoder):
    with pytest.raises(ValueError, match="64x64"):
        encoder(Tensor(np.zeros((1, 3, 32, 32))))


def test_hooks_roughly_uniform():
    gaps = np.diff((1, 3, 5, 7))
    assert gaps.max() - gaps.min() <= 1
    assert EncoderConfig().hook_depths == (1, 3, 5, 7)


@pytest.mark.parametrize("kwargs", [
    {"image_size": 60}, {"hook_depths": (1, 2, 3)}, {"hook_depths": (3, 1, 5, 7)}, {"hook_depths": (1, 3, 5, 8)},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        EncoderConfig(**kwargs)


def test_encoder_deterministic_given_seed():
    img = np.random.default_rng(3).random((1, 3, 16, 16))
    a = small_encoder(5)(Tensor(img))
    b = small_encoder(5)(Tensor(img))
    for x, y in zip(a.levels, b.levels):
        assert x.data.tobytes() == y.data.tobytes()


def test_gradient_from_shallow_hook_reaches_patch_embed():
    enc = small_encoder(1)
    img = np.random.default_rng(4).random((1, 3, 16, 16))
    wts = np.random.default_rng(5).normal(size=(1, 16, 8))
    w = enc.patch_embed.weight
    T.backward(T.sum_(T.mul(enc(Tensor(img)).levels[0], wts)))
    analytic = w.grad.copy()
    orig = w.data.copy()
    coords = [(0, 0), (3, 17), (7, 47)]

    def f_at(idx):
        def f(v):
            w.data = orig.copy()
            w.data[idx] = v[0]
            return float(np.sum(enc(Tensor(img)).levels[0].data * wts))
        return f

    for idx in coords:
        fd = central_difference(f_at(idx), np.array([orig[idx]]))[0]
        assert rel_err(analytic[idx], fd) < 1e-4
    w.data = orig


def test_tokens_to_map_layout():
    tok = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1))
    np.testing.assert_array_equal(tokens_to_map(tok, 2, 2).data[0, 0], [[1, 2], [3, 4]])


def test_tokens_to_map_roundtrip_and_sum():
    fmap = np.random.default_rng(6).normal(size=(2, 3, 4, 5))
    back = tokens_to_map(map_to_tokens(Tensor(fmap)), 4, 5).data
    np.testing.assert_array_equal(back, fmap)
    tok = np.random.default_rng(7).normal(size=(2, 20, 3))
    assert tokens_to_map(Tensor(tok), 4, 5).data.sum() == tok.sum()


def test_tokens_to_map_element_mapping():
    tok = np.random.default_rng(8).normal(size=(2, 12, 3))
    m = tokens_to_map(Tensor(tok), 3, 4).data
    for b, n, c in [(0, 0, 0), (1, 7, 2), (0, 11, 1)]:
        assert m[b, c, n // 4, n % 4] == tok[b, n, c]


def test_tokens_to_map_bad_count():
    with pytest.raises(ValueError, match="h\\*w"):
        tokens_to_map(Tensor(np.zeros((1, 5, 2))), 2, 2)


# ------------------------------------------------------------- bridge


def hooked_random(b=1, h=8, w=8, c=6, seed=0):
    rng = np.random.default_rng(seed)
    return HookedActivations([Tensor(rng.normal(size=(b, h * w, c))) for _ in range(4)], (h, w))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 32), st.integers(2, 32))
def test_level_sizes_halving(h, w):
    sizes = level_sizes(h, w)
    assert len(sizes) == 4 and sizes[0] == (h, w)
    for (a, b), (c, d) in zip(sizes, sizes[1:]):
        assert (c, d) == (-(-a // 2), -(-b // 2))


@pytest.mark.parametrize("n,expected", [(8, [8, 4, 2, 1]), (16, [16, 8, 4, 2])])
def test_token_pyramid_sizes(n, expected):
    maps = [Tensor(np.ones((1, 2, n, n))) for _ in range(4)]
    assert [m.shape[2] for m in build_token_pyramid(maps)] == expected


def test_token_pyramid_constant():
    levels = build_token_pyramid([Tensor(np.full((1, 2, 8, 8), 1.75)) for _ in range(4)])
    for lv in levels:
        np.testing.assert_allclose(lv.data, 1.75, atol=1e-14)


def test_projection_width_and_lazy_mismatch():
    proj = LazyConv1x1(256, np.random.default_rng(0))
    out = proj(Tensor(np.ones((1, 64, 8, 8))))
    assert out.shape == (1, 256, 8, 8)
    with pytest.raises(ValueError):
        proj(Tensor(np.ones((1, 32, 8, 8))))


def test_identity_projection():
    proj = LazyConv1x1(4, np.random.default_rng(0))
    proj.build(4)
    proj.weight.data = np.eye(4).reshape(4, 4, 1, 1)
    proj.bias.data = np.zeros(4)
    x = np.random.default_rng(1).normal(size=(1, 4, 3, 3))
    np.testing.assert_array_equal(proj(Tensor(x)).data, x)


def test_pyramid_shapes_d256():
    bridge = FeatureBridge(BridgeConfig(width=256), np.random.default_rng(0))
    pyr = bridge.fpn_pathway(hooked_random(b=2, c=64))
    assert [p.shape for p in pyr.levels] == [(2, 256, 8, 8), (2, 256, 4, 4), (2, 256, 2, 2), (2, 256, 1, 1)]
    assert pool_global(pyr).shape == (2, 1024)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 12))
def test_embedding_is_4d(d):
    bridge = FeatureBridge(BridgeConfig(width=d), np.random.default_rng(0))
    hooked = hooked_random(h=5, w=3, c=4)
    assert pool_global(bridge.fpn_pathway(hooked)).shape == (1, 4 * d)
    assert bridge.v1_pathway(hooked)[1].shape == (1, 4 * d)


def test_pool_constant_and_order():
    levels = [Tensor(np.full((1, 2, s, s), float(i + 1))) for i, s in enumerate([8, 4, 2, 1])]
    e = pool_global(levels).data[0]
    np.testing.assert_allclose(e, [1, 1, 2, 2, 3, 3, 4, 4])


def test_pool_permutation_invariant():
    rng = np.random.default_rng(2)
    levels = [rng.normal(size=(1, 3, s, s)) for s in [4, 2, 2, 1]]
    perm = [lv.reshape(1, 3, -1)[:, :, rng.permutation(lv.shape[2] * lv.shape[3])].reshape(lv.shape) for lv in levels]
    np.testing.assert_allclose(pool_global([Tensor(x) for x in levels]).data,
                               pool_global([Tensor(x) for x in perm]).data, atol=1e-14)


def _identity_fpn(d):
    fpn = FPN(d, np.random.default_rng(0))
    for lat in fpn.lateral:
        lat.weight.data = np.eye(d).reshape(d, d, 1, 1)
        lat.bias.data = np.zeros(d)
    return fpn


def test_fpn_zero_top_identity_laterals():
    d = 3
    fpn = _identity_fpn(d)
    rng = np.random.default_rng(3)
    levels = [Tensor(rng.normal(size=(1, d, s, s))) for s in [8, 4, 2]] + [Tensor(np.zeros((1, d, 1, 1)))]
    # zero out everything above the finest level so only the finest lateral survives
    levels[1] = Tensor(np.zeros((1, d, 4, 4)))
    levels[2] = Tensor(np.zeros((1, d, 2, 2)))
    p2 = fpn_fuse(fpn, levels)[0].data
    expected = T.relu(fpn.smooth[0](levels[0])).data
    np.testing.assert_allclose(p2, expected, atol=1e-14)


def test_fpn_depends_on_every_level():
    bridge = FeatureBridge(BridgeConfig(width=4), np.random.default_rng(1))
    hooked = hooked_random(c=5, seed=4)
    base = bridge.fpn_pathway(hooked)
    for i in range(4):
        lv = list(hooked.levels)
        lv[i] = Tensor(np.zeros_like(lv[i].data))
        out = bridge.fpn_pathway(HookedActivations(lv, hooked.grid))
        assert any(not np.array_equal(a.data, b.data) for a, b in zip(base.levels, out.levels))


def test_p2_gradient_reaches_all_hooks():
    bridge = FeatureBridge(BridgeConfig(width=3), np.random.default_rng(2))
    rng = np.random.default_rng(5)
    toks = [Tensor(rng.normal(size=(1, 16, 2)), requires_grad=True) for _ in range(4)]
    hk = HookedActivations(toks, (4, 4))
    wts = rng.normal(size=(1, 3, 4, 4))
    T.backward(T.sum_(T.mul(bridge.fpn_pathway(hk)[0], wts)))
    for i, t in enumerate(toks):
        assert np.abs(t.grad).max() > 0

        def f(v, i=i):
            lv = [Tensor(x.data) for x in toks]
            lv[i] = Tensor(v)
            return float(np.sum(bridge.fpn_pathway(HookedActivations(lv, (4, 4)))[0].data * wts))

        assert rel_err(t.grad, central_difference(f, toks[i].data)) < 1e-4


def test_projection_gradient_fd():
    bridge = FeatureBridge(BridgeConfig(width=2), np.random.default_rng(3))
    hk = hooked_random(h=4, w=4, c=3, seed=6)
    bridge.v1_pathway(hk)
    w = bridge.projections[1].weight
    wts = np.random.default_rng(7).normal(size=(1, 8))
    T.backward(T.sum_(T.mul(bridge.v1_pathway(hk)[1], wts)))
    orig = w.data.copy()

    def f(v):
        w.data = v.reshape(orig.shape)
        return float(np.sum(bridge.v1_pathway(hk)[1].data * wts))

    fd = central_difference(f, orig.copy())
    w.data = orig
    assert rel_err(w.grad, fd) < 1e-4


def test_v1_finest_equals_projection():
    bridge = FeatureBridge(BridgeConfig(width=4), np.random.default_rng(4))
    hk = hooked_random(c=3, seed=8)
    levels, emb = bridge.v1_pathway(hk)
    proj = bridge.project(hk)
    assert levels[0].data.tobytes() == proj[0].data.tobytes()
    assert emb.shape == (1, 16)


def test_v1_constant_embedding():
    levels = [Tensor(np.full((1, 2, s, s), 0.3)) for s in [8, 4, 2, 1]]
    lv, e = build_v1_pathway(levels)
    np.testing.assert_allclose(e.data, 0.3, atol=1e-15)
    assert [x.shape for x in lv] == [x.shape for x in levels]


def test_fpn_and_v1_shapes_match_when_fpn_zeroed():
    bridge = FeatureBridge(BridgeConfig(width=4), np.random.default_rng(5))
    hk = hooked_random(c=3, seed=9)
    bridge.fpn_pathway(hk)
    for conv in bridge.fpn.lateral + bridge.fpn.smooth:
        conv.weight.data[:] = 0.0
        conv.bias.data[:] = 0.0
    fpn = bridge.fpn_pathway(hk)
    v1, _ = bridge.v1_pathway(hk)
    assert [p.shape for p in fpn.levels] == [p.shape for p in v1]
    assert not np.array_equal(fpn[0].data, v1[0].data)
