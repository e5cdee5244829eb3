import numpy as np
import numpy.testing as npt
import pytest

from ivfuse import model as md
from ivfuse import tensor as tz
from ivfuse.loss import LossConfig, fusion_loss
from ivfuse.metrics import WindowConfig
from ivfuse.model import ConfigError, NetConfig, build_network
from ivfuse.tensor import ShapeError, Tape, Tensor

TINY = NetConfig(base_channels=4, levels=3)


def rand_pair(rng, h, w, batch=1):
    vis = Tensor(rng.uniform(-1, 1, size=(batch, 3, h, w)))
    ir = Tensor(rng.uniform(-1, 1, size=(batch, 1, h, w)))
    return vis, ir


# ---------------------------------------------------------------------------
# construction


def test_config_validation():
    with pytest.raises(ConfigError):
        NetConfig(levels=0)
    with pytest.raises(ConfigError):
        NetConfig(base_channels=0)
    with pytest.raises(ConfigError):
        NetConfig(kernel_size=4)


def test_default_channel_progression():
    assert NetConfig().encoder_channels() == [16, 32, 64, 128, 256]


def test_same_seed_same_bits():
    a = build_network(TINY, seed=11)
    b = build_network(TINY, seed=11)
    assert a.params.keys() == b.params.keys()
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)
    c = build_network(TINY, seed=12)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


def test_parameter_count_levels1_base4():
    # conv parameter sums, worked out from the layer shapes:
    #   enc vis 3->4 (3x3): 3*4*9+4 = 112      enc ir 1->4: 1*4*9+4 = 40
    #   fuse 1x1 8->4:      8*4+4   = 36
    #   dec up 4->4 (2x2):  4*4*4+4 = 68       dec conv 4->3 (3x3): 4*3*9+3 = 111
    net = build_network(NetConfig(base_channels=4, levels=1), seed=0)
    assert net.parameter_count() == 112 + 40 + 36 + 68 + 111


# ---------------------------------------------------------------------------
# encode


def test_encoder_feature_shapes(rng):
    net = build_network(NetConfig(), seed=0)
    feats = md.encode(net, "vis", Tensor(rng.uniform(size=(1, 3, 64, 64))))
    shapes = [f.shape for f in feats]
    assert shapes == [(1, 16, 32, 32), (1, 32, 16, 16), (1, 64, 8, 8),
                      (1, 128, 4, 4), (1, 256, 2, 2)]


def test_encoder_zero_image_zero_features():
    net = build_network(TINY, seed=0)  # biases start at zero
    feats = md.encode(net, "ir", Tensor(np.zeros((1, 1, 16, 16))))
    for f in feats:
        assert np.all(np.isfinite(f.data))
        npt.assert_array_equal(f.data, np.zeros_like(f.data))


def test_encoder_parameter_separation(rng):
    net = build_network(TINY, seed=3)
    img = Tensor(rng.uniform(size=(1, 3, 16, 16)))
    before = [f.data.copy() for f in md.encode(net, "vis", img)]
    net.params["enc_ir.0.weight"].data += 0.5  # perturb the other stream
    after = md.encode(net, "vis", img)
    for x, y in zip(before, after):
        assert np.array_equal(x, y.data)


def test_encoder_shape_errors(rng):
    net = build_network(TINY, seed=0)
    with pytest.raises(ShapeError):
        md.encode(net, "vis", Tensor(rng.uniform(size=(1, 1, 16, 16))))
    with pytest.raises(ShapeError):
        md.encode(net, "vis", Tensor(rng.uniform(size=(1, 3, 20, 16))))


# ---------------------------------------------------------------------------
# fuse_features


def test_fusion_shape_contract(rng):
    net = build_network(TINY, seed=0)
    vis, ir = rand_pair(rng, 16, 16)
    fused = md.fuse_features(net, md.encode(net, "vis", vis), md.encode(net, "ir", ir))
    assert [f.shape for f in fused] == [(1, 4, 8, 8), (1, 8, 4, 4), (1, 16, 2, 2)]


def test_fusion_selector_weight_picks_visible_stream(rng):
    net = build_network(TINY, seed=0)
    vis, ir = rand_pair(rng, 16, 16)
    vis_feats = md.encode(net, "vis", vis)
    ir_feats = md.encode(net, "ir", ir)
    for i, c in enumerate(net.config.encoder_channels()):
        w = np.zeros((c, 2 * c, 1, 1))
        w[:, :c, 0, 0] = np.eye(c)  # pass the first (visible) half through
        net.params[f"fuse.{i}.weight"].data = w
        net.params[f"fuse.{i}.bias"].data[:] = 0.0
    fused = md.fuse_features(net, vis_feats, ir_feats)
    for f, v in zip(fused, vis_feats):
        npt.assert_allclose(f.data, v.data, atol=1e-12)


def test_fusion_gradient_reaches_both_encoders(rng):
    net = build_network(TINY, seed=5)
    vis, ir = rand_pair(rng, 16, 16)
    with Tape() as tape:
        out = md.forward(net, vis, ir)
        root = tz.reduce_mean(out * out)
    tz.zero_grads(net.params.values())
    tape.backward(root)
    assert np.abs(net.params["enc_vis.0.weight"].grad).max() > 0
    assert np.abs(net.params["enc_ir.0.weight"].grad).max() > 0


def test_fusion_shape_mismatch(rng):
    net = build_network(TINY, seed=0)
    vis, ir = rand_pair(rng, 16, 16)
    feats = md.encode(net, "vis", vis)
    with pytest.raises(ShapeError):
        md.fuse_features(net, feats, feats[:-1])


# ---------------------------------------------------------------------------
# decode / forward


def test_decode_output_shape_and_range(rng):
    net = build_network(NetConfig(), seed=1)
    vis, ir = rand_pair(rng, 64, 64)
    out = md.forward(net, vis, ir)
    assert out.shape == (1, 3, 64, 64)
    assert out.data.min() > -1.0 and out.data.max() < 1.0


def test_decode_zero_parameters_zero_output(rng):
    net = build_network(TINY, seed=0)
    for p in net.params.values():
        p.data[:] = 0.0
    vis, ir = rand_pair(rng, 16, 16)
    out = md.forward(net, vis, ir)
    npt.assert_array_equal(out.data, np.zeros_like(out.data))


def test_forward_shape_chain(rng):
    net = build_network(TINY, seed=2)
    for h, w in ((16, 16), (16, 24), (32, 16)):
        vis, ir = rand_pair(rng, h, w)
        assert md.forward(net, vis, ir).shape == (1, 3, h, w)


def test_forward_batched(rng):
    net = build_network(TINY, seed=2)
    vis, ir = rand_pair(rng, 16, 16, batch=3)
    assert md.forward(net, vis, ir).shape == (3, 3, 16, 16)


def test_forward_determinism(rng):
    net = build_network(TINY, seed=9)
    vis, ir = rand_pair(rng, 16, 16)
    a = md.forward(net, vis, ir)
    b = md.forward(net, vis, ir)
    assert np.array_equal(a.data, b.data)


def test_forward_size_mismatch(rng):
    net = build_network(TINY, seed=0)
    vis = Tensor(rng.uniform(size=(1, 3, 16, 16)))
    ir = Tensor(rng.uniform(size=(1, 1, 24, 24)))
    with pytest.raises(ShapeError):
        md.forward(net, vis, ir)


def test_full_network_gradient_check_tiny():
    """End-to-end finite differences through forward + loss at 32x32.

    skip_kinks drops the few stencils that straddle a leaky-rectifier kink,
    where central differences stop estimating the derivative.
    """
    rng = np.random.default_rng(77)
    net = build_network(TINY, seed=4)
    vis = Tensor(rng.uniform(size=(1, 3, 32, 32)))
    ir = Tensor(rng.uniform(size=(1, 1, 32, 32)))
    cfg = LossConfig(window=WindowConfig(stride=4))

    def f():
        fused01 = (md.forward(net, Tensor(2.0 * vis.data - 1.0),
                              Tensor(2.0 * ir.data - 1.0)) + 1.0) * 0.5
        return fusion_loss(vis, ir, fused01, cfg)

    wrt = [net.params[n] for n in sorted(net.params)]
    err = tz.gradient_check(f, wrt, max_coords=6, rng=np.random.default_rng(5),
                            skip_kinks=True)
    assert err < 1e-4, err


# ---------------------------------------------------------------------------
# pad / crop


def test_pad_to_multiple_values():
    img = Tensor(np.ones((1, 1, 100, 150)))
    padded, size = md.pad_to_multiple(img, 32)
    assert padded.shape == (1, 1, 128, 160)
    assert size == (100, 150)
    npt.assert_array_equal(padded.data[:, :, 100:, :], 0.0)


def test_pad_to_multiple_noop():
    img = Tensor(np.ones((1, 1, 64, 64)))
    padded, size = md.pad_to_multiple(img, 32)
    assert padded is img and size == (64, 64)


def test_pad_crop_round_trip_bitwise(rng):
    for _ in range(10):
        h = int(rng.integers(5, 97))
        w = int(rng.integers(5, 97))
        img = Tensor(rng.uniform(size=(1, 3, h, w)))
        padded, size = md.pad_to_multiple(img, 32)
        back = md.crop_to(padded, size)
        assert np.array_equal(back.data, img.data)
