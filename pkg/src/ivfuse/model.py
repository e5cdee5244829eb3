"""Dual-encoder fusion network with per-level 1x1 fusion and a skip decoder.

Two separate encoder stacks (visible RGB and infrared) each apply
conv -> leaky ReLU -> 2x2 average pool per level, halving the spatial
extent and doubling the channel count (level 0 is the stem that maps raw
input channels to ``base_channels``).  At every level the two feature maps
are concatenated and squeezed back to half the channels by a linear 1x1
convolution, which acts as learned per-channel attention.  The decoder
mirrors the encoder: transpose-conv upsampling, concatenation of the next
shallower fused feature, and a 3x3 conv per level, ending in a tanh that
maps the 3-channel output into (-1, 1).

Inputs must be divisible by 2**levels (32 for the default five levels);
``pad_to_multiple``/``crop_to`` handle everything else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    """A network or training configuration is invalid."""


@dataclass
class NetConfig:
    base_channels: int = 16
    levels: int = 5
    kernel_size: int = 3
    in_channels_visible: int = 3
    in_channels_ir: int = 1
    out_channels: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1; got {self.levels}")
        if min(self.base_channels, self.in_channels_visible, self.in_channels_ir,
               self.out_channels) <= 0:
            raise ConfigError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and >= 1; got {self.kernel_size}")

    @property
    def multiple(self):
        """Spatial divisibility the encoder requires."""
        return 2 ** self.levels

    def encoder_channels(self):
        """Output channels per encoder level: base, 2*base, 4*base, ..."""
        return [self.base_channels * 2 ** i for i in range(self.levels)]


class FusionNet:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config, params):
        self.config = config
        self.params = params  # dict name -> Tensor (all requires_grad leaves)

    def parameter_count(self):
        return sum(p.data.size for p in self.params.values())

    def named_parameters(self):
        return sorted(self.params.items())


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype, copy=False)


def build_network(cfg=None, seed=0, dtype=np.float64):
    """Allocate and seed-initialize all parameters; same seed, same bits."""
    cfg = cfg or NetConfig()
    rng = np.random.default_rng(seed)
    k = cfg.kernel_size
    params = {}

    def add_conv(name, c_in, c_out, kh, kw):
        fan_in, fan_out = c_in * kh * kw, c_out * kh * kw
        params[f"{name}.weight"] = Tensor(
            _glorot(rng, (c_out, c_in, kh, kw), fan_in, fan_out, dtype),
            requires_grad=True, dtype=dtype)
        params[f"{name}.bias"] = Tensor(
            np.zeros((1, c_out, 1, 1), dtype=dtype), requires_grad=True, dtype=dtype)

    def add_conv_transpose(name, c_in, c_out, kh, kw):
        fan_in, fan_out = c_in * kh * kw, c_out * kh * kw
        params[f"{name}.weight"] = Tensor(
            _glorot(rng, (c_in, c_out, kh, kw), fan_in, fan_out, dtype),
            requires_grad=True, dtype=dtype)
        params[f"{name}.bias"] = Tensor(
            np.zeros((1, c_out, 1, 1), dtype=dtype), requires_grad=True, dtype=dtype)

    enc = cfg.encoder_channels()
    for stream, c_raw in (("vis", cfg.in_channels_visible), ("ir", cfg.in_channels_ir)):
        c_prev = c_raw
        for i, c_out in enumerate(enc):
            add_conv(f"enc_{stream}.{i}", c_prev, c_out, k, k)
            c_prev = c_out
    for i, c in enumerate(enc):
        add_conv(f"fuse.{i}", 2 * c, c, 1, 1)
    for j in range(cfg.levels):
        c_in = cfg.base_channels * 2 ** (cfg.levels - 1 - j)
        if j < cfg.levels - 1:
            add_conv_transpose(f"dec.{j}.up", c_in, c_in // 2, 2, 2)
            add_conv(f"dec.{j}.conv", c_in, c_in // 2, k, k)
        else:
            add_conv_transpose(f"dec.{j}.up", c_in, c_in, 2, 2)
            add_conv(f"dec.{j}.conv", c_in, cfg.out_channels, k, k)
    return FusionNet(cfg, params)


def _check_divisible(shape, multiple, what):
    H, W = shape[2], shape[3]
    if H % multiple or W % multiple:
        raise ShapeError(
            f"{what} spatial size {H}x{W} must be divisible by {multiple}; "
            "pad_to_multiple first"
        )


def encode(net, stream, img):
    """Per-level feature tensors of one input stream ('vis' or 'ir')."""
    cfg = net.config
    if stream not in ("vis", "ir"):
        raise ValueError(f"stream must be 'vis' or 'ir'; got {stream!r}")
    expect = cfg.in_channels_visible if stream == "vis" else cfg.in_channels_ir
    if img.data.shape[1] != expect:
        raise ShapeError(
            f"{stream} input must have {expect} channels; got {img.shape}"
        )
    _check_divisible(img.data.shape, cfg.multiple, f"{stream} input")
    pad = cfg.kernel_size // 2
    feats = []
    x = img
    for i in range(cfg.levels):
        x = tz.conv2d(x, net.params[f"enc_{stream}.{i}.weight"],
                      net.params[f"enc_{stream}.{i}.bias"], stride=1, pad=pad)
        x = tz.leaky_relu(x)
        x = tz.avgpool2d(x, 2, 2)
        feats.append(x)
    return feats


def fuse_features(net, vis_feats, ir_feats):
    """Concatenate per-level features and squeeze channels with 1x1 convs."""
    cfg = net.config
    if len(vis_feats) != cfg.levels or len(ir_feats) != cfg.levels:
        raise ShapeError(
            f"expected {cfg.levels} features per stream; "
            f"got {len(vis_feats)} and {len(ir_feats)}"
        )
    fused = []
    for i, (v, r) in enumerate(zip(vis_feats, ir_feats)):
        if v.data.shape != r.data.shape:
            raise ShapeError(
                f"level {i} feature shapes differ: {v.shape} vs {r.shape}"
            )
        cat = tz.concat_channels(v, r)
        fused.append(tz.conv2d(cat, net.params[f"fuse.{i}.weight"],
                               net.params[f"fuse.{i}.bias"]))
    return fused


def decode(net, fused_feats):
    """Reconstruct the fused image from per-level fused features."""
    cfg = net.config
    if len(fused_feats) != cfg.levels:
        raise ShapeError(
            f"decoder expects {cfg.levels} fused features; got {len(fused_feats)}"
        )
    pad = cfg.kernel_size // 2
    x = fused_feats[-1]
    for j in range(cfg.levels):
        x = tz.conv_transpose2d(x, net.params[f"dec.{j}.up.weight"],
                                net.params[f"dec.{j}.up.bias"], stride=2)
        x = tz.leaky_relu(x)
        if j < cfg.levels - 1:
            x = tz.concat_channels(x, fused_feats[cfg.levels - 2 - j])
        x = tz.conv2d(x, net.params[f"dec.{j}.conv.weight"],
                      net.params[f"dec.{j}.conv.bias"], stride=1, pad=pad)
        if j < cfg.levels - 1:
            x = tz.leaky_relu(x)
    return tz.tanh_map(x)


def forward(net, vis, ir):
    """Fused (-1, 1) image for an aligned visible/infrared tensor pair."""
    if vis.data.shape[2:] != ir.data.shape[2:] or vis.data.shape[0] != ir.data.shape[0]:
        raise ShapeError(
            f"visible/infrared extents differ: {vis.shape} vs {ir.shape}"
        )
    vis_feats = encode(net, "vis", vis)
    ir_feats = encode(net, "ir", ir)
    return decode(net, fuse_features(net, vis_feats, ir_feats))


def pad_to_multiple(img, m=32):
    """Zero-pad right/bottom so H and W become multiples of ``m``.

    Returns the padded tensor and the original (H, W) for ``crop_to``.
    """
    if m < 1:
        raise ValueError(f"multiple must be >= 1; got {m}")
    B, C, H, W = img.data.shape
    ph = (-H) % m
    pw = (-W) % m
    if ph == 0 and pw == 0:
        return img, (H, W)
    out = np.pad(img.data, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return Tensor._wrap(out), (H, W)


def crop_to(img, size):
    """Crop bottom/right padding back off; inverse of ``pad_to_multiple``."""
    H, W = size
    if H > img.data.shape[2] or W > img.data.shape[3]:
        raise ShapeError(f"cannot crop {img.shape} to larger size {size}")
    return Tensor._wrap(np.ascontiguousarray(img.data[:, :, :H, :W]))
