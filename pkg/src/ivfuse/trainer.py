"""Training loop: ADAM, milestone LR schedule, augmentation, synthetic data.

The optimizer follows the usual bias-corrected first/second moment recipe
with beta1=0.9, beta2=0.99, eps=1e-8; the learning rate starts at 0.001 and
halves after epochs 10, 20 and 30.  Inputs are normalized to [-1, 1] before
the network; the loss compares the [0, 1]-mapped output against the clean
(un-augmented) pair by default, so blur/noise act as a denoising regularizer.

``synth_pairs`` generates aligned visible/infrared pairs for desk-scale runs:
shared random geometry, color + texture only in the visible band, per-object
uniform intensity plus visible-band-invisible hot spots in the infrared band.
A strip on the right of every image is kept object-free and receives one
guaranteed infrared hot spot and one guaranteed visible-only texture patch,
so each pair contains regions where either modality strongly dominates.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import weights as wio
from .loss import LossConfig, fusion_loss
from .metrics import WindowConfig, luminance, qe, qw
from .model import ConfigError, forward
from .tensor import Tape, Tensor, zero_grads


class TrainingError(RuntimeError):
    """Optimization hit a non-finite value or an inconsistent state."""


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8


def init_adam(net, beta1=0.9, beta2=0.99, eps=1e-8):
    zeros = {name: np.zeros_like(p.data) for name, p in net.params.items()}
    return AdamState(m=zeros, v={k: v.copy() for k, v in zeros.items()},
                     beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, state, lr):
    """One bias-corrected ADAM update over all params that received grads."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0; got {lr}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class Schedule:
    milestones: tuple = (10, 20, 30)
    factor: float = 0.5
    base_lr: float = 0.001


def lr_at(epoch, schedule=None):
    """Piecewise-constant LR: base * factor^(number of milestones <= epoch)."""
    schedule = schedule or Schedule()
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0; got {epoch}")
    hits = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * schedule.factor ** hits


# ---------------------------------------------------------------------------
# input pipeline


@dataclass
class AugmentConfig:
    blur_sigma: tuple = (0.0, 1.5)
    noise_sigma: tuple = (0.0, 0.05)
    prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.blur_sigma) < 0 or min(self.noise_sigma) < 0:
            raise ConfigError("augmentation sigmas must be >= 0")
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError(f"apply probability must be in [0, 1]; got {self.prob}")


def augment(vis, ir, cfg=None, rng=None):
    """Randomly blur and/or noise one [0, 1] pair; deterministic under seed.

    One blur sigma per pair (applied to both images), one noise sigma per
    pair with independent noise per image; outputs are clamped to [0, 1].
    """
    cfg = cfg or AugmentConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    vis = np.asarray(vis, dtype=np.float64)
    ir = np.asarray(ir, dtype=np.float64)

    do_blur = rng.random() < cfg.prob
    blur_sigma = rng.uniform(*cfg.blur_sigma)
    do_noise = rng.random() < cfg.prob
    noise_sigma = rng.uniform(*cfg.noise_sigma)

    if do_blur and blur_sigma > 0:
        vis = gaussian_filter(vis, sigma=(0, blur_sigma, blur_sigma))
        ir = gaussian_filter(ir, sigma=(0, blur_sigma, blur_sigma))
    if do_noise and noise_sigma > 0:
        vis = vis + noise_sigma * rng.standard_normal(vis.shape)
        ir = ir + noise_sigma * rng.standard_normal(ir.shape)
    return np.clip(vis, 0.0, 1.0), np.clip(ir, 0.0, 1.0)


def normalize(img):
    """[0, 1] image to [-1, 1]; out-of-range input is clamped first."""
    return 2.0 * np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) - 1.0


def denormalize(img):
    """Inverse of ``normalize``: [-1, 1] back to [0, 1]."""
    return (np.asarray(img, dtype=np.float64) + 1.0) * 0.5


# ---------------------------------------------------------------------------
# synthetic data


def _ellipse_mask(px, py, cx, cy, rx, ry):
    return ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0


def _synth_pair(rng, s):
    px, py = np.meshgrid(np.arange(s), np.arange(s), indexing="xy")
    fx = px / (s - 1.0)
    fy = py / (s - 1.0)
    object_zone = int(0.7 * s)  # objects stay left of this column

    base = rng.uniform(0.25, 0.65, size=3)
    slopes = rng.uniform(-0.25, 0.25, size=(3, 2))
    tex = gaussian_filter(rng.standard_normal((s, s)), 1.0)
    gains = rng.uniform(0.6, 1.0, size=3)
    vis = np.stack([base[c] + slopes[c, 0] * fx + slopes[c, 1] * fy
                    + 0.10 * gains[c] * tex for c in range(3)])

    ir_slopes = rng.uniform(-0.1, 0.1, size=2)
    ir = (rng.uniform(0.15, 0.45)
          + ir_slopes[0] * fx + ir_slopes[1] * fy
          + 0.004 * gaussian_filter(rng.standard_normal((s, s)), 2.0))[None]

    # shared geometry, rendered per modality
    for _ in range(int(rng.integers(3, 7))):
        if rng.random() < 0.5:
            w = int(rng.integers(s // 8, s // 3))
            h = int(rng.integers(s // 8, s // 3))
            x0 = int(rng.integers(0, max(1, object_zone - w)))
            y0 = int(rng.integers(0, s - h))
            mask = np.zeros((s, s), dtype=bool)
            mask[y0 : y0 + h, x0 : x0 + w] = True
        else:
            rx = rng.uniform(s / 12, s / 5)
            ry = rng.uniform(s / 12, s / 5)
            cx = rng.uniform(rx, object_zone - rx)
            cy = rng.uniform(ry, s - ry)
            mask = _ellipse_mask(px, py, cx, cy, rx, ry)
        color = rng.uniform(0.1, 0.9, size=3)
        obj_tex = gaussian_filter(rng.standard_normal((s, s)), rng.uniform(0.6, 1.6))
        amp = rng.uniform(0.06, 0.2)
        for c in range(3):
            vis[c][mask] = color[c] + amp * obj_tex[mask]
        ir[0][mask] = rng.uniform(0.1, 0.9)  # uniform: no visible texture in IR

    # guaranteed infrared-only hot spot in the object-free strip
    sig = rng.uniform(s / 20, s / 10)
    cx = rng.uniform(0.76 * s, 0.84 * s)
    cy = rng.uniform(0.15 * s, 0.42 * s)
    ir[0] += rng.uniform(0.5, 0.9) * np.exp(
        -((px - cx) ** 2 + (py - cy) ** 2) / (2.0 * sig * sig)
    )
    for _ in range(int(rng.integers(0, 2))):  # extra spots anywhere
        sig = rng.uniform(s / 20, s / 10)
        cx = rng.uniform(0.1 * s, 0.9 * s)
        cy = rng.uniform(0.1 * s, 0.9 * s)
        ir[0] += rng.uniform(0.4, 0.8) * np.exp(
            -((px - cx) ** 2 + (py - cy) ** 2) / (2.0 * sig * sig)
        )

    # guaranteed visible-only texture patch (checkerboard) over flat infrared
    p = max(8, s // 5)
    x0 = int(rng.integers(int(0.72 * s), max(int(0.72 * s) + 1, s - p)))
    y0 = int(rng.integers(int(0.55 * s), max(int(0.55 * s) + 1, s - p)))
    checker = (((px // 2 + py // 2) % 2) * 2.0 - 1.0) * rng.uniform(0.15, 0.3)
    region = (slice(y0, y0 + p), slice(x0, x0 + p))
    for c in range(3):
        vis[c][region] += checker[region]

    return np.clip(vis, 0.0, 1.0), np.clip(ir, 0.0, 1.0)


def synth_pairs(n, size, seed=0):
    """``n`` aligned (vis (3,s,s), ir (1,s,s)) pairs in [0, 1], seeded."""
    if n < 1:
        raise ConfigError(f"need n >= 1 pairs; got {n}")
    if size < 32 or size % 32:
        raise ConfigError(f"size must be a positive multiple of 32; got {size}")
    rng = np.random.default_rng(seed)
    return [_synth_pair(rng, size) for _ in range(n)]


def average_fusion(vis, ir):
    """Naive 0.5 * (visible luminance + infrared) baseline, (H, W)."""
    return 0.5 * (luminance(vis) + np.asarray(ir, dtype=np.float64)[0])


# ---------------------------------------------------------------------------
# fitting


@dataclass
class LogRow:
    epoch: int
    lr: float
    loss: float
    heldout_qw: float
    heldout_qe: float


def infer(net, vis01, ir01):
    """Fused [0, 1] image (3, H, W) for one conforming [0, 1] pair."""
    vis_t = Tensor(normalize(vis01)[None])
    ir_t = Tensor(normalize(ir01)[None])
    out = forward(net, vis_t, ir_t)
    return denormalize(out.data[0])


def split_heldout(n, fraction, seed):
    """Deterministic train/heldout index split used by ``fit``."""
    perm = np.random.default_rng([seed, 213]).permutation(n)
    held = int(round(n * fraction))
    held = min(max(held, 0), n - 1)
    return np.sort(perm[held:]), np.sort(perm[:held])


def fit(net, pairs, loss_cfg=None, schedule=None, epochs=30, seed=0,
        batch_size=1, heldout_fraction=0.25, augment_cfg=None, out_dir=None,
        adam=None, start_epoch=0, loss_on_augmented=False, checkpoint_every=1,
        log_fn=None):
    """Train ``net`` in place; returns one LogRow per completed epoch.

    Fully deterministic for a fixed seed: the shuffle/augmentation stream of
    epoch e is derived from (seed, e), so resuming from a checkpoint at any
    epoch reproduces the uninterrupted trajectory bit for bit.  The batch
    size defaults to 1: desk-scale datasets are tiny, and the extra update
    steps matter more than per-step throughput.
    """
    loss_cfg = loss_cfg or LossConfig(window=WindowConfig(stride=4))
    schedule = schedule or Schedule()
    augment_cfg = augment_cfg or AugmentConfig()
    adam = adam or init_adam(net)
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1; got {batch_size}")
    if not pairs:
        raise ConfigError("no training pairs")

    train_idx, held_idx = split_heldout(len(pairs), heldout_fraction, seed)
    eval_window = WindowConfig(size=loss_cfg.window.size,
                               stride=loss_cfg.window.stride,
                               epsilon=loss_cfg.window.epsilon)
    last_checkpoint = None
    log = []
    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng([seed, 1, epoch])
        lr = lr_at(epoch, schedule)
        order = rng.permutation(train_idx)
        batch_losses = []
        for b0 in range(0, len(order), batch_size):
            chunk = order[b0 : b0 + batch_size]
            vis_clean = np.stack([pairs[i][0] for i in chunk])
            ir_clean = np.stack([pairs[i][1] for i in chunk])
            aug = [augment(pairs[i][0], pairs[i][1], augment_cfg, rng) for i in chunk]
            vis_aug = np.stack([a[0] for a in aug])
            ir_aug = np.stack([a[1] for a in aug])
            tgt_vis = vis_aug if loss_on_augmented else vis_clean
            tgt_ir = ir_aug if loss_on_augmented else ir_clean

            with Tape() as tape:
                fused = forward(net, Tensor(normalize(vis_aug)),
                                Tensor(normalize(ir_aug)))
                fused01 = (fused + 1.0) * 0.5
                loss = fusion_loss(Tensor(tgt_vis), Tensor(tgt_ir), fused01, loss_cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}; "
                    f"last good checkpoint: {last_checkpoint or 'none'}"
                )
            zero_grads(net.params.values())
            tape.backward(loss)
            adam_step(net.params, adam, lr)
            batch_losses.append(value)

        held_qw, held_qe = _heldout_scores(net, pairs, held_idx, eval_window)
        row = LogRow(epoch=epoch, lr=lr, loss=float(np.mean(batch_losses)),
                     heldout_qw=held_qw, heldout_qe=held_qe)
        log.append(row)
        if log_fn:
            log_fn(row)
        if out_dir and (epoch + 1 - start_epoch) % checkpoint_every == 0:
            path = os.path.join(out_dir, f"checkpoint_epoch{epoch + 1:03d}.fsn")
            wio.save_checkpoint(net, adam, epoch + 1, path)
            last_checkpoint = path
    return log


def _heldout_scores(net, pairs, held_idx, window_cfg):
    if len(held_idx) == 0:
        return float("nan"), float("nan")
    qws, qes = [], []
    for i in held_idx:
        vis, ir = pairs[i]
        fused = infer(net, vis, ir)
        a = luminance(vis)
        f = luminance(fused)
        qws.append(qw(a, ir[0], f, window_cfg))
        qes.append(qe(a, ir[0], f, window_cfg))
    return float(np.mean(qws)), float(np.mean(qes))
