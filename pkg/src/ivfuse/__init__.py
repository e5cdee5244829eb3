"""Infrared/visible image fusion with a no-reference quality-index loss.

A self-contained toolkit: a minimal tape-based autodiff tensor core, the
window-statistics quality indices (q0/qw/qe) as both plain evaluators and
differentiable expressions, a dual-encoder fusion network, an ADAM training
loop with synthetic desk-scale data, and a fuse/eval/train/bench CLI.
"""

from .loss import LossConfig, fusion_loss
from .metrics import (
    EdgeConfig,
    PatchStats,
    WindowConfig,
    luminance,
    mse,
    q0,
    qe,
    qw,
    sobel_edge_map,
)
from .model import (
    ConfigError,
    FusionNet,
    NetConfig,
    build_network,
    crop_to,
    decode,
    encode,
    forward,
    fuse_features,
    pad_to_multiple,
)
from .tensor import ShapeError, Tape, Tensor, backward, gradient_check
from .trainer import (
    AdamState,
    AugmentConfig,
    Schedule,
    TrainingError,
    adam_step,
    augment,
    average_fusion,
    denormalize,
    fit,
    infer,
    init_adam,
    lr_at,
    normalize,
    synth_pairs,
)
from .weights import WeightsError, load_network, save_network

__version__ = "0.1.0"
