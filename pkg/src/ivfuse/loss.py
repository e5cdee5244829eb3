"""Composite training objective: quality-index terms plus symmetric MSE.

    loss = alpha * (1 - qw) + beta * (1 - qe) + gamma * 0.5 * (mse_vis + mse_ir)

All inputs are [0, 1] tensors: the visible image (B, 3, H, W), the infrared
image (B, 1, H, W) and the fused network output (B, 3, H, W).  The quality
indices compare luminances; mse_vis spans all three RGB channels while mse_ir
compares the infrared channel against the fused luminance (the channel counts
differ, so the reduction has to be fixed somewhere).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .metrics import (
    EdgeConfig,
    WindowConfig,
    luminance_expr,
    mse_expr,
    qe_expr,
    qw_expr,
)
from .tensor import ShapeError


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    window: WindowConfig = field(default_factory=WindowConfig)
    edge: EdgeConfig = field(default_factory=EdgeConfig)

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise ValueError("at least one loss weight must be > 0")


def fusion_loss(vis, ir, fused, cfg=None):
    """Scalar loss tensor; differentiable w.r.t. ``fused`` and its parents."""
    cfg = cfg or LossConfig()
    if vis.data.shape[1] != 3:
        raise ShapeError(f"visible input must have 3 channels; got {vis.shape}")
    if ir.data.shape[1] != 1:
        raise ShapeError(f"infrared input must have 1 channel; got {ir.shape}")
    if fused.data.shape != vis.data.shape:
        raise ShapeError(f"fused/visible shapes differ: {fused.shape} vs {vis.shape}")
    if ir.data.shape[2:] != vis.data.shape[2:] or ir.data.shape[0] != vis.data.shape[0]:
        raise ShapeError(f"infrared/visible extents differ: {ir.shape} vs {vis.shape}")

    vis_luma = luminance_expr(vis)
    fused_luma = luminance_expr(fused)

    loss = None
    if cfg.alpha:
        loss = cfg.alpha * (1.0 - qw_expr(vis_luma, ir, fused_luma, cfg.window))
    if cfg.beta:
        term = cfg.beta * (1.0 - qe_expr(vis_luma, ir, fused_luma, cfg.window, cfg.edge))
        loss = term if loss is None else loss + term
    if cfg.gamma:
        term = cfg.gamma * 0.5 * (mse_expr(vis, fused) + mse_expr(ir, fused_luma))
        loss = term if loss is None else loss + term
    return loss
