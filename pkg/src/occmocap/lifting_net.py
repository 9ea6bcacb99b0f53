"""3D lifting network on top of the motion prior.

The lifting path reuses the prior's ST-layer features, encodes them with its
own spatial transformer (same structure as the prior's first transformer),
adds the prior's pre-head temporal features elementwise, and decodes with
two heads: a per-frame MLP for the (F, N, 6) 3D motion map and a
mean-pooled MLP for the per-sequence shape coefficients.

The training loss combines reconstruction (on the 6D map, the skinned
vertices, and the joints), a shape prior, and temporal smoothness of the
predicted map. The norms are per-element mean squared error; the relative
term weights are configurable and default to 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .body_model import BodyModel
from .errors import ConfigError, ShapeMismatchError
from .motion_repr import rot6d_to_matrix
from .prior_net import Block, PriorNet


@dataclass
class LiftingConfig:
    num_joints_out: int = 24
    num_betas: int = 10
    map_hidden: int = 512
    shape_hidden: int = 128

    def __post_init__(self):
        if self.num_joints_out < 1 or self.num_betas < 1:
            raise ConfigError("num_joints_out and num_betas must be positive")


@dataclass
class LiftingOutput:
    map3d: torch.Tensor  # (B, F, N, 6)
    beta: torch.Tensor   # (B, num_betas)


@dataclass
class LossWeights:
    rec: float = 1.0
    shape: float = 1.0
    smo: float = 1.0


class LiftingNet(nn.Module):
    """Lifts occluded 2D motion maps to 3D rotations plus shape.

    Holds the prior as a submodule so joint finetuning is the default; pass
    the prior's parameters through ``requires_grad_(False)`` to freeze it.
    """

    def __init__(self, prior: PriorNet, cfg: LiftingConfig = None):
        super().__init__()
        self.prior = prior
        self.cfg = cfg or LiftingConfig()
        pcfg = prior.cfg
        d = pcfg.feature_dim
        td = pcfg.temporal_dim

        self.spatial_pos = nn.Parameter(torch.empty(pcfg.num_joints, d))
        self.spatial_blocks = nn.ModuleList(
            [Block(d, pcfg.spatial_heads, pcfg.mlp_ratio) for _ in range(pcfg.spatial_depth)]
        )
        self.map_head = nn.Sequential(
            nn.LayerNorm(td),
            nn.Linear(td, self.cfg.map_hidden),
            nn.GELU(),
            nn.Linear(self.cfg.map_hidden, self.cfg.num_joints_out * 6),
        )
        self.shape_head = nn.Sequential(
            nn.LayerNorm(td),
            nn.Linear(td, self.cfg.shape_hidden),
            nn.GELU(),
            nn.Linear(self.cfg.shape_hidden, self.cfg.num_betas),
        )
        nn.init.trunc_normal_(self.spatial_pos, std=0.02)

    def forward(self, map2d, mask=None) -> LiftingOutput:
        st, temporal = self.prior.encode(map2d, mask)
        b, f, k, d = st.shape
        tokens = (st + self.spatial_pos).reshape(b * f, k, d)
        for block in self.spatial_blocks:
            tokens = block(tokens)
        fused = tokens.reshape(b, f, k, d) + temporal.reshape(b, f, k, d)
        flat = fused.reshape(b, f, k * d)
        map3d = self.map_head(flat).reshape(b, f, self.cfg.num_joints_out, 6)
        beta = self.shape_head(flat.mean(dim=1))
        return LiftingOutput(map3d=map3d, beta=beta)


def smoothness(map3d):
    """Per-element MSE between consecutive frames of a (..., F, N, 6) map;
    zero iff all consecutive rows are equal."""
    if map3d.shape[-3] < 2:
        return map3d.new_zeros(())
    diff = map3d[..., 1:, :, :] - map3d[..., :-1, :, :]
    return (diff ** 2).mean()


def loss_motion(output: LiftingOutput, gt3d, gt_beta, body: BodyModel,
                weights: LossWeights = None):
    """Total lifting loss and its per-term breakdown.

    gt3d: (B, F, N, 6); gt_beta: (B, num_betas). Ground-truth vertices and
    joints are produced by running the same body model on the ground-truth
    parameters. Returns (total, {"rec", "shape", "smo", "total"}).
    """
    weights = weights or LossWeights()
    map3d, beta = output.map3d, output.beta
    if map3d.shape != gt3d.shape:
        raise ShapeMismatchError(f"map3d {tuple(map3d.shape)} vs gt {tuple(gt3d.shape)}")
    if beta.shape != gt_beta.shape:
        raise ShapeMismatchError(f"beta {tuple(beta.shape)} vs gt {tuple(gt_beta.shape)}")

    pred_rot = rot6d_to_matrix(map3d)
    pred_verts, pred_joints = body(pred_rot, beta.unsqueeze(1), validate=False)
    with torch.no_grad():
        gt_rot = rot6d_to_matrix(gt3d)
        gt_verts, gt_joints = body(gt_rot, gt_beta.unsqueeze(1), validate=False)

    l_rec = ((map3d - gt3d) ** 2).mean() \
        + ((pred_verts - gt_verts) ** 2).mean() \
        + ((pred_joints - gt_joints) ** 2).mean()
    l_shape = ((beta - gt_beta) ** 2).mean() + (beta ** 2).mean()
    l_smo = smoothness(map3d)
    total = weights.rec * l_rec + weights.shape * l_shape + weights.smo * l_smo
    breakdown = {
        "rec": float(l_rec.detach()),
        "shape": float(l_shape.detach()),
        "smo": float(l_smo.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown
