"""Spatial-temporal motion prior over occluded 2D motion maps.

The input is an (F, K, 2) normalized map with occluded cells carrying a
learnable token. Three parallel dilated 3x3 convolutions over the
(frame, joint) grid extract joint-level features (concatenated channel dim
D = 3C); a spatial transformer mixes the K joint tokens of each frame, the
per-frame features are flattened and a temporal transformer mixes the F
frame tokens; a LayerNorm + linear head regresses the completed map. The
pre-head temporal features are exposed for the lifting network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigError, ShapeMismatchError


class Mlp(nn.Module):
    def __init__(self, in_features, hidden_features=None, out_features=None):
        super().__init__()
        out_features = out_features or in_features
        hidden_features = hidden_features or in_features
        self.fc1 = nn.Linear(in_features, hidden_features)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_features, out_features)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(x)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, num_heads, mlp_ratio=2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class STLayer(nn.Module):
    """Three parallel dilated convolutions over the (frame, joint) grid,
    2 -> C channels each, concatenated to D = 3C, spatial size preserved."""

    def __init__(self, dilations=(1, 2, 5), branch_channels=16, in_channels=2):
        super().__init__()
        if len(dilations) != 3 or any(d < 1 for d in dilations):
            raise ConfigError(f"need three positive dilations, got {dilations}")
        if branch_channels < 1:
            raise ConfigError(f"branch_channels must be positive, got {branch_channels}")
        self.dilations = tuple(int(d) for d in dilations)
        self.branch_channels = int(branch_channels)
        self.branches = nn.ModuleList([
            nn.Conv2d(in_channels, branch_channels, kernel_size=3,
                      padding=d, dilation=d)
            for d in self.dilations
        ])

    @property
    def out_dim(self):
        return 3 * self.branch_channels

    def forward(self, x):
        """(B, F, K, 2) -> (B, F, K, D)."""
        in_channels = self.branches[0].in_channels
        if x.ndim != 4 or x.shape[-1] != in_channels:
            raise ShapeMismatchError(
                f"expected (B, F, K, {in_channels}), got {tuple(x.shape)}"
            )
        grid = x.permute(0, 3, 1, 2)  # (B, 2, F, K)
        feats = torch.cat([branch(grid) for branch in self.branches], dim=1)
        return feats.permute(0, 2, 3, 1)  # (B, F, K, D)


@dataclass
class PriorConfig:
    num_frames: int = 16
    num_joints: int = 14
    branch_channels: int = 16
    dilations: tuple = (1, 2, 5)
    spatial_depth: int = 2
    spatial_heads: int = 4
    temporal_depth: int = 2
    temporal_heads: int = 4
    mlp_ratio: float = 2.0
    use_token: bool = True  # False: occluded cells stay zero-filled

    def __post_init__(self):
        if self.num_frames < 1 or self.num_joints < 1:
            raise ConfigError("num_frames and num_joints must be positive")
        self.dilations = tuple(self.dilations)

    @property
    def feature_dim(self):
        return 3 * self.branch_channels

    @property
    def temporal_dim(self):
        return self.num_joints * self.feature_dim


class PriorNet(nn.Module):
    """Masked motion-map completion network."""

    def __init__(self, cfg: PriorConfig = None):
        super().__init__()
        self.cfg = cfg or PriorConfig()
        cfg = self.cfg
        d = cfg.feature_dim
        td = cfg.temporal_dim

        if cfg.use_token:
            self.occlusion_token = nn.Parameter(torch.zeros(2))
        else:
            self.register_buffer("occlusion_token", torch.zeros(2))
        self.st_layer = STLayer(cfg.dilations, cfg.branch_channels)
        self.spatial_pos = nn.Parameter(torch.empty(cfg.num_joints, d))
        self.spatial_blocks = nn.ModuleList(
            [Block(d, cfg.spatial_heads, cfg.mlp_ratio) for _ in range(cfg.spatial_depth)]
        )
        self.temporal_pos = nn.Parameter(torch.empty(cfg.num_frames, td))
        self.temporal_blocks = nn.ModuleList(
            [Block(td, cfg.temporal_heads, cfg.mlp_ratio) for _ in range(cfg.temporal_depth)]
        )
        self.head_norm = nn.LayerNorm(td)
        self.head = nn.Linear(td, cfg.num_joints * 2)
        nn.init.trunc_normal_(self.spatial_pos, std=0.02)
        nn.init.trunc_normal_(self.temporal_pos, std=0.02)

    def tokenize(self, map2d, mask=None):
        """Substitute the occlusion token (or zeros when disabled) at masked
        cells, in-graph so the token trains with the network."""
        if mask is None:
            return map2d
        if tuple(map2d.shape[:-1]) != tuple(mask.shape) or map2d.shape[-1] != 2:
            raise ShapeMismatchError(
                f"map {tuple(map2d.shape)} does not match mask {tuple(mask.shape)}"
            )
        token = self.occlusion_token.to(map2d.dtype)
        return torch.where(mask.unsqueeze(-1), token, map2d)

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1:] != (self.cfg.num_frames, self.cfg.num_joints, 2):
            raise ShapeMismatchError(
                f"expected (B, {self.cfg.num_frames}, {self.cfg.num_joints}, 2), "
                f"got {tuple(x.shape)}"
            )

    def encode(self, map2d, mask=None):
        """Returns (st_features (B,F,K,D), temporal_features (B,F,K*D)).

        The temporal features are pre-head (after the temporal transformer,
        before the regression head); the lifting network fuses with them.
        """
        x = self.tokenize(map2d, mask)
        self._check_input(x)
        b, f, k, _ = x.shape
        st = self.st_layer(x)
        tokens = (st + self.spatial_pos).reshape(b * f, k, -1)
        for block in self.spatial_blocks:
            tokens = block(tokens)
        temporal = tokens.reshape(b, f, -1) + self.temporal_pos
        for block in self.temporal_blocks:
            temporal = block(temporal)
        return st, temporal

    def forward(self, map2d, mask=None):
        """Complete the map: returns (pred (B,F,K,2), temporal features)."""
        st, temporal = self.encode(map2d, mask)
        b, f = temporal.shape[:2]
        pred = self.head(self.head_norm(temporal)).reshape(b, f, self.cfg.num_joints, 2)
        return pred, temporal


def loss_self(pred, gt, mask):
    """Masked completion loss: L1 over the coordinate pair, averaged over
    masked joint-frame cells only. An all-false mask yields exactly 0, and
    unmasked cells receive exactly zero gradient."""
    if pred.shape != gt.shape or pred.shape[:-1] != mask.shape:
        raise ShapeMismatchError(
            f"loss_self shapes disagree: pred {tuple(pred.shape)}, gt {tuple(gt.shape)}, "
            f"mask {tuple(mask.shape)}"
        )
    mask_f = mask.to(pred.dtype)
    per_cell = (pred - gt).abs().sum(dim=-1) * mask_f
    count = mask_f.sum()
    if count.item() == 0:
        return (pred * 0.0).sum()
    return per_cell.sum() / count
