"""Agrégation de contexte local (LCFA) et réseau de décalages.

Le réseau prédit 4 composantes bornées par tanh : 3 décalages spatiaux
delta_p et 1 décalage séquentiel delta_t.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import nn

from .data import DTYPE, PointCloud
from .errors import ParameterError, ShapeError
from .geometry import ball_query, gather_points

logger = logging.getLogger(__name__)

DEFAULT_RADIUS = 0.1
DEFAULT_K_Q = 8
DEFAULT_KERNEL = 5
# tanh(18) < 1 en float64 : les décalages restent strictement dans (-s, s)
TANH_LIMIT = 18.0

# (M, 2D, k) -> (M, D, k)
WeightMap = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True, eq=False)
class NeighborhoodContext:
    neighbor_indices: torch.Tensor  # (B, N, K_q), indices aplatis sur B*N
    neighbor_coords: torch.Tensor   # (B, N, K_q, 3)
    neighbor_feats: torch.Tensor    # (B, N, K_q, D)
    center_expanded: torch.Tensor   # (B, N, K_q, D)
    context: torch.Tensor           # (B, N, D)
    aggregated: torch.Tensor        # (B, N, 2D)


@dataclass(frozen=True, eq=False)
class OffsetField:
    delta_p: torch.Tensor  # (B, N, 3)
    delta_t: torch.Tensor  # (B, N)
    scale: float


class LCFAWeightMap(nn.Sequential):
    """Conv 1x1 (2D -> D) suivie de GELU : poids d'agrégation par voisin."""

    def __init__(self, dim: int):
        super().__init__(nn.Conv1d(2 * dim, dim, kernel_size=1, dtype=DTYPE), nn.GELU())


def lcfa(features: torch.Tensor, centers: torch.Tensor, radius: float = DEFAULT_RADIUS,
         k_q: int = DEFAULT_K_Q, weight_map: Optional[WeightMap] = None) -> NeighborhoodContext:
    """Contexte local par ball query puis somme pondérée des voisins.

    features (B, N, D) et centers (B, N, 3) excluent le token de classe.
    Le contexte est concaténé à la caractéristique propre du token pour
    former l'entrée (B, N, 2D) du réseau de décalages.
    """
    if features.dim() != 3 or centers.dim() != 3 or features.shape[:2] != centers.shape[:2]:
        raise ShapeError(f"lcfa: features {tuple(features.shape)} and centers {tuple(centers.shape)} misaligned")
    if radius <= 0:
        raise ParameterError(f"radius must be > 0, got {radius}")
    batch, n, dim = features.shape
    k = max(1, min(k_q, n))
    weight_map = weight_map if weight_map is not None else LCFAWeightMap(dim)

    flat_centers = centers.reshape(batch * n, 3)
    flat_feats = features.reshape(batch * n, dim)
    batch_id = torch.arange(batch).repeat_interleave(n)
    with torch.no_grad():
        idx = ball_query(flat_centers.detach(), PointCloud(flat_centers.detach(), batch_id),
                         radius, k, batch_mask=batch_id)

    neighbor_feats = gather_points(flat_feats, idx)                # (M, k, D)
    center_expanded = flat_feats[:, None, :].expand(-1, k, -1)     # (M, k, D)
    local = torch.cat([center_expanded, neighbor_feats], dim=-1)   # (M, k, 2D)
    weights = weight_map(local.transpose(1, 2)).transpose(1, 2)    # (M, k, D)
    context = (neighbor_feats * weights).sum(dim=1)
    aggregated = torch.cat([flat_feats, context], dim=-1)

    return NeighborhoodContext(
        neighbor_indices=idx.reshape(batch, n, k),
        neighbor_coords=gather_points(flat_centers, idx).reshape(batch, n, k, 3),
        neighbor_feats=neighbor_feats.reshape(batch, n, k, dim),
        center_expanded=center_expanded.reshape(batch, n, k, dim),
        context=context.reshape(batch, n, dim),
        aggregated=aggregated.reshape(batch, n, 2 * dim),
    )


class ChannelAttention(nn.Module):
    """Squeeze-excitation : moyenne globale, deux cartes 1x1, porte sigmoïde."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.squeeze = nn.Conv1d(channels, hidden, kernel_size=1, dtype=DTYPE)
        self.excite = nn.Conv1d(hidden, channels, kernel_size=1, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=-1, keepdim=True)
        gate = torch.sigmoid(self.excite(torch.relu(self.squeeze(pooled))))
        return x * gate


class OffsetNet(nn.Module):
    """DWConv -> réduction 1x1 -> CA -> ReLU -> projection 1x1 -> tanh * scale."""

    def __init__(self, dim: int, kernel_size: int = DEFAULT_KERNEL, scale: float = 1.0, use_ca: bool = True):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ParameterError(f"depthwise kernel width must be odd, got {kernel_size}")
        if scale <= 0:
            raise ParameterError(f"offset scale must be > 0, got {scale}")
        reduced = max(1, dim // 2)
        self.scale = float(scale)
        self.depthwise = nn.Conv1d(2 * dim, 2 * dim, kernel_size, padding=kernel_size // 2,
                                   groups=2 * dim, dtype=DTYPE)
        self.reduce = nn.Conv1d(2 * dim, reduced, kernel_size=1, dtype=DTYPE)
        self.attention = ChannelAttention(reduced) if use_ca else nn.Identity()
        self.project = nn.Conv1d(reduced, 4, kernel_size=1, dtype=DTYPE)

    def forward(self, aggregated: torch.Tensor) -> OffsetField:
        x = aggregated.transpose(1, 2)  # (B, 2D, N), convolution le long de la séquence
        x = self.reduce(self.depthwise(x))
        x = torch.relu(self.attention(x))
        offsets = torch.tanh(self.project(x).clamp(-TANH_LIMIT, TANH_LIMIT)).transpose(1, 2) * self.scale  # (B, N, 4)
        return OffsetField(delta_p=offsets[..., :3], delta_t=offsets[..., 3], scale=self.scale)


def offset_net(ctx: NeighborhoodContext, params: OffsetNet) -> OffsetField:
    return params(ctx.aggregated)
