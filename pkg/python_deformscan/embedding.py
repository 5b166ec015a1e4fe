"""Tokenisation d'un nuage : FPS + KNN, plongement des groupes, position,
ordre de Hilbert et token de classe."""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
from torch import nn

from .data import DTYPE, GroupedCloud, PointCloud, TokenSequence
from .errors import ConfigError, SizeError
from .geometry import farthest_point_sample, gather_points, knn
from .serialization import HilbertConfig, SerializedOrder, serialize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbedConfig:
    n_groups: int = 128
    group_size: int = 32
    dim: int = 384

    def __post_init__(self) -> None:
        for name in ("n_groups", "group_size", "dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True, eq=False)
class EmbedOutput:
    tokens: TokenSequence
    groups: GroupedCloud
    orders: List[SerializedOrder]

    @property
    def centers(self) -> torch.Tensor:
        return self.tokens.centers

    @property
    def base_index(self) -> torch.Tensor:
        return self.tokens.base_index


def canonical_order(coords: torch.Tensor) -> torch.Tensor:
    """Tri lexicographique (x, puis y, puis z) ; rend l'entrée invariante par permutation."""
    array = coords.detach().numpy()
    return torch.as_tensor(np.lexsort((array[:, 2], array[:, 1], array[:, 0])), dtype=torch.long)


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Centre chaque lot sur sa moyenne et le ramène dans la boule unité."""
    coords = cloud.coords.clone()
    for _, idx in cloud.batches():
        points = coords[idx] - coords[idx].mean(dim=0)
        radius = points.norm(dim=1).max()
        coords[idx] = points / radius if radius > 0 else points
    return PointCloud(coords, cloud.batch_id)


class StatisticsEmbedder(nn.Module):
    """Moyenne et maximum des coordonnées centrées du groupe, puis Linear-GELU-Linear."""

    def __init__(self, dim: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(6, dim, dtype=DTYPE), nn.GELU(), nn.Linear(dim, dim, dtype=DTYPE))

    def forward(self, neighborhoods: torch.Tensor) -> torch.Tensor:
        stats = torch.cat([neighborhoods.mean(dim=-2), neighborhoods.max(dim=-2).values], dim=-1)
        return self.mlp(stats)


class PointEmbedder(nn.Module):
    """`group_encoder` reçoit les voisinages centrés (B, N, K, 3) et rend (B, N, D)."""

    def __init__(self, cfg: EmbedConfig, group_encoder: Optional[nn.Module] = None):
        super().__init__()
        self.cfg = cfg
        self.group_encoder = group_encoder if group_encoder is not None else StatisticsEmbedder(cfg.dim)
        self.pos_embed = nn.Sequential(nn.Linear(3, cfg.dim, dtype=DTYPE), nn.GELU(),
                                       nn.Linear(cfg.dim, cfg.dim, dtype=DTYPE))
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim, dtype=DTYPE))

    def group(self, cloud: PointCloud) -> GroupedCloud:
        cfg = self.cfg
        cloud.require_points()
        centers, neighborhoods, group_indices, center_indices = [], [], [], []
        for b, idx in cloud.batches():
            if idx.shape[0] < cfg.n_groups:
                raise SizeError(f"batch {b} has {idx.shape[0]} points, {cfg.n_groups} groups requested")
            if idx.shape[0] < cfg.group_size:
                raise SizeError(f"batch {b} has {idx.shape[0]} points, group size is {cfg.group_size}")
            ordered = idx[canonical_order(cloud.coords[idx])]
            points = PointCloud(cloud.coords[ordered])
            picked = farthest_point_sample(points, cfg.n_groups, start=0)
            center = points.coords[picked]
            members = knn(center, points, cfg.group_size)
            centers.append(center)
            neighborhoods.append(gather_points(points.coords, members) - center[:, None, :])
            group_indices.append(ordered[members])
            center_indices.append(ordered[picked])
        return GroupedCloud(
            centers=torch.stack(centers),
            group_indices=torch.stack(group_indices),
            neighborhoods=torch.stack(neighborhoods),
            center_indices=torch.stack(center_indices),
        )

    def forward(self, cloud: PointCloud, hilbert: Optional[HilbertConfig] = None) -> EmbedOutput:
        hilbert = hilbert or HilbertConfig()
        grouped = self.group(cloud)
        feats = self.group_encoder(grouped.neighborhoods) + self.pos_embed(grouped.centers)

        orders = [serialize(c, hilbert) for c in grouped.centers]
        perm = torch.stack([o.perm for o in orders])
        rows = torch.arange(perm.shape[0])[:, None]
        feats = feats[rows, perm]
        centers = grouped.centers[rows, perm]
        batch, n, _ = centers.shape
        features = torch.cat([self.cls_token.expand(batch, -1, -1), feats], dim=1)
        # jetons déjà rangés dans l'ordre de Hilbert : indice de base = rang
        base_index = torch.arange(n).expand(batch, n).clone()
        logger.debug("embedded %d batches into %d tokens of width %d", batch, n + 1, self.cfg.dim)

        sorted_groups = GroupedCloud(
            centers=centers,
            group_indices=grouped.group_indices[rows, perm],
            neighborhoods=grouped.neighborhoods[rows, perm],
            features=feats,
            center_indices=grouped.center_indices[rows, perm],
        )
        return EmbedOutput(TokenSequence(features, centers, base_index), sorted_groups, orders)


def embed(cloud: PointCloud, cfg: EmbedConfig, hilbert: Optional[HilbertConfig] = None,
          embedder: Optional[PointEmbedder] = None) -> EmbedOutput:
    embedder = embedder if embedder is not None else PointEmbedder(cfg)
    return embedder(cloud, hilbert)
