"""Conteneurs de données : nuage de points, groupes et séquence de tokens."""

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import EmptyInputError, ShapeError

DTYPE = torch.float64

ArrayLike = Union[torch.Tensor, np.ndarray, Sequence[Sequence[float]]]


def as_coords(values: ArrayLike) -> torch.Tensor:
    """Convertit une liste de 3-vecteurs en tenseur (P, 3) float64."""
    if torch.is_tensor(values):
        coords = values.to(DTYPE)
    else:
        coords = torch.as_tensor(np.asarray(values, dtype=np.float64))
    if coords.numel() == 0:
        return coords.reshape(0, 3)
    if coords.dim() != 2 or coords.shape[1] != 3:
        raise ShapeError(f"expected an (P, 3) coordinate array, got {tuple(coords.shape)}")
    return coords


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points bruts avec partition optionnelle en lots (batch_id).

    Invariants vérifiés à la construction : coordonnées finies et
    identifiants de lot formant un intervalle contigu 0..B-1.
    """

    coords: torch.Tensor
    batch_id: Optional[torch.Tensor] = None

    def __post_init__(self) -> None:
        coords = as_coords(self.coords)
        object.__setattr__(self, "coords", coords)
        if not torch.isfinite(coords).all():
            raise ShapeError("point coordinates must be finite")

        if self.batch_id is None:
            batch = torch.zeros(coords.shape[0], dtype=torch.long)
        else:
            batch = torch.as_tensor(self.batch_id, dtype=torch.long).reshape(-1)
        if batch.shape[0] != coords.shape[0]:
            raise ShapeError(f"batch_id has {batch.shape[0]} labels for {coords.shape[0]} points")
        if batch.numel() > 0:
            labels = torch.unique(batch)
            if labels[0].item() != 0 or labels[-1].item() != labels.numel() - 1:
                raise ShapeError("batch_id values must form a contiguous range starting at 0")
        object.__setattr__(self, "batch_id", batch)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def num_batches(self) -> int:
        if len(self) == 0:
            return 0
        return int(self.batch_id.max().item()) + 1

    def batch_indices(self, b: int) -> torch.Tensor:
        """Indices globaux des points du lot `b`, en ordre croissant."""
        return torch.nonzero(self.batch_id == b, as_tuple=False).reshape(-1)

    def batches(self) -> Iterator[Tuple[int, torch.Tensor]]:
        for b in range(self.num_batches):
            yield b, self.batch_indices(b)

    def require_points(self) -> None:
        if len(self) == 0:
            raise EmptyInputError("point cloud is empty")


@dataclass(frozen=True, eq=False)
class GroupedCloud:
    """N groupes locaux de K points : centres, indices, voisinages centrés et,
    une fois encodées, les caractéristiques par groupe."""

    centers: torch.Tensor        # (B, N, 3)
    group_indices: torch.Tensor  # (B, N, K), indices globaux dans le nuage source
    neighborhoods: torch.Tensor  # (B, N, K, 3), coordonnées relatives au centre
    features: Optional[torch.Tensor] = field(default=None)        # (B, N, D)
    center_indices: Optional[torch.Tensor] = field(default=None)  # (B, N)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Séquence ordonnée de tokens.

    features porte le token de classe en position 0 : (B, N+1, D).
    centers et base_index excluent le token de classe : (B, N, 3) et (B, N).
    """

    features: torch.Tensor
    centers: torch.Tensor
    base_index: torch.Tensor

    def __post_init__(self) -> None:
        if self.features.dim() != 3 or self.centers.dim() != 3 or self.base_index.dim() != 2:
            raise ShapeError("TokenSequence expects (B, N+1, D) features, (B, N, 3) centers, (B, N) base_index")
        batch, tokens, _ = self.features.shape
        if self.centers.shape[:2] != (batch, tokens - 1) or self.base_index.shape != (batch, tokens - 1):
            raise ShapeError(
                f"inconsistent token sequence: features {tuple(self.features.shape)}, "
                f"centers {tuple(self.centers.shape)}, base_index {tuple(self.base_index.shape)}"
            )

    @property
    def num_tokens(self) -> int:
        return self.features.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def with_features(self, features: torch.Tensor) -> "TokenSequence":
        return TokenSequence(features, self.centers, self.base_index)
