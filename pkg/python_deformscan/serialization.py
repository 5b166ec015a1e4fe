"""Sérialisation par courbe de Hilbert 3D.

Les clés viennent du paquet `hilbertcurve` (construction de Skilling à
bits transposés, axes dans l'ordre x, y, z). Le rang dans l'ordre
sérialisé (0..N-1) sert de vecteur d'indices de base pour le réordonnancement.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import torch
from hilbertcurve.hilbertcurve import HilbertCurve

from .data import DTYPE, ArrayLike, as_coords
from .errors import BoundsError, EmptyInputError, ParameterError

logger = logging.getLogger(__name__)

DEFAULT_ORDER = 9
BBOX_EPSILON = 1e-9


@lru_cache(maxsize=None)
def _curve(order: int) -> HilbertCurve:
    return HilbertCurve(order, 3)


def _check_order(order: int) -> None:
    if not 1 <= order <= 16:
        raise ParameterError(f"Hilbert order must be in [1, 16], got {order}")


@dataclass(frozen=True, eq=False)
class HilbertConfig:
    """Ordre de la grille (2^order cellules par axe) et boîte englobante.

    Sans boîte explicite, elle est recalculée à partir des données.
    Les axes dégénérés sont élargis de max(BBOX_EPSILON, BBOX_EPSILON * |low|) ;
    un axe resté plat après élargissement tombe entièrement dans la cellule 0.
    """

    order: int = DEFAULT_ORDER
    bbox: Optional[Tuple[Sequence[float], Sequence[float]]] = None

    def __post_init__(self) -> None:
        _check_order(self.order)

    def bounds_for(self, centers: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.bbox is None:
            low, high = centers.min(dim=0).values, centers.max(dim=0).values
        else:
            low = torch.as_tensor(self.bbox[0], dtype=DTYPE)
            high = torch.as_tensor(self.bbox[1], dtype=DTYPE)
        flat = (high - low) <= 0
        widen = torch.clamp(low.abs() * BBOX_EPSILON, min=BBOX_EPSILON)
        high = torch.where(flat, low + widen, high)
        return low, high


@dataclass(frozen=True, eq=False)
class SerializedOrder:
    """perm[r] = indice du token au rang r ; base_index[perm[r]] = r."""

    perm: torch.Tensor
    base_index: torch.Tensor
    keys: torch.Tensor


def hilbert_encode(cell: Sequence[int], order: int) -> int:
    """Indice sur la courbe d'une cellule entière (x, y, z) de la grille 2^order."""
    _check_order(order)
    cell = [int(c) for c in cell]
    if len(cell) != 3:
        raise BoundsError(f"expected a 3D cell, got {len(cell)} coordinates")
    side = 1 << order
    for axis, c in zip("xyz", cell):
        if not 0 <= c < side:
            raise BoundsError(f"cell coordinate {axis}={c} outside [0, {side})")
    return int(_curve(order).distance_from_point(cell))


def hilbert_decode(key: int, order: int) -> Tuple[int, int, int]:
    _check_order(order)
    key = int(key)
    if not 0 <= key < 1 << (3 * order):
        raise BoundsError(f"curve index {key} outside [0, 8^{order})")
    x, y, z = _curve(order).point_from_distance(key)
    return int(x), int(y), int(z)


def quantize(centers: torch.Tensor, cfg: HilbertConfig) -> torch.Tensor:
    """Cellules entières (N, 3) dans [0, 2^order)."""
    low, high = cfg.bounds_for(centers)
    side = 1 << cfg.order
    extent = high - low
    flat = extent <= 0
    scaled = (centers - low) / torch.where(flat, torch.ones_like(extent), extent) * side
    scaled = torch.where(flat, torch.zeros_like(scaled), scaled)
    return torch.floor(scaled).clamp(0, side - 1).to(torch.long)


def serialize(centers: ArrayLike, cfg: Optional[HilbertConfig] = None) -> SerializedOrder:
    """Trie les centres selon (clé de Hilbert, indice d'origine)."""
    cfg = cfg or HilbertConfig()
    centers = as_coords(centers)
    if centers.shape[0] == 0:
        raise EmptyInputError("cannot serialize an empty set of centers")

    cells = quantize(centers, cfg)
    keys = [hilbert_encode(cell, cfg.order) for cell in cells.tolist()]
    perm = sorted(range(len(keys)), key=lambda i: (keys[i], i))
    if len(set(keys)) < len(keys):
        logger.debug("%d quantization collisions at order %d", len(keys) - len(set(keys)), cfg.order)

    perm_t = torch.tensor(perm, dtype=torch.long)
    base_index = torch.empty_like(perm_t)
    base_index[perm_t] = torch.arange(len(perm), dtype=torch.long)
    return SerializedOrder(perm=perm_t, base_index=base_index, keys=torch.tensor(keys, dtype=torch.long))
