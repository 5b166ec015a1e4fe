"""Noyaux d'échantillonnage et de regroupement (FPS, KNN, ball query).

Toutes les distances sont des distances euclidiennes au carré ; les
égalités sont départagées par l'indice le plus bas. Chaque noyau a un
oracle exhaustif `brute_force_*` écrit en Python pur.
"""

import logging
from typing import List, Optional, Sequence

import torch

from .data import ArrayLike, PointCloud, as_coords
from .errors import EmptyInputError, ParameterError, SizeError

logger = logging.getLogger(__name__)


def squared_distances(query: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Matrice (Q, R) des distances au carré, sommée dans l'ordre x, y, z."""
    diff = query[:, None, :] - reference[None, :, :]
    return diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2


def _masked_distances(query: torch.Tensor, cloud: PointCloud,
                      batch_mask: Optional[ArrayLike]) -> torch.Tensor:
    dist = squared_distances(query, cloud.coords)
    if batch_mask is None:
        return dist
    labels = torch.as_tensor(batch_mask, dtype=torch.long).reshape(-1)
    if labels.shape[0] != query.shape[0]:
        raise ParameterError(f"batch_mask has {labels.shape[0]} labels for {query.shape[0]} queries")
    # distance infinie entre lots différents
    return dist.masked_fill(labels[:, None] != cloud.batch_id[None, :], float("inf"))


def _check_population(cloud: PointCloud, batch_mask: Optional[ArrayLike], k: int, what: str) -> None:
    if batch_mask is None:
        population = len(cloud)
        if k > population:
            raise SizeError(f"{what}: k={k} exceeds reference size {population}")
        return
    labels = torch.unique(torch.as_tensor(batch_mask, dtype=torch.long).reshape(-1))
    for label in labels.tolist():
        population = int((cloud.batch_id == label).sum().item())
        if k > population:
            raise SizeError(f"{what}: k={k} exceeds population {population} of batch {label}")


def farthest_point_sample(cloud: PointCloud, n: int, start: int = 0) -> torch.Tensor:
    """Échantillonnage du point le plus éloigné (FPS), déterministe.

    Chaque nouvel indice maximise la distance minimale à l'ensemble déjà
    choisi ; en cas d'égalité l'indice le plus bas gagne. Le nuage doit
    tenir dans un seul lot : l'appelant applique FPS lot par lot.
    """
    cloud.require_points()
    if cloud.num_batches > 1:
        raise ParameterError("farthest_point_sample expects a single-batch cloud")
    total = len(cloud)
    if n > total:
        raise SizeError(f"cannot sample {n} points from a cloud of {total}")
    if not 0 <= start < total:
        raise ParameterError(f"start index {start} out of range for {total} points")
    if n <= 0:
        return torch.zeros(0, dtype=torch.long)

    coords = cloud.coords
    selected = torch.empty(n, dtype=torch.long)
    selected[0] = start
    min_dist = squared_distances(coords, coords[start:start + 1]).reshape(-1)
    min_dist[start] = -float("inf")
    for i in range(1, n):
        # argmax renvoie la première occurrence du maximum
        nxt = int(torch.argmax(min_dist).item())
        selected[i] = nxt
        dist = squared_distances(coords, coords[nxt:nxt + 1]).reshape(-1)
        min_dist = torch.minimum(min_dist, dist)
        min_dist[nxt] = -float("inf")
    return selected


def knn_with_distances(query: ArrayLike, reference: PointCloud, k: int,
                       batch_mask: Optional[ArrayLike] = None):
    """Comme `knn`, renvoie aussi les distances au carré triées."""
    query = as_coords(query)
    reference.require_points()
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    _check_population(reference, batch_mask, k, "knn")
    dist = _masked_distances(query, reference, batch_mask)
    sorted_dist, order = torch.sort(dist, dim=1, stable=True)
    return order[:, :k], sorted_dist[:, :k]


def knn(query: ArrayLike, reference: PointCloud, k: int,
        batch_mask: Optional[ArrayLike] = None) -> torch.Tensor:
    """Les k plus proches voisins de chaque requête, par distance croissante.

    Avec `batch_mask`, les candidats d'un autre lot que celui de la requête
    sont exclus.
    """
    indices, _ = knn_with_distances(query, reference, k, batch_mask)
    return indices


def ball_query(centers: ArrayLike, cloud: PointCloud, radius: float, k_max: int,
               batch_mask: Optional[ArrayLike] = None) -> torch.Tensor:
    """Jusqu'à k_max voisins à distance <= radius, les plus proches d'abord.

    Voisinage incomplet : on répète le premier voisin trouvé (le plus
    proche). Voisinage vide : on répète le point le plus proche du centre.
    """
    if radius <= 0:
        raise ParameterError(f"radius must be > 0, got {radius}")
    if k_max < 1:
        raise ParameterError(f"k_max must be >= 1, got {k_max}")
    centers = as_coords(centers)
    cloud.require_points()

    dist = _masked_distances(centers, cloud, batch_mask)
    sorted_dist, order = torch.sort(dist, dim=1, stable=True)
    count = (sorted_dist <= radius * radius).sum(dim=1, keepdim=True)

    cols = torch.arange(k_max).reshape(1, -1)
    source = order[:, cols.clamp(max=order.shape[1] - 1).reshape(-1)]
    pad = order[:, :1].expand(-1, k_max)
    return torch.where(cols < count, source, pad)


# --- Oracles exhaustifs -----------------------------------------------------

def _sq(a: Sequence[float], b: Sequence[float]) -> float:
    dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
    return dx * dx + dy * dy + dz * dz


def brute_force_fps(points: Sequence[Sequence[float]], n: int, start: int = 0) -> List[int]:
    """FPS par maximin explicite sur tous les candidats."""
    if not points:
        raise EmptyInputError("point cloud is empty")
    if n > len(points):
        raise SizeError(f"cannot sample {n} points from a cloud of {len(points)}")
    chosen = [start]
    while len(chosen) < n:
        best, best_score = None, None
        for j, p in enumerate(points):
            if j in chosen:
                continue
            score = min(_sq(p, points[c]) for c in chosen)
            if best_score is None or score > best_score:
                best, best_score = j, score
        chosen.append(best)
    return chosen


def brute_force_knn(query: Sequence[Sequence[float]], reference: Sequence[Sequence[float]], k: int,
                    query_batch: Optional[Sequence[int]] = None,
                    reference_batch: Optional[Sequence[int]] = None) -> List[List[int]]:
    result = []
    for qi, q in enumerate(query):
        candidates = [
            (_sq(q, r), j) for j, r in enumerate(reference)
            if query_batch is None or query_batch[qi] == reference_batch[j]
        ]
        candidates.sort()
        result.append([j for _, j in candidates[:k]])
    return result


def brute_force_ball_query(centers: Sequence[Sequence[float]], points: Sequence[Sequence[float]],
                           radius: float, k_max: int) -> List[List[int]]:
    result = []
    for c in centers:
        ranked = sorted((_sq(c, p), j) for j, p in enumerate(points))
        inside = [j for d, j in ranked if d <= radius * radius][:k_max]
        pad = inside[0] if inside else ranked[0][1]
        result.append(inside + [pad] * (k_max - len(inside)))
    return result


def gather_points(coords: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """Rassemble les lignes de (P, C) selon des indices de forme quelconque."""
    return coords[indices.reshape(-1)].reshape(*indices.shape, coords.shape[-1])
