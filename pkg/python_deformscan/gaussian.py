"""Noyau gaussien unifié : rééchantillonnage KNN (GKR) et réordonnancement
différentiable (GDR), avec la dérivée analytique des poids de GDR et le
rapport sur les cas limites en sigma.

Les normalisations soustraient d'abord la plus petite distance de chaque
ligne (le facteur exp(-d_min^2 / 2 sigma^2) se simplifie), puis divisent
par la somme, qui vaut au moins 1 : les lignes restent stochastiques même
quand tous les termes bruts sous-passent à zéro.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import torch

from .data import DTYPE, PointCloud
from .errors import ParameterError, ShapeError
from .geometry import gather_points, knn

logger = logging.getLogger(__name__)

EPSILON = 1e-8
TIE_TOLERANCE = 1e-9
TIE_JITTER = 1e-6

Scale = Union[float, torch.Tensor]


def _scale_value(sigma: Scale) -> float:
    return float(sigma.detach()) if torch.is_tensor(sigma) else float(sigma)


def _check_sigma(sigma: Scale) -> None:
    if not _scale_value(sigma) > 0:
        raise ParameterError(f"sigma must be > 0, got {_scale_value(sigma)}")


@dataclass(frozen=True)
class GaussianKernelParams:
    sigma: float
    epsilon: float = EPSILON

    def __post_init__(self) -> None:
        _check_sigma(self.sigma)
        if not 0 < self.epsilon <= 1e-6:
            raise ParameterError(f"epsilon must be in (0, 1e-6], got {self.epsilon}")


def gaussian_weight(d, sigma: Scale):
    """W(d; sigma) = exp(-d^2 / (2 sigma^2))."""
    _check_sigma(sigma)
    if torch.is_tensor(d) or torch.is_tensor(sigma):
        return torch.exp(-torch.as_tensor(d, dtype=DTYPE) ** 2 / (2 * sigma ** 2))
    return math.exp(-d * d / (2 * sigma * sigma))


def normalized_gaussian(sq_dist: torch.Tensor, sigma: Scale, epsilon: float = EPSILON) -> torch.Tensor:
    """Poids gaussiens normalisés sur la dernière dimension, à partir de d^2.

    Après soustraction du maximum, le plus grand terme vaut exactement 1 et la
    somme est >= 1 : epsilon reste un plancher formel du dénominateur et
    n'agit sur aucune ligne finie, même à très grandes distances.
    """
    logits = -sq_dist / (2 * sigma ** 2)
    shifted = logits - logits.max(dim=-1, keepdim=True).values.detach()
    weights = torch.exp(shifted)
    return weights / weights.sum(dim=-1, keepdim=True).clamp_min(epsilon)


# --- GKR --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ResampleResult:
    new_coords: torch.Tensor     # (M, 3)
    resampled: torch.Tensor      # (M, D)
    neighbor_sets: torch.Tensor  # (M, K_r)
    weights: torch.Tensor        # (M, K_r)


def gkr(features: torch.Tensor, centers: torch.Tensor, delta_p: torch.Tensor, k_r: int,
        sigma_s: Scale, batch_id: Optional[torch.Tensor] = None,
        epsilon: float = EPSILON) -> ResampleResult:
    """Rééchantillonnage gaussien aux positions décalées p' = p + delta_p.

    Les k_r plus proches centres d'origine (même lot) sont cherchés pour
    chaque p', puis leurs caractéristiques sont interpolées avec des poids
    gaussiens normalisés. La connexion résiduelle reste à l'appelant.
    """
    _check_sigma(sigma_s)
    if features.dim() != 2 or centers.shape != (features.shape[0], 3) or delta_p.shape != centers.shape:
        raise ShapeError(
            f"gkr expects (M, D) features with (M, 3) centers and offsets, got "
            f"{tuple(features.shape)}, {tuple(centers.shape)}, {tuple(delta_p.shape)}"
        )
    if k_r < 1:
        raise ParameterError(f"k_r must be >= 1, got {k_r}")

    new_coords = centers + delta_p
    with torch.no_grad():
        source = PointCloud(centers.detach(), batch_id)
        neighbors = knn(new_coords.detach(), source, k_r,
                        batch_mask=None if batch_id is None else source.batch_id)

    diff = new_coords[:, None, :] - gather_points(centers, neighbors)
    sq_dist = (diff ** 2).sum(dim=-1)
    weights = normalized_gaussian(sq_dist, sigma_s, epsilon)
    resampled = (weights[..., None] * gather_points(features, neighbors)).sum(dim=1)
    return ResampleResult(new_coords, resampled, neighbors, weights)


# --- GDR --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReorderWeights:
    """Matrice W (..., N, N) : ligne i = position cible, colonne j = source."""

    matrix: torch.Tensor
    shifted_index: torch.Tensor
    target_index: torch.Tensor
    sigma_t: Scale


def gdr_weights(base_index: torch.Tensor, delta_t: torch.Tensor, sigma_t: Scale,
                epsilon: float = EPSILON) -> ReorderWeights:
    """s = I + delta_t comparé à J = [0..N-1], noyau gaussien ligne par ligne."""
    _check_sigma(sigma_t)
    base = torch.as_tensor(base_index).to(DTYPE)
    delta_t = torch.as_tensor(delta_t, dtype=DTYPE)
    if base.shape != delta_t.shape:
        raise ShapeError(f"base_index {tuple(base.shape)} and delta_t {tuple(delta_t.shape)} differ")
    n = base.shape[-1]
    shifted = base + delta_t
    target = torch.arange(n, dtype=DTYPE)
    diff = shifted[..., :, None] - target
    matrix = normalized_gaussian(diff ** 2, sigma_t, epsilon)
    return ReorderWeights(matrix, shifted, target, sigma_t)


def gdr_apply(weights: ReorderWeights, features: torch.Tensor) -> torch.Tensor:
    """Produit matriciel stochastique par lignes : sortie (..., N, D)."""
    n = weights.matrix.shape[-1]
    if features.shape[-2] != n:
        raise ShapeError(f"features have {features.shape[-2]} rows, weights expect {n}")
    return weights.matrix @ features


def gdr_weight_grad(weights: ReorderWeights) -> torch.Tensor:
    """dW_ij/ds_i = W_ij / sigma^2 * (J_j - sum_l W_il J_l), forme fermée."""
    sigma = _scale_value(weights.sigma_t)
    w = weights.matrix.detach()
    target = weights.target_index
    mean_target = (w * target).sum(dim=-1, keepdim=True)
    return w / sigma ** 2 * (target - mean_target)


def jitter_ties(base_index: torch.Tensor, delta_t: torch.Tensor, margin: float = 0.0,
                amount: float = TIE_JITTER) -> torch.Tensor:
    """Pousse de `amount` les delta_t dont s tombe exactement à mi-chemin."""
    shifted = torch.as_tensor(base_index).to(DTYPE) + delta_t.detach()
    frac = shifted - torch.floor(shifted)
    ties = (frac - 0.5).abs() <= margin
    if bool(ties.any()):
        logger.warning("jittering %d equidistant sequence offsets by %g", int(ties.sum()), amount)
        return delta_t + ties.to(delta_t.dtype) * amount
    return delta_t


def hard_permutation_matrix(shifted_index: torch.Tensor) -> torch.Tensor:
    """Tri non différentiable : P[i, rang(s_i)] = 1 (tri stable)."""
    n = shifted_index.shape[-1]
    order = torch.argsort(shifted_index.detach(), dim=-1, stable=True)
    rank = torch.argsort(order, dim=-1, stable=True)
    return torch.nn.functional.one_hot(rank, n).to(DTYPE)


def hard_reorder(shifted_index: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    return hard_permutation_matrix(shifted_index) @ features


def snap_matrix(shifted_index: torch.Tensor) -> torch.Tensor:
    """Limite sigma -> 0 d'une ligne à plus proche voisin unique : indicatrice de
    l'entier le plus proche de s_i (borné à [0, N-1])."""
    n = shifted_index.shape[-1]
    nearest = torch.round(shifted_index.detach()).clamp(0, n - 1).to(torch.long)
    return torch.nn.functional.one_hot(nearest, n).to(DTYPE)


def equidistant_rows(shifted_index: torch.Tensor, tolerance: float = TIE_TOLERANCE) -> List[Dict]:
    """Lignes (vecteur 1D) dont s_i est à égale distance de plusieurs indices."""
    n = shifted_index.shape[-1]
    target = torch.arange(n, dtype=DTYPE)
    sq = (shifted_index.detach()[:, None] - target) ** 2
    d_min = sq.min(dim=-1, keepdim=True).values
    nearest = sq <= d_min + tolerance
    rows = []
    for i in torch.nonzero(nearest.sum(dim=-1) >= 2, as_tuple=False).reshape(-1).tolist():
        rows.append({"row": i, "targets": torch.nonzero(nearest[i]).reshape(-1).tolist()})
    return rows


@dataclass
class LimitReport:
    sigma: float
    uniform_deviation: float
    permutation_deviation: float
    max_gradient: float
    equidistant: List[Dict] = field(default_factory=list)
    matrix: Optional[List[List[float]]] = None

    def to_record(self) -> Dict:
        record = {
            "sigma": self.sigma,
            "uniform_deviation": self.uniform_deviation,
            "permutation_deviation": self.permutation_deviation,
            "max_gradient": self.max_gradient,
            "equidistant": self.equidistant,
        }
        if self.matrix is not None:
            record["matrix"] = self.matrix
        return record


def gdr_limit_report(base_index: torch.Tensor, delta_t: torch.Tensor, sigma_list: Sequence[float],
                     with_matrix: bool = False) -> List[LimitReport]:
    """Diagnostic des régimes limites pour chaque sigma.

    - écart max à la moyenne uniforme 1/N (sigma -> +inf) ;
    - écart max à la permutation dure du tri stable de s, hors lignes
      équidistantes (sigma -> 0). Si deux s_i arrondissent au même entier,
      le noyau colle les deux lignes sur la même colonne et l'écart vaut ~1 ;
    - lignes équidistantes et leur partage de poids (sigma -> 0, égalité) ;
    - module max de dW/ds.
    """
    if not sigma_list:
        raise ParameterError("sigma_list must not be empty")
    base = torch.as_tensor(base_index).to(DTYPE).reshape(-1)
    delta_t = torch.as_tensor(delta_t, dtype=DTYPE).reshape(-1)
    n = base.shape[0]
    shifted = base + delta_t
    ties = equidistant_rows(shifted)
    tie_rows = {t["row"] for t in ties}
    regular = torch.tensor([i not in tie_rows for i in range(n)], dtype=torch.bool)
    hard = hard_permutation_matrix(shifted)

    reports = []
    for sigma in sigma_list:
        weights = gdr_weights(base, delta_t, float(sigma))
        w = weights.matrix
        grad = gdr_weight_grad(weights)
        perm_dev = (w - hard)[regular].abs().max().item() if bool(regular.any()) else 0.0
        split = [
            {"row": t["row"], "targets": t["targets"], "weights": [w[t["row"], j].item() for j in t["targets"]]}
            for t in ties
        ]
        reports.append(LimitReport(
            sigma=float(sigma),
            uniform_deviation=(w - 1.0 / n).abs().max().item(),
            permutation_deviation=perm_dev,
            max_gradient=grad.abs().max().item(),
            equidistant=split,
            matrix=interaction_matrix(weights)["matrix"] if with_matrix else None,
        ))
        logger.debug("sigma=%g uniform=%.3e permutation=%.3e grad=%.3e",
                     sigma, reports[-1].uniform_deviation, perm_dev, reports[-1].max_gradient)
    return reports


# --- Diagnostics de visualisation --------------------------------------------

def interaction_matrix(weights: ReorderWeights, floor: float = 1e-12) -> Dict[str, List[List[float]]]:
    """Matrice dense (premier lot) et son log10 borné à `floor`."""
    w = weights.matrix.detach()
    while w.dim() > 2:
        w = w[0]
    return {
        "matrix": w.tolist(),
        "log10": torch.log10(w.clamp_min(floor)).tolist(),
    }


def contribution_sources(weights: ReorderWeights, position: int, top: int = 5) -> List[Dict]:
    """Les `top` tokens sources qui alimentent la position cible `position`."""
    w = weights.matrix.detach()
    while w.dim() > 2:
        w = w[0]
    row = w[position]
    order = sorted(range(row.shape[0]), key=lambda j: (-row[j].item(), j))[:top]
    return [{"source": j, "weight": row[j].item()} for j in order]
