"""Vérification des gradients par différences finies centrées.

Le gradient analytique (forme fermée ou rétropropagation) est comparé aux
différences finies sur un balayage de pas ; l'erreur retenue est le
minimum sur le balayage. Erreur relative : |a - f| / max(|a|, |f|, 1e-12),
les coordonnées où |a - f| <= atol sont exemptées.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from torch.func import functional_call

from .config import RunConfig
from .data import DTYPE, PointCloud, TokenSequence
from .errors import DeformScanError, GradCheckError, NumericError, ParameterError
from .gaussian import gaussian_weight, gdr_apply, gdr_weight_grad, gdr_weights, gkr
from .model import build_model, init_parameters
from .offsets import OffsetNet
from .ssm import DeformConfig, Stage, selective_scan_fn, zoh_discretize
from .tpff import TriPathBundle, TriPathFusion, tpff

logger = logging.getLogger(__name__)

DEFAULT_STEPS = (1e-4, 1e-5, 1e-6, 1e-7, 1e-8)
DEFAULT_ATOL = 1e-8
REL_FLOOR = 1e-12
TIE_MARGIN = 1e-3

ScalarFunction = Callable[[torch.Tensor], torch.Tensor]


def fd_gradient(f: ScalarFunction, x: torch.Tensor, step: float,
                coords: Optional[Sequence[int]] = None) -> torch.Tensor:
    """(f(x + h e_i) - f(x - h e_i)) / 2h pour chaque coordonnée (toutes, ou `coords`)."""
    if not step > 0:
        raise ParameterError(f"finite-difference step must be > 0, got {step}")
    x = torch.as_tensor(x, dtype=DTYPE).detach().reshape(-1)
    coords = range(x.numel()) if coords is None else coords
    grad = []
    with torch.no_grad():
        for i in coords:
            values = []
            for sign in (1.0, -1.0):
                shifted = x.clone()
                shifted[i] += sign * step
                value = float(f(shifted))
                if not math.isfinite(value):
                    raise NumericError(f"non-finite function value at coordinate {i} (step {step:g})")
                values.append(value)
            grad.append((values[0] - values[1]) / (2 * step))
    return torch.tensor(grad, dtype=DTYPE)


@dataclass
class GradReport:
    op: str
    passed: bool
    max_rel_error: float
    max_abs_error: float
    worst_coordinate: int
    step: float
    tolerance: float
    coordinates: int
    message: str

    def to_record(self) -> Dict:
        def finite(value: float) -> Optional[float]:
            return value if math.isfinite(value) else None

        return {
            "op": self.op,
            "passed": self.passed,
            "max_rel_error": finite(self.max_rel_error),
            "max_abs_error": finite(self.max_abs_error),
            "worst_coordinate": self.worst_coordinate,
            "step": self.step,
            "tolerance": self.tolerance,
            "coordinates": self.coordinates,
        }

    def __str__(self) -> str:
        return self.message


@dataclass(frozen=True, eq=False)
class GradCase:
    """Fonction scalaire, point d'évaluation et gradient analytique optionnel."""

    function: ScalarFunction
    point: torch.Tensor
    analytic: Optional[Callable[[torch.Tensor], torch.Tensor]] = None
    coords: Optional[Sequence[int]] = None


def relative_errors(analytic: torch.Tensor, numeric: torch.Tensor, atol: float = DEFAULT_ATOL) -> torch.Tensor:
    diff = (analytic - numeric).abs()
    scale = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(REL_FLOOR, dtype=DTYPE))
    return torch.where(diff <= atol, torch.zeros_like(diff), diff / scale)


def autograd_gradient(f: ScalarFunction, x: torch.Tensor) -> torch.Tensor:
    point = x.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(point), point, allow_unused=True)
    return torch.zeros_like(point) if grad is None else grad.detach()


def check(op: str, sampler: Callable[[np.random.Generator], GradCase], tolerance: float, seed: int = 0,
          steps: Sequence[float] = DEFAULT_STEPS, atol: float = DEFAULT_ATOL, strict: bool = False) -> GradReport:
    case = sampler(np.random.default_rng(seed))
    point = case.point.detach().to(DTYPE).reshape(-1)
    full = case.analytic(point) if case.analytic is not None else autograd_gradient(case.function, point)
    coords = list(range(point.numel())) if case.coords is None else list(case.coords)
    analytic = full.reshape(-1)[coords]

    best = None
    for step in steps:
        numeric = fd_gradient(case.function, point, step, coords)
        rel = relative_errors(analytic, numeric, atol)
        worst = int(torch.argmax(rel))
        candidate = (float(rel[worst]), float((analytic - numeric).abs().max()), coords[worst], step)
        logger.debug("%s: step %g -> max relative error %.3e", op, step, candidate[0])
        if best is None or candidate[0] < best[0]:
            best = candidate

    rel_error, abs_error, worst_coord, step = best
    passed = rel_error < tolerance
    if passed:
        message = f"{op}: ok (max relative error {rel_error:.3e} at step {step:g})"
    else:
        message = (f"{op}: gradient check failed, max relative error {rel_error:.3e} > {tolerance:g} "
                   f"at coordinate {worst_coord} (step {step:g})")
    report = GradReport(op, passed, rel_error, abs_error, worst_coord, step, tolerance, len(coords), message)
    if strict and not passed:
        raise GradCheckError(report)
    return report


# --- Échantillonneurs ---------------------------------------------------------

def is_near_tie(shifted_index: torch.Tensor, margin: float = TIE_MARGIN) -> bool:
    """Vrai si un s_i tombe à moins de `margin` d'un demi-entier (ligne équidistante)."""
    frac = shifted_index - torch.floor(shifted_index)
    return bool(((frac - 0.5).abs() <= margin).any())


def sample_sequence_offsets(rng: np.random.Generator, n: int, spread: float = 1.5,
                            margin: float = TIE_MARGIN, max_tries: int = 1000) -> torch.Tensor:
    """Décalages delta_t uniformes, configurations proches d'une égalité rejetées."""
    base = torch.arange(n, dtype=DTYPE)
    for _ in range(max_tries):
        delta_t = torch.from_numpy(rng.uniform(-spread, spread, size=n))
        if not is_near_tie(base + delta_t, margin):
            return delta_t
    raise NumericError(f"no tie-free sequence offsets found in {max_tries} draws")


def _normal(rng: np.random.Generator, *shape: int) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape))


class CheckType(Enum):
    """Énumération des vérifications de gradient disponibles."""
    GAUSSIAN_WEIGHT = "gaussian_weight"
    GDR_WEIGHTS = "gdr_weights"
    GDR_APPLY = "gdr_apply"
    GKR = "gkr"
    OFFSET_NET = "offset_net"
    TPFF = "tpff"
    ZOH = "zoh"
    SELECTIVE_SCAN = "selective_scan"
    STAGE = "stage"
    MODEL = "model"


class BaseCheck(ABC):
    """Classe de base : un échantillonneur et une tolérance."""

    tolerance = 1e-5

    def __init__(self, seed: int = 0):
        self.seed = seed

    @abstractmethod
    def sample(self, rng: np.random.Generator) -> GradCase:
        pass

    @abstractmethod
    def get_check_type(self) -> CheckType:
        pass

    def run(self, strict: bool = False) -> GradReport:
        return check(self.get_check_type().value, self.sample, self.tolerance, self.seed, strict=strict)


class GaussianWeightCheck(BaseCheck):
    """dW/dd et dW/dsigma de exp(-d^2 / 2 sigma^2)."""

    def sample(self, rng):
        point = torch.tensor([rng.uniform(0.1, 2.0), rng.uniform(0.5, 2.0)], dtype=DTYPE)
        return GradCase(lambda x: gaussian_weight(x[0], x[1]), point)

    def get_check_type(self):
        return CheckType.GAUSSIAN_WEIGHT


class GDRWeightsCheck(BaseCheck):
    """Dérivée fermée dW_ij/ds_i contre différences finies, N = 8, sigma_t dans [0.05, 1]."""

    n = 8

    def sample(self, rng):
        sigma = rng.uniform(0.05, 1.0)
        base = torch.arange(self.n)
        projection = _normal(rng, self.n, self.n)
        delta_t = sample_sequence_offsets(rng, self.n)

        def f(x):
            return (projection * gdr_weights(base, x, sigma).matrix).sum()

        def analytic(x):
            return (projection * gdr_weight_grad(gdr_weights(base, x, sigma))).sum(dim=-1)

        return GradCase(f, delta_t, analytic)

    def get_check_type(self):
        return CheckType.GDR_WEIGHTS


class GDRApplyCheck(BaseCheck):
    """Somme des sorties de W @ F (sigma_t = 0.2, N = 6), gradient par la forme fermée."""

    n = 6
    dim = 4
    sigma = 0.2

    def sample(self, rng):
        base = torch.arange(self.n)
        features = _normal(rng, self.n, self.dim)
        delta_t = sample_sequence_offsets(rng, self.n)

        def f(x):
            return gdr_apply(gdr_weights(base, x, self.sigma), features).sum()

        def analytic(x):
            grad = gdr_weight_grad(gdr_weights(base, x, self.sigma))
            return grad @ features.sum(dim=-1)

        return GradCase(f, delta_t, analytic)

    def get_check_type(self):
        return CheckType.GDR_APPLY


class GKRCheck(BaseCheck):
    """Gradient de GKR par rapport aux décalages spatiaux."""

    points = 6
    dim = 4

    def sample(self, rng):
        centers = torch.from_numpy(rng.uniform(-1, 1, size=(self.points, 3)))
        features = _normal(rng, self.points, self.dim)
        projection = _normal(rng, self.points, self.dim)
        delta_p = torch.from_numpy(rng.uniform(-0.1, 0.1, size=(self.points, 3)))

        def f(x):
            result = gkr(features, centers, x.reshape(self.points, 3), 3, 0.5)
            return (projection * result.resampled).sum()

        return GradCase(f, delta_p)

    def get_check_type(self):
        return CheckType.GKR


class OffsetNetCheck(BaseCheck):
    dim = 4
    tokens = 5

    def sample(self, rng):
        net = init_parameters(OffsetNet(self.dim), self.seed)
        aggregated = _normal(rng, 1, self.tokens, 2 * self.dim)
        projection = _normal(rng, self.tokens, 4)

        def f(x):
            out = net(x.reshape(1, self.tokens, 2 * self.dim))
            return (projection[:, :3] * out.delta_p[0]).sum() + (projection[:, 3] * out.delta_t[0]).sum()

        return GradCase(f, aggregated)

    def get_check_type(self):
        return CheckType.OFFSET_NET


class TPFFCheck(BaseCheck):
    """Gradient de la fusion complète par rapport aux trois voies (N = 8)."""

    length = 8
    channels = 4

    def sample(self, rng):
        params = init_parameters(TriPathFusion(self.channels, groups=2), self.seed)
        paths = _normal(rng, 3, 1, self.length, self.channels)
        projection = _normal(rng, 1, self.length, self.channels)

        def f(x):
            f_fwd, f_chan, f_def = x.reshape(3, 1, self.length, self.channels)
            return (projection * tpff(TriPathBundle(f_fwd, f_chan, f_def), params)).sum()

        return GradCase(f, paths)

    def get_check_type(self):
        return CheckType.TPFF


class ZOHCheck(BaseCheck):
    """(A, delta, B) -> A_bar + B_bar, A < 0, delta > 0."""

    def sample(self, rng):
        point = torch.tensor([-rng.uniform(0.5, 2.0), rng.uniform(0.05, 0.5), rng.standard_normal()], dtype=DTYPE)

        def f(x):
            a_bar, b_bar = zoh_discretize(x[0], x[2], x[1])
            return a_bar + b_bar

        return GradCase(f, point)

    def get_check_type(self):
        return CheckType.ZOH


class SelectiveScanCheck(BaseCheck):
    length = 5
    channels = 3
    states = 2

    def sample(self, rng):
        L, d, n = self.length, self.channels, self.states
        delta = _normal(rng, 1, L, d)
        A = -torch.from_numpy(rng.uniform(0.5, 2.0, size=(d, n)))
        B, C = _normal(rng, 1, L, n), _normal(rng, 1, L, n)
        D = _normal(rng, d)
        projection = _normal(rng, 1, L, d)
        u = _normal(rng, 1, L, d)

        def f(x):
            y = selective_scan_fn(x.reshape(1, L, d), delta, A, B, C, D, delta_softplus=True)
            return (projection * y).sum()

        return GradCase(f, u)

    def get_check_type(self):
        return CheckType.SELECTIVE_SCAN


class StageCheck(BaseCheck):
    """Un étage complet (DMB inclus) par rapport aux caractéristiques d'entrée."""

    tolerance = 1e-3
    n = 8
    dim = 8

    def sample(self, rng):
        stage = Stage(self.dim, d_state=4, expand=2, deform=DeformConfig(radius=0.5), groups=4)
        init_parameters(stage, self.seed).eval()
        centers = torch.from_numpy(rng.uniform(-0.5, 0.5, size=(1, self.n, 3)))
        base_index = torch.arange(self.n).reshape(1, self.n)
        features = _normal(rng, 1, self.n + 1, self.dim)
        projection = _normal(rng, 1, self.n + 1, self.dim)

        def f(x):
            tokens, _ = stage(TokenSequence(x.reshape(1, self.n + 1, self.dim), centers, base_index))
            return (projection * tokens.features).sum()

        return GradCase(f, features)

    def get_check_type(self):
        return CheckType.STAGE


class ModelCheck(BaseCheck):
    """Modèle jouet à un étage, par rapport à un sous-ensemble tiré des paramètres."""

    tolerance = 1e-3
    sampled_coordinates = 16

    def sample(self, rng):
        model = build_model(RunConfig.toy(seed=self.seed))
        cloud = PointCloud(rng.uniform(-1, 1, size=(32, 3)))
        names = [name for name, _ in model.named_parameters()]
        shapes = [p.shape for _, p in model.named_parameters()]
        sizes = [p.numel() for _, p in model.named_parameters()]
        flat = torch.cat([p.detach().reshape(-1) for _, p in model.named_parameters()])

        def unflatten(x):
            return {name: chunk.reshape(shape)
                    for name, chunk, shape in zip(names, torch.split(x, sizes), shapes)}

        with torch.no_grad():
            reference = model(cloud).tokens.features
        projection = _normal(rng, *reference.shape)

        def f(x):
            out = functional_call(model, unflatten(x), (cloud,))
            return (projection * out.tokens.features).sum()

        coords = sorted(rng.choice(flat.numel(), size=min(self.sampled_coordinates, flat.numel()),
                                   replace=False).tolist())
        return GradCase(f, flat, coords=coords)

    def get_check_type(self):
        return CheckType.MODEL


class GradChecks:
    """Registre des vérifications, extensible comme un gestionnaire d'opérations."""

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self._checks: Dict[CheckType, Callable[[], BaseCheck]] = {
            CheckType.GAUSSIAN_WEIGHT: lambda: GaussianWeightCheck(self.seed),
            CheckType.GDR_WEIGHTS: lambda: GDRWeightsCheck(self.seed),
            CheckType.GDR_APPLY: lambda: GDRApplyCheck(self.seed),
            CheckType.GKR: lambda: GKRCheck(self.seed),
            CheckType.OFFSET_NET: lambda: OffsetNetCheck(self.seed),
            CheckType.TPFF: lambda: TPFFCheck(self.seed),
            CheckType.ZOH: lambda: ZOHCheck(self.seed),
            CheckType.SELECTIVE_SCAN: lambda: SelectiveScanCheck(self.seed),
            CheckType.STAGE: lambda: StageCheck(self.seed),
            CheckType.MODEL: lambda: ModelCheck(self.seed),
        }

    def execute_check(self, check_type: Union[CheckType, str]) -> GradReport:
        """Exécute une vérification ; un nom inconnu donne un rapport en échec."""
        name = check_type.value if isinstance(check_type, CheckType) else str(check_type)
        try:
            check_type = CheckType(name)
        except ValueError:
            check_type = None
        if check_type not in self._checks:
            return GradReport(name, False, math.inf, math.inf, -1, 0.0, 0.0, 0, f"unknown gradient check '{name}'")
        try:
            return self._checks[check_type]().run()
        except DeformScanError as exc:
            return GradReport(name, False, math.inf, math.inf, -1, 0.0, 0.0, 0, f"{name}: {exc}")

    def run_all(self) -> List[GradReport]:
        return [self.execute_check(check_type) for check_type in self._checks]

    def get_available_checks(self) -> Dict[CheckType, str]:
        return {check_type: factory().__class__.__name__ for check_type, factory in self._checks.items()}

    def register_check(self, check_type: CheckType, factory: Callable[[], BaseCheck]) -> None:
        self._checks[check_type] = factory
