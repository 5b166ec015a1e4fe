"""Modèle d'espace d'états sélectif et bloc Mamba déformable (DMB).

Les séquences sont au format (B, L, C). Le balayage est séquentiel,
de gauche à droite, avec h_0 = 0. Le bloc combine trois branches :
- F : balayage direct (conv causale largeur 4, SiLU, balayage, porte SiLU(z)) ;
- C : même chaîne sur l'entrée projetée à canaux inversés, puis ré-inversée ;
- D : balayage déformable (LCFA, décalages, GKR, réordonnancement), projection,
  conv largeur 3, GELU, balayage.
Les trois sorties sont fusionnées (TPFF par défaut), filtrées par une porte
sigmoïde calculée sur l'entrée du bloc, puis reprojetées sur D canaux.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .data import DTYPE, TokenSequence
from .errors import ConfigError, EmptyInputError, NumericError, ParameterError, ShapeError
from .gaussian import (
    EPSILON,
    ReorderWeights,
    gdr_apply,
    gdr_weights,
    gkr,
    hard_reorder,
    jitter_ties,
)
from .offsets import DEFAULT_K_Q, DEFAULT_KERNEL, DEFAULT_RADIUS, LCFAWeightMap, OffsetField, OffsetNet, lcfa
from .tpff import DEFAULT_GROUPS, TriPathBundle, PathFusion

logger = logging.getLogger(__name__)

DEFAULT_D_STATE = 16
DEFAULT_EXPAND = 2
FORWARD_CONV = 4
DEFORM_CONV = 3
TAYLOR_THRESHOLD = 1e-6
REORDER_MODES = ("gdr", "hard", "fixed")


# --- Discrétisation et balayage ----------------------------------------------

def zoh_discretize(A: torch.Tensor, B: torch.Tensor, delta: torch.Tensor):
    """Bloqueur d'ordre zéro, élément par élément sur la diagonale de A.

    A_bar = exp(delta A) ; B_bar = (exp(delta A) - 1) / (delta A) * delta * B.
    Sous |delta A| < 1e-6 le quotient est remplacé par 1 + x/2 + x^2/6.
    """
    A, B, delta = (torch.as_tensor(t, dtype=DTYPE) for t in (A, B, delta))
    if not bool((delta > 0).all()):
        raise ParameterError("discretization step delta must be > 0")
    x = delta * A
    small = x.abs() < TAYLOR_THRESHOLD
    x_safe = torch.where(small, torch.ones_like(x), x)
    phi = torch.where(small, 1 + x / 2 + x * x / 6, torch.expm1(x_safe) / x_safe)
    return torch.exp(x), phi * delta * B


def scan_recurrence(A_bar: torch.Tensor, Bu: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
    """h_t = A_bar_t h_{t-1} + Bu_t, y_t = <C_t, h_t>.

    A_bar, Bu : (B, L, d, n) ; C : (B, L, n) ; sortie (B, L, d).
    """
    batch, length, channels, states = A_bar.shape
    if length == 0:
        raise EmptyInputError("cannot scan an empty sequence")
    h = torch.zeros(batch, channels, states, dtype=A_bar.dtype)
    outputs = []
    for t in range(length):
        h = A_bar[:, t] * h + Bu[:, t]
        if not bool(torch.isfinite(h).all()):
            raise NumericError(f"non-finite scan state at step {t}", step=t)
        outputs.append((h * C[:, t, None, :]).sum(dim=-1))
    return torch.stack(outputs, dim=1)


def selective_scan_fn(u, delta, A, B, C, D=None, z=None, delta_bias=None, delta_softplus=False):
    """Balayage sélectif de référence.

    u, delta, z : (B, L, d) ; A : (d, n) négatif ; B, C : (B, L, n) ; D : (d,).
    """
    if u.dim() != 3 or u.shape[1] == 0:
        raise EmptyInputError(f"selective scan expects a non-empty (B, L, d) input, got {tuple(u.shape)}")
    if delta.shape != u.shape or B.shape[:2] != u.shape[:2] or C.shape != B.shape:
        raise ShapeError(
            f"scan operands misaligned: u {tuple(u.shape)}, delta {tuple(delta.shape)}, "
            f"B {tuple(B.shape)}, C {tuple(C.shape)}"
        )
    if delta_bias is not None:
        delta = delta + delta_bias
    if delta_softplus:
        delta = F.softplus(delta)

    A_bar, B_bar = zoh_discretize(A, B[:, :, None, :], delta[..., None])
    y = scan_recurrence(A_bar, B_bar * u[..., None], C)
    if D is not None:
        y = y + D * u
    if z is not None:
        y = y * F.silu(z)
    return y


def channel_flip(x: torch.Tensor) -> torch.Tensor:
    """Inverse l'ordre des canaux (dernier axe) ; involution."""
    return x.flip(-1)


class SelectiveSSM(nn.Module):
    """Projections dépendantes de l'entrée (delta, B, C) et matrice d'état diagonale."""

    def __init__(self, d_inner: int, d_state: int = DEFAULT_D_STATE, dt_rank: int = 1,
                 state_init: str = "arange", learn_skip: bool = True):
        super().__init__()
        self.d_state = d_state
        self.dt_rank = dt_rank
        self.state_init = state_init
        self.x_proj = nn.Linear(d_inner, dt_rank + 2 * d_state, bias=False, dtype=DTYPE)
        self.dt_proj = nn.Linear(dt_rank, d_inner, bias=True, dtype=DTYPE)
        if state_init == "arange":
            magnitudes = torch.arange(1, d_state + 1, dtype=DTYPE)
        elif state_init == "linspace":
            magnitudes = torch.linspace(0.5, 2.0, d_state, dtype=DTYPE)
        else:
            raise ConfigError(f"unknown state initialization '{state_init}'")
        self.A_log = nn.Parameter(torch.log(magnitudes).repeat(d_inner, 1))
        if learn_skip:
            self.D = nn.Parameter(torch.ones(d_inner, dtype=DTYPE))
        else:
            self.register_buffer("D", torch.ones(d_inner, dtype=DTYPE), persistent=False)

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def forward(self, u: torch.Tensor, z: Optional[torch.Tensor] = None) -> torch.Tensor:
        dt, B, C = torch.split(self.x_proj(u), [self.dt_rank, self.d_state, self.d_state], dim=-1)
        delta = F.linear(dt, self.dt_proj.weight)
        return selective_scan_fn(u, delta, self.A, B, C, self.D, z=z,
                                 delta_bias=self.dt_proj.bias, delta_softplus=True)


class ForwardBranch(nn.Module):
    """Conv causale en profondeur, SiLU, balayage sélectif, porte SiLU(z)."""

    def __init__(self, d_inner: int, d_state: int, dt_rank: int, d_conv: int = FORWARD_CONV):
        super().__init__()
        self.conv1d = nn.Conv1d(d_inner, d_inner, d_conv, groups=d_inner, padding=d_conv - 1, dtype=DTYPE)
        self.ssm = SelectiveSSM(d_inner, d_state, dt_rank)

    def forward(self, xz: torch.Tensor) -> torch.Tensor:
        length = xz.shape[1]
        x, z = xz.chunk(2, dim=-1)
        # le rembourrage causal est retiré à droite
        x = self.conv1d(x.transpose(1, 2))[..., :length].transpose(1, 2)
        return self.ssm(F.silu(x), z=z)


# --- Balayage déformable ------------------------------------------------------

@dataclass(frozen=True)
class DeformConfig:
    k_q: int = DEFAULT_K_Q
    k_r: int = 3
    radius: float = DEFAULT_RADIUS
    kernel_size: int = DEFAULT_KERNEL
    offset_scale: float = 1.0
    sigma_s: float = 1.0
    sigma_t: float = 0.2
    enable_dp: bool = True
    enable_dt: bool = True
    use_lcfa: bool = True
    use_gkr: bool = True
    use_ca: bool = True
    reorder: str = "gdr"

    def __post_init__(self) -> None:
        if self.reorder not in REORDER_MODES:
            raise ConfigError(f"unknown reorder mode '{self.reorder}', expected one of {REORDER_MODES}")
        for name in ("k_q", "k_r"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("radius", "offset_scale", "sigma_s", "sigma_t"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")


@dataclass(frozen=True, eq=False)
class DeformOutput:
    features: torch.Tensor   # (B, N+1, D), token de classe inchangé en tête
    new_coords: torch.Tensor  # (B, N, 3)
    new_order: torch.Tensor   # (B, N) indices décalés s
    offsets: OffsetField
    weights: Optional[ReorderWeights] = None


class DeformableScan(nn.Module):
    def __init__(self, dim: int, cfg: Optional[DeformConfig] = None):
        super().__init__()
        self.cfg = cfg or DeformConfig()
        self.weight_map = LCFAWeightMap(dim)
        self.offset_net = OffsetNet(dim, self.cfg.kernel_size, self.cfg.offset_scale, self.cfg.use_ca)
        self.sigma_s = nn.Parameter(torch.tensor(self.cfg.sigma_s, dtype=DTYPE))
        self.sigma_t = nn.Parameter(torch.tensor(self.cfg.sigma_t, dtype=DTYPE))

    def forward(self, features: torch.Tensor, centers: torch.Tensor, base_index: torch.Tensor) -> DeformOutput:
        cfg = self.cfg
        batch, tokens, dim = features.shape
        n = tokens - 1
        if centers.shape != (batch, n, 3) or base_index.shape != (batch, n):
            raise ShapeError(
                f"deformable scan: features {tuple(features.shape)}, centers {tuple(centers.shape)}, "
                f"base_index {tuple(base_index.shape)}"
            )
        cls_token, feats = features[:, :1], features[:, 1:]

        if cfg.use_lcfa:
            aggregated = lcfa(feats, centers, cfg.radius, cfg.k_q, self.weight_map).aggregated
        else:
            aggregated = torch.cat([feats, torch.zeros_like(feats)], dim=-1)
        offsets = self.offset_net(aggregated)
        delta_p = offsets.delta_p if cfg.enable_dp else torch.zeros_like(offsets.delta_p)
        delta_t = offsets.delta_t if cfg.enable_dt else torch.zeros_like(offsets.delta_t)

        flat_feats = feats.reshape(batch * n, dim)
        flat_centers = centers.reshape(batch * n, 3)
        flat_dp = delta_p.reshape(batch * n, 3)
        if cfg.use_gkr:
            batch_id = torch.arange(batch).repeat_interleave(n)
            result = gkr(flat_feats, flat_centers, flat_dp, min(cfg.k_r, n), self.sigma_s, batch_id)
            resampled = result.resampled + flat_feats
        else:
            resampled = flat_feats
        resampled = resampled.reshape(batch, n, dim)
        new_coords = (flat_centers + flat_dp).reshape(batch, n, 3)

        base = base_index.to(DTYPE)
        weights = None
        if not cfg.enable_dt or cfg.reorder == "fixed":
            new_order = base
        else:
            if self.training:
                delta_t = jitter_ties(base_index, delta_t)
            new_order = base + delta_t
            if cfg.reorder == "gdr":
                weights = gdr_weights(base_index, delta_t, self.sigma_t, EPSILON)
                resampled = gdr_apply(weights, resampled)
            else:
                resampled = hard_reorder(new_order, resampled)

        logger.debug("deform: |dp|max=%.3e |dt|max=%.3e", float(delta_p.detach().abs().max()),
                     float(delta_t.detach().abs().max()))
        return DeformOutput(
            features=torch.cat([cls_token, resampled], dim=1),
            new_coords=new_coords,
            new_order=new_order,
            offsets=OffsetField(delta_p, delta_t, offsets.scale),
            weights=weights,
        )


class DeformBranch(nn.Module):
    """Projection D -> d_inner, conv en profondeur largeur 3, GELU, balayage sans porte."""

    def __init__(self, dim: int, d_inner: int, d_state: int, dt_rank: int):
        super().__init__()
        self.linear = nn.Linear(dim, d_inner, bias=True, dtype=DTYPE)
        self.conv1d = nn.Conv1d(d_inner, d_inner, DEFORM_CONV, groups=d_inner, padding=DEFORM_CONV // 2, dtype=DTYPE)
        self.ssm = SelectiveSSM(d_inner, d_state, dt_rank, state_init="linspace", learn_skip=False)

    def forward(self, deformed: torch.Tensor) -> torch.Tensor:
        x = self.conv1d(self.linear(deformed).transpose(1, 2)).transpose(1, 2)
        return self.ssm(F.gelu(x))


# --- Bloc et étage ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BlockOutput:
    output: torch.Tensor  # (B, N+1, D)
    deform: Optional[DeformOutput] = None
    branch_norms: Dict[str, float] = field(default_factory=dict)


class DeformableMambaBlock(nn.Module):
    def __init__(self, dim: int, d_state: int = DEFAULT_D_STATE, expand: int = DEFAULT_EXPAND,
                 deform: Optional[DeformConfig] = None, fusion: str = "tpff", groups: int = DEFAULT_GROUPS):
        super().__init__()
        if dim < 1 or d_state < 1 or expand < 1:
            raise ConfigError(f"invalid block sizes: dim={dim}, d_state={d_state}, expand={expand}")
        self.dim = dim
        self.d_inner = expand * dim
        self.dt_rank = math.ceil(dim / 16)
        self.in_proj = nn.Linear(dim, 2 * self.d_inner, bias=False, dtype=DTYPE)
        self.out_proj = nn.Linear(self.d_inner, dim, bias=False, dtype=DTYPE)
        self.gate_proj = nn.Linear(dim, self.d_inner, bias=True, dtype=DTYPE)
        self.forward_branch = ForwardBranch(self.d_inner, d_state, self.dt_rank)
        self.channel_branch = ForwardBranch(self.d_inner, d_state, self.dt_rank)
        self.deform = DeformableScan(dim, deform)
        self.deform_branch = DeformBranch(dim, self.d_inner, d_state, self.dt_rank)
        self.fusion = PathFusion(self.d_inner, fusion, groups)

    def forward(self, hidden: torch.Tensor, centers: torch.Tensor, base_index: torch.Tensor) -> BlockOutput:
        if hidden.dim() != 3 or hidden.shape[-1] != self.dim:
            raise ShapeError(f"block expects (B, N+1, {self.dim}) tokens, got {tuple(hidden.shape)}")
        xz = self.in_proj(hidden)
        out_fwd = self.forward_branch(xz)
        out_chan = channel_flip(self.channel_branch(channel_flip(xz)))
        deformed = self.deform(hidden, centers, base_index)
        out_def = self.deform_branch(deformed.features)

        fused = self.fusion(TriPathBundle(out_fwd, out_chan, out_def))
        out = self.out_proj(fused * torch.sigmoid(self.gate_proj(hidden)))
        if not bool(torch.isfinite(out).all()):
            raise NumericError("non-finite block output")
        norms = {name: float(t.detach().norm()) for name, t in
                 (("forward", out_fwd), ("channel", out_chan), ("deform", out_def))}
        return BlockOutput(out, deformed, norms)


def dmb_forward(tokens: TokenSequence, params: DeformableMambaBlock) -> BlockOutput:
    return params(tokens.features, tokens.centers, tokens.base_index)


class Stage(nn.Module):
    """x' = E(LN(x)) + x (x' = x sans amélioration locale), puis x_out = DMB(LN(x')) + x'.

    `local_enhancer` et `mixer` sont injectables ; le mélangeur reçoit
    (tokens, centres, base_index) et renvoie un BlockOutput.
    """

    def __init__(self, dim: int, mixer: Optional[nn.Module] = None,
                 local_enhancer: Optional[nn.Module] = None, **block_kwargs):
        super().__init__()
        self.norm_local = nn.LayerNorm(dim, dtype=DTYPE)
        self.norm_mixer = nn.LayerNorm(dim, dtype=DTYPE)
        self.local_enhancer = local_enhancer
        self.mixer = mixer if mixer is not None else DeformableMambaBlock(dim, **block_kwargs)

    def forward(self, tokens: TokenSequence):
        x = tokens.features
        if self.local_enhancer is not None:
            x = self.local_enhancer(self.norm_local(x)) + x
        block = self.mixer(self.norm_mixer(x), tokens.centers, tokens.base_index)
        return tokens.with_features(block.output + x), block


def stage_forward(x: TokenSequence, params: Stage) -> TokenSequence:
    tokens, _ = params(x)
    return tokens
