"""Fusion tri-voie fréquentielle (TPFF).

Les séquences sont au format (B, N, C) : N le long de la séquence, C canaux.
Modulation croisée sigmoïde, fusion 1x1 groupée suivie d'un mélange de
canaux, puis amélioration fréquentielle par FFT le long de la séquence.
La FFT n'est pas normalisée à l'aller ; l'inverse divise par N.
"""

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn

from .data import DTYPE
from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_GROUPS = 32
FUSION_MODES = ("tpff", "mean", "linear", "conv")


def resolve_groups(channels: int, requested: int = DEFAULT_GROUPS) -> int:
    """Plus grand diviseur de `channels` qui ne dépasse pas `requested`."""
    if requested < 1:
        raise ConfigError(f"group count must be >= 1, got {requested}")
    groups = min(requested, channels)
    while channels % groups:
        groups -= 1
    if groups != requested:
        logger.debug("group count reduced from %d to %d for %d channels", requested, groups, channels)
    return groups


@dataclass(frozen=True, eq=False)
class TriPathBundle:
    f_fwd: torch.Tensor
    f_chan: torch.Tensor
    f_def: torch.Tensor

    def __post_init__(self) -> None:
        if not self.f_fwd.shape == self.f_chan.shape == self.f_def.shape:
            raise ShapeError(
                f"path shapes differ: {tuple(self.f_fwd.shape)}, {tuple(self.f_chan.shape)}, "
                f"{tuple(self.f_def.shape)}"
            )


def cross_modulate(bundle: TriPathBundle) -> TriPathBundle:
    """F'_i = F_i * (sigmoid(F_j) + sigmoid(F_k)) / 2, (i, j, k) cyclique."""
    w_f, w_c, w_d = (torch.sigmoid(x) for x in (bundle.f_fwd, bundle.f_chan, bundle.f_def))
    return TriPathBundle(
        f_fwd=bundle.f_fwd * (w_c + w_d) / 2,
        f_chan=bundle.f_chan * (w_d + w_f) / 2,
        f_def=bundle.f_def * (w_f + w_c) / 2,
    )


def channel_shuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    """Le canal k*c + m passe en position m*g + k (c = C / g)."""
    channels = x.shape[-1]
    if channels % groups:
        raise ConfigError(f"{channels} channels not divisible by {groups} groups")
    per_group = channels // groups
    return x.reshape(*x.shape[:-1], groups, per_group).transpose(-1, -2).reshape(x.shape)


def inverse_channel_shuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    return channel_shuffle(x, x.shape[-1] // groups)


def pointwise(conv: nn.Conv1d, x: torch.Tensor) -> torch.Tensor:
    """Applique une conv 1x1 (éventuellement groupée) à une séquence (B, N, C)."""
    return conv(x.transpose(1, 2)).transpose(1, 2)


def grouped_fuse_shuffle(modulated: TriPathBundle, fuse: nn.Conv1d) -> torch.Tensor:
    fused = pointwise(fuse, torch.cat([modulated.f_fwd, modulated.f_chan, modulated.f_def], dim=-1))
    return channel_shuffle(fused, fuse.groups)


def frequency_enhance(x: torch.Tensor, conv: nn.Conv1d) -> torch.Tensor:
    """DFT le long de la séquence, carte 1x1 sur [Re; Im], DFT inverse, partie réelle."""
    spectrum = torch.fft.fft(x, dim=1)
    mixed = pointwise(conv, torch.cat([spectrum.real, spectrum.imag], dim=-1))
    real, imag = mixed.chunk(2, dim=-1)
    # le résidu imaginaire de l'inverse est écarté
    return torch.fft.ifft(torch.complex(real, imag), dim=1).real


def _dft_matrix(n: int, sign: float) -> torch.Tensor:
    k = torch.arange(n, dtype=DTYPE)
    angle = sign * 2 * math.pi * torch.outer(k, k) / n
    return torch.complex(torch.cos(angle), torch.sin(angle))


def direct_dft(x: torch.Tensor) -> torch.Tensor:
    """DFT directe en O(N^2) le long de la dimension 1."""
    n = x.shape[1]
    return torch.einsum("kn,bnc->bkc", _dft_matrix(n, -1.0), x.to(torch.complex128))


def direct_idft(x: torch.Tensor) -> torch.Tensor:
    n = x.shape[1]
    return torch.einsum("kn,bnc->bkc", _dft_matrix(n, 1.0), x.to(torch.complex128)) / n


class TriPathFusion(nn.Module):
    """Paramètres de la TPFF : fusion groupée 3C -> C et carte fréquentielle 2C -> 2C."""

    def __init__(self, channels: int, groups: int = DEFAULT_GROUPS):
        super().__init__()
        self.groups = resolve_groups(channels, groups)
        self.fuse = nn.Conv1d(3 * channels, channels, kernel_size=1, groups=self.groups, bias=False, dtype=DTYPE)
        self.frequency = nn.Conv1d(2 * channels, 2 * channels, kernel_size=1, groups=self.groups, dtype=DTYPE)

    def forward(self, bundle: TriPathBundle) -> torch.Tensor:
        return tpff(bundle, self)


def tpff(bundle: TriPathBundle, params: TriPathFusion) -> torch.Tensor:
    shuffled = grouped_fuse_shuffle(cross_modulate(bundle), params.fuse)
    return frequency_enhance(shuffled, params.frequency)


class PathFusion(nn.Module):
    """Stratégies de fusion des trois voies : tpff, mean, linear, conv."""

    def __init__(self, channels: int, mode: str = "tpff", groups: int = DEFAULT_GROUPS):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode '{mode}', expected one of {FUSION_MODES}")
        self.mode = mode
        if mode in ("tpff", "conv"):
            self.tpff = TriPathFusion(channels, groups)
        elif mode == "linear":
            self.linear = nn.Conv1d(3 * channels, channels, kernel_size=1, bias=False, dtype=DTYPE)

    def forward(self, bundle: TriPathBundle) -> torch.Tensor:
        if self.mode == "tpff":
            return self.tpff(bundle)
        if self.mode == "conv":
            return grouped_fuse_shuffle(cross_modulate(bundle), self.tpff.fuse)
        if self.mode == "linear":
            return pointwise(self.linear, torch.cat([bundle.f_fwd, bundle.f_chan, bundle.f_def], dim=-1))
        return (bundle.f_fwd + bundle.f_chan + bundle.f_def) / 3
