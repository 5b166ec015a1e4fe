"""Modèle complet : plongement, T étages, normalisation finale ;
initialisation déterministe et pont vers le conteneur de paramètres."""

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Tuple

import numpy as np
import torch
from torch import nn

from .config import RunConfig
from .data import DTYPE, PointCloud, TokenSequence
from .embedding import EmbedOutput, PointEmbedder, normalize_cloud
from .errors import ParamFileError, ParamShapeError
from .ssm import BlockOutput, DeformableScan, SelectiveSSM, Stage

logger = logging.getLogger(__name__)

DT_MIN = 1e-3
DT_MAX = 1e-1
DT_FLOOR = 1e-4


@dataclass
class StageRecord:
    stage: int
    new_order: List[List[float]]
    delta_p: List[List[List[float]]]
    delta_t: List[List[float]]
    branch_norms: Dict[str, float]
    sigma_s: float
    sigma_t: float

    def to_record(self) -> Dict:
        return {
            "stage": self.stage,
            "new_order": self.new_order,
            "delta_p": self.delta_p,
            "delta_t": self.delta_t,
            "branch_norms": self.branch_norms,
            "sigma_s": self.sigma_s,
            "sigma_t": self.sigma_t,
        }


@dataclass(frozen=True, eq=False)
class ModelOutput:
    tokens: TokenSequence
    embedded: EmbedOutput
    stages: List[StageRecord] = field(default_factory=list)


def _stage_record(index: int, block: BlockOutput, deform: DeformableScan) -> StageRecord:
    out = block.deform
    return StageRecord(
        stage=index,
        new_order=out.new_order.detach().tolist(),
        delta_p=out.offsets.delta_p.detach().tolist(),
        delta_t=out.offsets.delta_t.detach().tolist(),
        branch_norms=dict(block.branch_norms),
        sigma_s=float(deform.sigma_s.detach()),
        sigma_t=float(deform.sigma_t.detach()),
    )


class DeformScanModel(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.embedder = PointEmbedder(cfg.embed_config())
        self.stages = nn.ModuleList(
            Stage(cfg.dim, d_state=cfg.d_state, expand=cfg.expand, deform=cfg.deform_config(),
                  fusion=cfg.fusion, groups=cfg.groups)
            for _ in range(cfg.stages)
        )
        self.norm = nn.LayerNorm(cfg.dim, dtype=DTYPE)

    def forward(self, cloud: PointCloud) -> ModelOutput:
        if self.cfg.normalize:
            cloud = normalize_cloud(cloud)
        embedded = self.embedder(cloud, self.cfg.hilbert_config())
        tokens = embedded.tokens
        records = []
        for i, stage in enumerate(self.stages):
            tokens, block = stage(tokens)
            records.append(_stage_record(i, block, stage.mixer.deform))
            logger.debug("stage %d: branch norms %s", i, block.branch_norms)
        return ModelOutput(tokens.with_features(self.norm(tokens.features)), embedded, records)


# --- Initialisation déterministe ----------------------------------------------

def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def _initial_value(owner: nn.Module, owner_name: str, pname: str, shape: Tuple[int, ...],
                   rng: np.random.Generator) -> np.ndarray:
    if isinstance(owner, SelectiveSSM) and pname == "A_log":
        d_inner, d_state = shape
        if owner.state_init == "linspace":
            magnitudes = np.linspace(0.5, 2.0, d_state)
        else:
            magnitudes = np.arange(1, d_state + 1, dtype=np.float64)
        return np.tile(np.log(magnitudes), (d_inner, 1))
    if isinstance(owner, SelectiveSSM) and pname == "D":
        return np.ones(shape)
    if isinstance(owner, DeformableScan) and pname in ("sigma_s", "sigma_t"):
        return np.full(shape, getattr(owner.cfg, pname))
    if isinstance(owner, nn.LayerNorm):
        return np.ones(shape) if pname == "weight" else np.zeros(shape)
    if owner_name.endswith("dt_proj") and pname == "bias":
        # delta initial log-uniforme dans [DT_MIN, DT_MAX], stocké sous softplus^-1
        dt = np.exp(rng.uniform(math.log(DT_MIN), math.log(DT_MAX), size=shape))
        dt = np.maximum(dt, DT_FLOOR)
        return dt + np.log(-np.expm1(-dt))
    if pname in ("bias", "cls_token"):
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_parameters(module: nn.Module, seed: int) -> nn.Module:
    """Chaque tableau nommé tire de default_rng([seed, crc32(nom)]) ; indépendant de l'ordre."""
    with torch.no_grad():
        for owner_name, owner in module.named_modules():
            for pname, param in owner.named_parameters(recurse=False):
                name = f"{owner_name}.{pname}" if owner_name else pname
                value = _initial_value(owner, owner_name, pname, tuple(param.shape), _rng(seed, name))
                param.copy_(torch.from_numpy(np.asarray(value, dtype=np.float64)))
    return module


def build_model(cfg: RunConfig) -> DeformScanModel:
    model = DeformScanModel(cfg)
    init_parameters(model, cfg.seed)
    model.eval()
    return model


# --- Pont avec le conteneur ---------------------------------------------------

def expected_shapes(module: nn.Module) -> Dict[str, Tuple[int, ...]]:
    return {name: tuple(p.shape) for name, p in module.named_parameters()}


def state_arrays(module: nn.Module) -> Dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().copy() for name, p in module.named_parameters()}


def load_state_arrays(module: nn.Module, arrays: Mapping[str, np.ndarray]) -> nn.Module:
    params = dict(module.named_parameters())
    unknown = sorted(set(arrays) - set(params))
    if unknown:
        raise ParamFileError(f"unexpected arrays in parameter file: {', '.join(unknown)}")
    with torch.no_grad():
        for name, param in params.items():
            if name not in arrays:
                raise ParamFileError(f"missing array '{name}'")
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tuple(param.shape):
                raise ParamShapeError(name, param.shape, value.shape)
            param.copy_(torch.from_numpy(value))
    return module
