"""Balayage déformable de nuages de points pour modèles d'espace d'états."""

from .config import RunConfig, load_config
from .data import DTYPE, GroupedCloud, PointCloud, TokenSequence
from .embedding import EmbedConfig, PointEmbedder, embed, normalize_cloud
from .errors import DeformScanError
from .gaussian import gdr_apply, gdr_weights, gkr
from .model import DeformScanModel, build_model, init_parameters
from .serialization import HilbertConfig, serialize
from .ssm import DeformableMambaBlock, Stage, dmb_forward, selective_scan_fn, stage_forward
from .tpff import tpff

__all__ = [
    "DTYPE",
    "DeformScanError",
    "DeformScanModel",
    "DeformableMambaBlock",
    "EmbedConfig",
    "GroupedCloud",
    "HilbertConfig",
    "PointCloud",
    "PointEmbedder",
    "RunConfig",
    "Stage",
    "TokenSequence",
    "build_model",
    "dmb_forward",
    "embed",
    "gdr_apply",
    "gdr_weights",
    "gkr",
    "init_parameters",
    "load_config",
    "normalize_cloud",
    "selective_scan_fn",
    "serialize",
    "stage_forward",
    "tpff",
]
