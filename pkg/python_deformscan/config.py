"""Configuration d'exécution : hyperparamètres et chemins.

Format de fichier : texte plat `clé = valeur`, commentaires `#`.
"""

import configparser
import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Union

from .embedding import EmbedConfig
from .errors import ConfigError
from .serialization import HilbertConfig
from .ssm import REORDER_MODES, DeformConfig
from .tpff import FUSION_MODES

logger = logging.getLogger(__name__)

_SECTION = "run"


@dataclass(frozen=True)
class RunConfig:
    n_groups: int = 128
    group_size: int = 32
    dim: int = 384
    stages: int = 6
    k_q: int = 8
    k_r: int = 3
    sigma_s: float = 1.0
    sigma_t: float = 0.2
    dwconv_kernel: int = 5
    hilbert_order: int = 9
    seed: int = 0
    d_state: int = 16
    expand: int = 2
    lcfa_radius: float = 0.1
    offset_scale: float = 1.0
    groups: int = 32
    reorder: str = "gdr"
    fusion: str = "tpff"
    enable_dp: bool = True
    enable_dt: bool = True
    use_lcfa: bool = True
    use_gkr: bool = True
    use_ca: bool = True
    normalize: bool = True
    input_path: str = ""
    params_path: str = ""
    output_path: str = ""

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Petite configuration des tests et du golden master."""
        base = cls(n_groups=8, group_size=4, dim=8, stages=1, d_state=4, groups=4, hilbert_order=4, lcfa_radius=0.5)
        return replace(base, **overrides)

    def validate(self) -> "RunConfig":
        checks = [
            ("n_groups", self.n_groups >= 1, ">= 1"),
            ("group_size", self.group_size >= 1, ">= 1"),
            ("dim", self.dim >= 2 and self.dim % 2 == 0, "even and >= 2"),
            ("stages", self.stages >= 1, ">= 1"),
            ("k_q", self.k_q >= 1, ">= 1"),
            ("k_r", 1 <= self.k_r <= self.n_groups, "in [1, n_groups]"),
            ("sigma_s", self.sigma_s > 0, "> 0"),
            ("sigma_t", self.sigma_t > 0, "> 0"),
            ("dwconv_kernel", self.dwconv_kernel >= 1 and self.dwconv_kernel % 2 == 1, "odd and >= 1"),
            ("hilbert_order", 1 <= self.hilbert_order <= 16, "in [1, 16]"),
            ("seed", self.seed >= 0, ">= 0"),
            ("d_state", self.d_state >= 1, ">= 1"),
            ("expand", self.expand >= 1, ">= 1"),
            ("lcfa_radius", self.lcfa_radius > 0, "> 0"),
            ("offset_scale", self.offset_scale > 0, "> 0"),
            ("groups", self.groups >= 1, ">= 1"),
            ("reorder", self.reorder in REORDER_MODES, f"one of {REORDER_MODES}"),
            ("fusion", self.fusion in FUSION_MODES, f"one of {FUSION_MODES}"),
        ]
        for key, ok, rule in checks:
            if not ok:
                raise ConfigError(f"invalid value for '{key}': {getattr(self, key)!r} (expected {rule})")
        return self

    def embed_config(self) -> EmbedConfig:
        return EmbedConfig(self.n_groups, self.group_size, self.dim)

    def hilbert_config(self) -> HilbertConfig:
        return HilbertConfig(order=self.hilbert_order)

    def deform_config(self) -> DeformConfig:
        return DeformConfig(
            k_q=self.k_q, k_r=self.k_r, radius=self.lcfa_radius, kernel_size=self.dwconv_kernel,
            offset_scale=self.offset_scale, sigma_s=self.sigma_s, sigma_t=self.sigma_t,
            enable_dp=self.enable_dp, enable_dt=self.enable_dt, use_lcfa=self.use_lcfa,
            use_gkr=self.use_gkr, use_ca=self.use_ca, reorder=self.reorder,
        )

    def to_record(self) -> Dict[str, Union[int, float, str, bool]]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _convert(key: str, raw: str, kind):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"invalid value for '{key}': {raw!r}") from None


def parse_config(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    known = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for key, raw in parser.items(_SECTION):
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _convert(key, raw, known[key])
    return replace(base, **values).validate()


def load_config(path: Union[str, Path], base: RunConfig = RunConfig()) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config(text, base)
    logger.debug("loaded config %s", path)
    return cfg
