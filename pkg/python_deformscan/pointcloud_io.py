"""Lecture des nuages de points : XYZ texte et PLY (via plyfile)."""

import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from plyfile import PlyData, PlyElementParseError, PlyHeaderParseError, PlyParseError

from .data import PointCloud
from .errors import EmptyInputError, PointCloudParseError

logger = logging.getLogger(__name__)

FORMATS = ("xyz", "ply-ascii")


def detect_format(path: Union[str, Path]) -> str:
    return "ply-ascii" if Path(path).suffix.lower() == ".ply" else "xyz"


def _read_xyz(path: Path) -> np.ndarray:
    rows: List[List[float]] = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            fields = line.split()
            if not fields:
                continue
            # les colonnes au-delà de x y z (normales, couleurs) sont ignorées
            if len(fields) < 3:
                raise PointCloudParseError(f"expected 'x y z', got {line.strip()!r}", line=lineno)
            try:
                values = [float(v) for v in fields[:3]]
            except ValueError:
                raise PointCloudParseError(f"non-numeric coordinate in {line.strip()!r}", line=lineno) from None
            if not np.isfinite(values).all():
                raise PointCloudParseError("non-finite coordinate", line=lineno)
            rows.append(values)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def _header_length(path: Path) -> int:
    with path.open("rb") as handle:
        for lineno, line in enumerate(handle, start=1):
            if line.strip() == b"end_header":
                return lineno
    return 0


def _read_ply(path: Path) -> np.ndarray:
    try:
        ply = PlyData.read(str(path))
    except PlyHeaderParseError as exc:
        raise PointCloudParseError(f"malformed PLY header: {exc}", line=exc.line) from None
    except PlyElementParseError as exc:
        line = None if exc.row is None else _header_length(path) + exc.row + 1
        raise PointCloudParseError(f"malformed PLY body: {exc}", line=line) from None
    except PlyParseError as exc:
        raise PointCloudParseError(f"malformed PLY file: {exc}") from None

    if "vertex" not in ply:
        raise PointCloudParseError("PLY file has no 'vertex' element", line=1)
    vertex = ply["vertex"]
    names = set(vertex.data.dtype.names or ())
    for axis in "xyz":
        if axis not in names:
            raise PointCloudParseError(f"vertex element lacks property '{axis}'", line=1)
    coords = np.stack([vertex.data[axis].astype(np.float64) for axis in "xyz"], axis=1)
    if not np.isfinite(coords).all():
        bad = int(np.nonzero(~np.isfinite(coords).all(axis=1))[0][0])
        raise PointCloudParseError("non-finite coordinate", line=_header_length(path) + bad + 1)
    return coords


def load_pointcloud(path: Union[str, Path], fmt: Optional[str] = None) -> PointCloud:
    path = Path(path)
    fmt = fmt or detect_format(path)
    if fmt not in FORMATS:
        raise PointCloudParseError(f"unknown point cloud format '{fmt}', expected one of {FORMATS}")
    try:
        coords = _read_ply(path) if fmt == "ply-ascii" else _read_xyz(path)
    except (OSError, UnicodeDecodeError) as exc:
        raise PointCloudParseError(f"cannot read {path}: {exc}") from None
    if coords.shape[0] == 0:
        raise EmptyInputError(f"{path} contains no points")
    logger.debug("loaded %d points from %s (%s)", coords.shape[0], path, fmt)
    return PointCloud(coords)
