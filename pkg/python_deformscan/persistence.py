"""Conteneur binaire des paramètres.

Disposition (petit-boutiste) :
    magic   8 octets  b"DSCANPRM"
    version uint32
    count   uint32
    puis, pour chaque tableau :
        name_len uint32, nom UTF-8, ndim uint32, ndim x uint64 (forme),
        prod(forme) x float64
"""

import logging
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
import torch

from .errors import ParamFileError, ParamShapeError

logger = logging.getLogger(__name__)

MAGIC = b"DSCANPRM"
VERSION = 1


def save_params(path: Union[str, Path], arrays: Mapping[str, Union[np.ndarray, torch.Tensor]]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, value in arrays.items():
        if torch.is_tensor(value):
            value = value.detach().cpu().numpy()
        array = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{array.ndim}Q", array.ndim, *array.shape))
        chunks.append(array.tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.debug("saved %d arrays to %s", len(arrays), path)


class _Reader:
    def __init__(self, buffer: bytes):
        self.buffer = buffer
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.buffer):
            raise ParamFileError(f"truncated parameter file while reading {what}")
        chunk = self.buffer[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_params(path: Union[str, Path],
                expected_shapes: Optional[Mapping[str, Sequence[int]]] = None) -> Dict[str, np.ndarray]:
    """Relit un conteneur ; avec `expected_shapes`, chaque tableau attendu doit exister avec cette forme."""
    try:
        reader = _Reader(Path(path).read_bytes())
    except OSError as exc:
        raise ParamFileError(f"cannot read parameter file {path}: {exc}") from None

    if reader.take(len(MAGIC), "magic header") != MAGIC:
        raise ParamFileError("not a parameter file (bad magic header)")
    version, count = reader.unpack("<II", "version")
    if version != VERSION:
        raise ParamFileError(f"unsupported parameter file version {version} (expected {VERSION})")

    arrays: Dict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<I", "array name length")
        try:
            name = reader.take(name_len, "array name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParamFileError("corrupted array name") from None
        (ndim,) = reader.unpack("<I", f"rank of '{name}'")
        shape = reader.unpack(f"<{ndim}Q", f"shape of '{name}'")
        data = reader.take(8 * math.prod(shape), f"data of '{name}'")
        try:
            arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
        except (ValueError, OverflowError):
            raise ParamFileError(f"invalid shape {shape} for '{name}'") from None
    if reader.offset != len(reader.buffer):
        raise ParamFileError(f"{len(reader.buffer) - reader.offset} trailing bytes after the last array")

    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in arrays:
                raise ParamFileError(f"missing array '{name}'")
            if tuple(arrays[name].shape) != tuple(shape):
                raise ParamShapeError(name, shape, arrays[name].shape)
    return arrays
