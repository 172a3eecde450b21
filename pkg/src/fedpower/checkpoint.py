# File: src/fedpower/checkpoint.py
"""
Model checkpoint format.

Layout (little-endian): magic ``FPMDL01``, kind tag (uint8 length + ASCII),
layer-dimension list (uint32 count + uint32 entries), parameter count
(uint64), then float64 parameters in layer order (weight matrix row-major,
followed by its bias when the kind has biases).
"""

from __future__ import annotations

import logging
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import MODEL_MAGIC
from .diffcore import FloatArray
from .errors import FormatError, LengthError, ShapeError

__all__ = [
    "Checkpoint",
    "layer_shapes",
    "flatten",
    "unflatten",
    "write_checkpoint",
    "read_checkpoint",
]

logger = logging.getLogger(__name__)

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class Checkpoint:
    kind: str
    dims: tuple[int, ...]
    parameters: FloatArray

    def arrays(self, bias: bool) -> list[FloatArray]:
        return unflatten(self.parameters, layer_shapes(self.dims, bias))


def layer_shapes(dims: Sequence[int], bias: bool) -> list[tuple[int, ...]]:
    """Shapes of the parameters of a dense chain ``dims[0] -> ... -> dims[-1]``."""
    shapes: list[tuple[int, ...]] = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        shapes.append((d_in, d_out))
        if bias:
            shapes.append((d_out,))
    return shapes


def flatten(arrays: Sequence[FloatArray]) -> FloatArray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays])


def unflatten(flat: FloatArray, shapes: Sequence[tuple[int, ...]]) -> list[FloatArray]:
    total = sum(int(np.prod(s)) for s in shapes)
    if flat.size != total:
        raise ShapeError(f"{flat.size} parameters for shapes needing {total}")
    out: list[FloatArray] = []
    start = 0
    for shape in shapes:
        n = int(np.prod(shape))
        out.append(flat[start : start + n].reshape(shape).copy())
        start += n
    return out


def write_checkpoint(
    path: Path | str, kind: str, dims: Sequence[int], arrays: Sequence[FloatArray]
) -> None:
    tag = kind.encode("ascii")
    flat = flatten(arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(bytes([len(tag)]))
        f.write(tag)
        f.write(_U32.pack(len(dims)))
        for d in dims:
            f.write(_U32.pack(int(d)))
        f.write(_U64.pack(flat.size))
        f.write(flat.astype("<f8").tobytes())
    logger.info("wrote %s checkpoint %s (%d parameters)", kind, path, flat.size)


def read_checkpoint(path: Path | str) -> Checkpoint:
    """Parse a checkpoint file.

    Raises:
        FormatError: On a wrong magic.
        LengthError: If the file ends before the announced content.
    """
    data = Path(path).read_bytes()
    if data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError(f"bad model magic {data[: len(MODEL_MAGIC)]!r} in {path}")
    pos = len(MODEL_MAGIC)
    try:
        tag_len = data[pos]
        pos += 1
        kind = data[pos : pos + tag_len].decode("ascii")
        pos += tag_len
        (n_dims,) = _U32.unpack_from(data, pos)
        pos += _U32.size
        dims = tuple(
            _U32.unpack_from(data, pos + i * _U32.size)[0] for i in range(n_dims)
        )
        pos += n_dims * _U32.size
        (count,) = _U64.unpack_from(data, pos)
        pos += _U64.size
    except (IndexError, struct.error) as exc:
        raise LengthError(f"truncated checkpoint header in {path}") from exc
    if len(data) < pos + 8 * count:
        raise LengthError(f"{path}: {count} parameters announced, payload is short")
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return Checkpoint(kind=kind, dims=dims, parameters=flat)
