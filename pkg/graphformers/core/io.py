"""
GFKT binary tensor format.

Layout: magic b"GFKT", version u32, rank u32, extents u64[rank], then the
row-major payload as little-endian float64.
"""
import struct
from pathlib import Path
from typing import Union

import numpy as np

from graphformers.core.tensor import Tensor
from graphformers.errors import ContractError

MAGIC = b"GFKT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")


def dumps(tensor: Union[Tensor, np.ndarray]) -> bytes:
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    extents = struct.pack(f"<{data.ndim}Q", *data.shape)
    payload = np.ascontiguousarray(data, dtype="<f8").tobytes()
    return _HEADER.pack(MAGIC, FORMAT_VERSION, data.ndim) + extents + payload


def loads(blob: bytes, requires_grad: bool = False) -> Tensor:
    if len(blob) < _HEADER.size:
        raise ContractError("GFKT blob shorter than its header")
    magic, version, rank = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ContractError(f"bad GFKT magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported GFKT version {version}")
    offset = _HEADER.size
    shape = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(blob) - offset != 8 * count:
        raise ContractError(f"GFKT payload has {len(blob) - offset} bytes, expected {8 * count}")
    array = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
    return Tensor(array, requires_grad=requires_grad)


def save_tensor(path: Union[str, Path], tensor: Tensor) -> None:
    Path(path).write_bytes(dumps(tensor))


def load_tensor(path: Union[str, Path], requires_grad: bool = False) -> Tensor:
    return loads(Path(path).read_bytes(), requires_grad=requires_grad)
