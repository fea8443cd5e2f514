"""
RASNN named-tensor checkpoint container.

Layout (all integers little-endian):
    b"RASNN" | version u32 | tensor count u64
    per tensor: name length u32 | name utf-8 | rank u32 | dims i64*rank | dtype tag u8 | raw values
"""

import logging
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Union

import numpy as np

from .errors import ContractError, RasnetError

logger = logging.getLogger(__name__)

MAGIC = b"RASNN"
FORMAT_VERSION = 1

DTYPE_TAGS = {
    np.dtype(np.float32): 1,
    np.dtype(np.float64): 2,
    np.dtype(np.int64): 3,
}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}


class CheckpointFormatError(RasnetError):
    """A checkpoint file is truncated or not in RASNN format."""


def _read_exact(stream: BinaryIO, count: int, what: str) -> bytes:
    data = stream.read(count)
    if len(data) != count:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return data


def save_checkpoint(path: Union[str, Path], tensors: Dict[str, np.ndarray]) -> Path:
    """Write named arrays; order of insertion is preserved."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(tensors)))
        for name, value in tensors.items():
            array = np.asarray(value)
            if array.dtype not in DTYPE_TAGS:
                raise ContractError(f"{name}: unsupported checkpoint dtype {array.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}q", *array.shape))
            fh.write(struct.pack("<B", DTYPE_TAGS[array.dtype]))
            fh.write(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())
    logger.debug("wrote %d tensors to %s", len(tensors), path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read every named array back, bit-exact."""
    tensors: Dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise CheckpointFormatError(f"{path} is not a RASNN checkpoint")
        version, count = struct.unpack("<IQ", _read_exact(fh, 12, "header"))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported RASNN version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} rank"))
            dims = struct.unpack(f"<{rank}q", _read_exact(fh, 8 * rank, f"{name} dims"))
            (tag,) = struct.unpack("<B", _read_exact(fh, 1, f"{name} dtype"))
            if tag not in TAG_DTYPES:
                raise CheckpointFormatError(f"{name}: unknown dtype tag {tag}")
            dtype = TAG_DTYPES[tag].newbyteorder("<")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            raw = _read_exact(fh, nbytes, f"{name} values")
            tensors[name] = np.frombuffer(raw, dtype=dtype).astype(TAG_DTYPES[tag]).reshape(dims)
        if fh.read(1):
            raise CheckpointFormatError(f"{path} has trailing bytes after {count} tensors")
    return tensors
