"""UQW1 weight snapshots.

Layout: the magic ``UQW1``, then per tensor a uint32 name length, the UTF-8
name, a uint32 rank, rank uint32 dimensions and the values as little-endian
float64. All integers are little-endian.
"""

import struct
from pathlib import Path

import numpy as np

from ..schemas import Tensor
from .layers import NNError
from .model import Network

MAGIC = b"UQW1"


class WeightFormatError(NNError):
    pass


def encode_tensors(tensors: dict[str, Tensor]) -> bytes:
    buf = bytearray(MAGIC)
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f8")
        buf += struct.pack("<I", len(encoded)) + encoded
        buf += struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
        buf += arr.tobytes()
    return bytes(buf)


def decode_tensors(data: bytes) -> dict[str, Tensor]:
    if data[:4] != MAGIC:
        raise WeightFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    tensors = {}
    offset = 4
    try:
        while offset < len(data):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if offset + 8 * count > len(data):
                raise WeightFormatError(f"tensor {name!r} is truncated")
            tensors[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)
            offset += 8 * count
    except (struct.error, UnicodeDecodeError) as e:
        raise WeightFormatError(f"malformed weight record at byte {offset}: {e}") from e
    return tensors


def save_weights(net: Network, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(encode_tensors({**net.parameters(), **net.state()}))
    return path


def load_weights(net: Network, path: str | Path) -> Network:
    """Copy a snapshot into ``net``; names and shapes must match exactly."""
    tensors = decode_tensors(Path(path).read_bytes())
    targets = {**net.parameters(), **net.state()}
    if set(tensors) != set(targets):
        missing = sorted(set(targets) - set(tensors))
        extra = sorted(set(tensors) - set(targets))
        raise WeightFormatError(f"snapshot does not match model: missing={missing} extra={extra}")
    for name, value in tensors.items():
        if value.shape != targets[name].shape:
            raise WeightFormatError(f"{name}: snapshot shape {value.shape} != model shape {targets[name].shape}")
        targets[name][...] = value
    return net
