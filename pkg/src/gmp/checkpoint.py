"""Binary ParamSet checkpoints.

Little-endian layout: magic "GMPC", format version u32, parameter count u32,
then per parameter: id length u32, id bytes, partition tag u8, rank u32,
one u64 per dim, float64 payload. Round-trips bitwise.
"""

import struct

import numpy as np

from .autodiff import PARTITIONS, ParamSet

MAGIC = b"GMPC"
FORMAT_VERSION = 1

_PARTITION_TAG = {name: i for i, name in enumerate(PARTITIONS)}
_TAG_PARTITION = {i: name for i, name in enumerate(PARTITIONS)}


def save_checkpoint(path, params: ParamSet) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(params)))
        for name in sorted(params.names()):
            tensor = params[name]
            ident = name.encode("utf-8")
            fh.write(struct.pack("<I", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<BI", _PARTITION_TAG[params.partition_of(name)],
                                 tensor.data.ndim))
            for dim in tensor.data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParamSet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", _read(fh, 8))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        params = ParamSet()
        for _ in range(count):
            (id_len,) = struct.unpack("<I", _read(fh, 4))
            name = _read(fh, id_len).decode("utf-8")
            tag, rank = struct.unpack("<BI", _read(fh, 5))
            if tag not in _TAG_PARTITION:
                raise ValueError(f"unknown partition tag {tag} for {name!r}")
            shape = tuple(struct.unpack("<Q", _read(fh, 8))[0] for _ in range(rank))
            n_values = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = _read(fh, 8 * n_values)
            data = np.frombuffer(payload, dtype="<f8").reshape(shape)
            params.add(name, data, _TAG_PARTITION[tag])
    return params


def _read(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint file")
    return buf
