"""Little-endian tensor container ("MVNW") shared by weights and datasets."""
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"MVNW"
VERSION = 1
_PRECISION = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class WeightFileError(ValueError):
    pass


def pack_tensors(tensors):
    """Serialize an ordered mapping of name -> float array to bytes."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAG:
            raise WeightFileError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise WeightFileError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise WeightFileError(f"tensor {name!r}: rank {arr.ndim} too large")
        tag = _TAG[arr.dtype]
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<B", tag))
        chunks.append(np.ascontiguousarray(arr, dtype=_PRECISION[tag]).tobytes())
    return b"".join(chunks)


def unpack_tensors(blob):
    if blob[:4] != MAGIC:
        raise WeightFileError("not an MVNW container (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise WeightFileError(f"unsupported MVNW version {version}")
    pos = 12
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            (tag,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            if tag not in _PRECISION:
                raise WeightFileError(f"tensor {name!r}: unknown precision tag {tag}")
            dt = _PRECISION[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(blob):
                raise WeightFileError(f"tensor {name!r}: truncated buffer")
            arr = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
            out[name] = arr.reshape(shape).astype(dt.newbyteorder("="))
            pos += nbytes
    except struct.error as exc:
        raise WeightFileError(f"truncated MVNW container: {exc}") from None
    if pos != len(blob):
        raise WeightFileError(f"{len(blob) - pos} trailing bytes after {count} tensors")
    return out


def save_tensors(path, tensors):
    with open(path, "wb") as fh:
        fh.write(pack_tensors(tensors))


def load_tensors(path):
    with open(path, "rb") as fh:
        return unpack_tensors(fh.read())
