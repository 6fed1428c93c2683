"""Flat binary container for named float arrays.

Layout (all integers little-endian):

    magic   8 bytes  b"DPAFPAR1"
    version u16
    count   u32
    entry*  count times:
        name_len u32, name utf-8 bytes,
        dtype    u8 (0 = float32, 1 = float64),
        rank     u8,
        shape    rank x u32,
        data     raw little-endian values

Round-trips are bit-exact; loaders fail loudly on bad magic, unknown dtype
tags, or truncation, naming the offending entry where possible.
"""

import struct

import numpy as np

MAGIC = b"DPAFPAR1"
VERSION = 1

_DTYPE_TO_TAG = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def pack_arrays(arrays):
    """Serialize an ordered {name: ndarray} map to bytes."""
    parts = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name, arr in arrays.items():
        a = np.asarray(arr)
        if not a.flags.c_contiguous:       # keep 0-d arrays 0-d
            a = np.ascontiguousarray(a)
        if a.dtype not in _DTYPE_TO_TAG:
            raise ValueError(f"{name}: unsupported dtype {a.dtype} "
                             f"(only float32/float64 are serialized)")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", _DTYPE_TO_TAG[a.dtype], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(parts)


class _Cursor:
    def __init__(self, buf, label):
        self.buf = buf
        self.off = 0
        self.label = label

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise ValueError(f"{self.label}: truncated container while reading {what}")
        piece = self.buf[self.off:self.off + n]
        self.off += n
        return piece

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def unpack_arrays(buf, label="container"):
    """Inverse of pack_arrays; returns an ordered {name: ndarray} map."""
    cur = _Cursor(buf, label)
    if cur.take(len(MAGIC), "magic") != MAGIC:
        raise ValueError(f"{label}: not a parameter container (bad magic)")
    version, count = cur.unpack("<HI", "header")
    if version != VERSION:
        raise ValueError(f"{label}: unsupported container version {version}")
    out = {}
    for i in range(count):
        (name_len,) = cur.unpack("<I", f"entry {i} name length")
        name = cur.take(name_len, f"entry {i} name").decode("utf-8")
        tag, rank = cur.unpack("<BB", f"{name}: dtype/rank")
        if tag not in _TAG_TO_DTYPE:
            raise ValueError(f"{label}: {name}: unknown dtype tag {tag}")
        shape = cur.unpack(f"<{rank}I", f"{name}: shape")
        dtype = _TAG_TO_DTYPE[tag]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = cur.take(n_bytes, f"{name}: data")
        if name in out:
            raise ValueError(f"{label}: duplicate entry name {name!r}")
        out[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    if cur.off != len(buf):
        raise ValueError(f"{label}: {len(buf) - cur.off} trailing bytes after "
                         f"the last entry")
    return out


def save_arrays(path, arrays):
    with open(path, "wb") as f:
        f.write(pack_arrays(arrays))


def load_arrays(path):
    with open(path, "rb") as f:
        buf = f.read()
    return unpack_arrays(buf, label=str(path))
