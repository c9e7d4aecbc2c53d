"""Binary checkpoint container.

Layout: magic "TIEC", format version u32, metadata length u32 + UTF-8 JSON
(config snapshot, seed, step), tensor count u32, then per tensor:
name length u16, name bytes, dtype code u8 (0=fp32, 1=fp64), ndim u8,
dims u32 x ndim, raw little-endian data. Loads reject version mismatches
and trailing bytes; round trips are bitwise.
"""

import hashlib
import json
import os
import struct

import numpy as np

MAGIC = b"TIEC"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(RuntimeError):
    pass


def save(path, tensors, meta):
    """Write named arrays plus a JSON metadata block. `tensors` maps
    name -> numpy array (or Tensor); names are written sorted."""
    blob = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob.append(struct.pack("<I", len(meta_bytes)))
    blob.append(meta_bytes)
    names = sorted(tensors)
    blob.append(struct.pack("<I", len(names)))
    for name in names:
        arr = tensors[name]
        arr = np.asarray(arr.data if hasattr(arr, "data") and not isinstance(arr, np.ndarray)
                         else arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        nb = name.encode("utf-8")
        blob.append(struct.pack("<H", len(nb)))
        blob.append(nb)
        blob.append(struct.pack("<BB", code, arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(blob))
    os.replace(tmp, path)


def load(path):
    """Read back (tensors dict, metadata dict); bitwise inverse of save."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {VERSION}")
    pos = 8
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _DTYPES.get(code)
        if dt is None:
            raise CheckpointError(f"unknown dtype code {code}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if ndim else dt.itemsize
        tensors[name] = np.frombuffer(buf[pos:pos + nbytes], dtype=dt).reshape(dims).copy()
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after tensor directory")
    return tensors, meta


def params_hash(tensors):
    """SHA-256 over names and raw bytes, sorted by name."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = tensors[name]
        arr = np.asarray(arr.data if hasattr(arr, "data") and not isinstance(arr, np.ndarray)
                         else arr)
        h.update(name.encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()
