"""DTN1 tensor files and the named-tensor bundle built on them.

DTN1 layout: ``b"DTN1"``, u32 rank, rank x u64 extents, then the row-major
little-endian float64 payload.

Bundle layout: ``b"MVCK"``, u32 version, u32 header length, UTF-8 JSON
header (sorted keys), u32 tensor count, then per tensor a u16 name length,
the UTF-8 name, a u64 blob length and a DTN1 blob; finally the SHA-256 of
everything before it. Bundles are written to a temp file and renamed.
"""
import hashlib
import io
import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"DTN1"
BUNDLE_MAGIC = b"MVCK"
BUNDLE_VERSION = 1


class CorruptFileError(ValueError):
    pass


def encode(array):
    a = np.array(array, dtype="<f8", order="C")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def decode(blob):
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CorruptFileError("not a DTN1 tensor")
    (rank,) = struct.unpack_from("<I", blob, 4)
    off = 8 + 8 * rank
    if len(blob) < off:
        raise CorruptFileError("truncated DTN1 header")
    dims = struct.unpack_from(f"<{rank}Q", blob, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) != off + 8 * count:
        raise CorruptFileError(f"DTN1 payload holds {len(blob) - off} bytes, dims need {8 * count}")
    return np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)


def write(path, array):
    _atomic_write(path, encode(array))


def read(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def _atomic_write(path, payload):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_bundle(tensors, header):
    buf = io.BytesIO()
    hdr = json.dumps(header, sort_keys=True).encode()
    buf.write(BUNDLE_MAGIC + struct.pack("<II", BUNDLE_VERSION, len(hdr)) + hdr)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode()
        blob = encode(arr)
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<Q", len(blob)) + blob)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def decode_bundle(payload):
    if len(payload) < 44 or payload[:4] != BUNDLE_MAGIC:
        raise CorruptFileError("corrupt checkpoint: bad magic or too short")
    body, digest = payload[:-32], payload[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFileError("corrupt checkpoint: checksum mismatch (truncated or modified)")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != BUNDLE_VERSION:
        raise CorruptFileError(f"unsupported checkpoint version {version}")
    off = 12
    header = json.loads(body[off:off + hlen].decode())
    off += hlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        (blen,) = struct.unpack_from("<Q", body, off)
        off += 8
        tensors[name] = decode(body[off:off + blen])
        off += blen
    if off != len(body):
        raise CorruptFileError("corrupt checkpoint: trailing bytes")
    return tensors, header


def save_bundle(path, tensors, header):
    _atomic_write(path, encode_bundle(tensors, header))


def load_bundle(path):
    with open(path, "rb") as fh:
        return decode_bundle(fh.read())
