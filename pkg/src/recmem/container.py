"""Binary container shared by checkpoints and memory-bank stores.

Layout: 8-byte magic, u32 version, u64 manifest length, JSON manifest, then
little-endian f64 arrays at the byte offsets listed in the manifest.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class FormatError(ValueError):
    pass


def encode(magic, manifest, arrays):
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = dict(manifest, tensors=entries)
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return _HEADER.pack(magic, VERSION, len(blob)) + blob + b"".join(chunks)


def decode(buf, magic):
    if len(buf) < _HEADER.size:
        raise FormatError("file too short for header")
    got, version, n = _HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    start = _HEADER.size
    try:
        manifest = json.loads(buf[start:start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt manifest: {e}") from None
    payload = memoryview(buf)[start + n:]
    arrays = {}
    for t in manifest.get("tensors", []):
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = t["offset"] + 8 * count
        if end > len(payload):
            raise FormatError(f"tensor {t['name']!r} runs past end of file")
        arrays[t["name"]] = np.frombuffer(payload[t["offset"]:end], dtype="<f8").reshape(t["shape"]).astype(np.float64)
    return manifest, arrays


def atomic_write(path, data):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data if isinstance(data, bytes) else data.encode())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write(path, magic, manifest, arrays):
    blob = encode(magic, manifest, arrays)
    atomic_write(path, blob)
    return hashlib.sha256(blob).hexdigest()


def read(path, magic):
    with open(path, "rb") as f:
        return decode(f.read(), magic)


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
