"""Binary artifact container shared by checkpoints and dataset bundles.

Layout: 4 magic bytes, little-endian u16 format version, little-endian u32
header length, UTF-8 JSON header, then the raw array payload in header order.
The header's ``arrays`` list records name/shape/dtype per array, so payload
framing is exact and truncation is detectable.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1

MODEL_MAGIC = b"MMSV"
BLENDER_MAGIC = b"MMSB"
DATASET_MAGIC = b"MMSD"


def write_container(path, magic, header, arrays):
    """Write ``arrays`` (list of (name, ndarray)) with a JSON header."""
    header = dict(header)
    header["arrays"] = [
        {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str}
        for name, arr in arrays
    ]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_container(path, magic):
    """Read a container, returning (header, {name: array}).

    Raises CheckpointError on bad magic, unknown version, or truncation; a
    truncated file never yields a partial result.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc

    if len(raw) < 10 or raw[:4] != magic:
        raise CheckpointError(f"{path}: bad magic (expected {magic!r})")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack_from("<I", raw, 6)
    if len(raw) < 10 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[10 : 10 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc

    arrays = {}
    offset = 10 + header_len
    for entry in header.get("arrays", []):
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays
