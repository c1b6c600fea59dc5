"""Binary checkpoint container shared by every model component.

Layout (little-endian)::

    b"MSEF" | version u32 | tag_len u32 | tag bytes | cfg_len u32 | cfg JSON bytes
    | n_tensors u32 | n_tensors * (name_len u32 | name | rank u32 | extents u32[rank] | f32[prod])

Config fields are stored as canonical JSON (sorted keys) so the header is
byte-stable for a given config.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MSEF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tag: str, config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    tag_b = tag.encode("utf-8")
    parts += [struct.pack("<I", len(tag_b)), tag_b]
    cfg_b = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(cfg_b)), cfg_b]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        name_b = name.encode("utf-8")
        parts += [struct.pack("<I", len(name_b)), name_b, struct.pack("<I", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an MSEF checkpoint (bad magic)")
    pos = 4

    def u32() -> int:
        nonlocal pos
        (v,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        return v

    def raw(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        out = blob[pos : pos + n]
        pos += n
        return out

    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tag = raw(u32()).decode("utf-8")
    config = json.loads(raw(u32()).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        name = raw(u32()).decode("utf-8")
        rank = u32()
        shape = tuple(u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(raw(4 * count), dtype="<f4").reshape(shape).copy()
    return tag, config, tensors


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write-then-rename so readers never observe a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, tag: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    atomic_write(path, dumps(tag, config, tensors))


def load(path, expect_tag: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    tag, config, tensors = loads(Path(path).read_bytes())
    if expect_tag is not None and tag != expect_tag:
        raise CheckpointError(f"{path}: expected component {expect_tag!r}, found {tag!r}")
    return tag, config, tensors
