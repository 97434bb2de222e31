"""SEVX binary tensor container.

Layout: magic ``SEVX``, format version (u32 LE), length-prefixed UTF-8
metadata block (u64 LE length; dotted key = value lines), then named tensors
until EOF. Each tensor is: name length (u64 LE), UTF-8 name, rank (u64 LE),
dims (u64 LE each), raw float32 little-endian payload. Round-trips are
bit-exact; every read error reports the byte offset it happened at.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"SEVX"
VERSION = 1


class ContainerError(IOError):
    """Corrupt or truncated container, with file-and-offset diagnostics."""


def metadata_to_text(meta: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in meta.items())


def metadata_from_text(text: str) -> dict[str, str]:
    meta: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    return meta


def write_container(path: str, metadata: str, tensors) -> None:
    """Write named float32 tensors with a metadata header.

    ``tensors`` is an iterable of (name, ndarray); order is preserved, so a
    deterministic producer yields byte-identical files.
    """
    meta_bytes = metadata.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        for name, arr in tensors:
            data = np.ascontiguousarray(arr, dtype="<f4")
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<Q", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<Q", data.ndim))
            for d in data.shape:
                f.write(struct.pack("<Q", d))
            f.write(data.tobytes())


def _read_exact(f, n: int, path: str, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise ContainerError(
            f"{path}: truncated while reading {what} at offset {offset} "
            f"(wanted {n} bytes, got {len(buf)})")
    return buf


def read_container(path: str) -> tuple[str, "OrderedDict[str, np.ndarray]"]:
    """Read (metadata text, ordered name -> float32 array)."""
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path, "magic")
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r} at offset 0, not a SEVX container")
        (version,) = struct.unpack("<I", _read_exact(f, 4, path, "version"))
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported container version {version} at offset 4")
        (meta_len,) = struct.unpack("<Q", _read_exact(f, 8, path, "metadata length"))
        meta = _read_exact(f, meta_len, path, "metadata block").decode("utf-8")
        while True:
            head = f.read(8)
            if len(head) == 0:
                break
            if len(head) != 8:
                raise ContainerError(
                    f"{path}: truncated tensor header at offset {f.tell() - len(head)}")
            (name_len,) = struct.unpack("<Q", head)
            name = _read_exact(f, name_len, path, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(f, 8, path, f"rank of {name!r}"))
            dims = struct.unpack(
                f"<{rank}Q", _read_exact(f, 8 * rank, path, f"dims of {name!r}"))
            count =1
            for d in dims:
                count *= d
            payload = _read_exact(f, 4 * count, path, f"payload of {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return meta, tensors
