"""Bit-exact persistence of named tensor sets in a small binary container.

Layout: magic "BRLB", u32 version, u64 manifest length, UTF-8 JSON
manifest, then raw little-endian payloads at 64-byte-aligned offsets.
Loading validates every manifest claim against the file size before a
single payload byte is read, so corrupt files error instead of crashing.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

MAGIC = b"BRLB"
VERSION = 1
ALIGN = 64
_HEADER = struct.Struct("<4sIQ")

_DTYPES = {"f4": "<f4", "f8": "<f8", "i4": "<i4", "i8": "<i8"}
_CODES = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8",
          np.dtype(np.int32): "i4", np.dtype(np.int64): "i8"}


class CheckpointError(Exception):
    """Raised for any malformed, truncated or mismatched checkpoint file."""


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    shape: tuple
    dtype: str
    width: int
    offset: int
    nbytes: int


@dataclass(frozen=True)
class Manifest:
    version: int
    entries: tuple

    def to_json(self) -> str:
        return json.dumps({
            "version": self.version,
            "entries": [
                {"name": e.name, "shape": list(e.shape), "dtype": e.dtype,
                 "width": e.width, "offset": e.offset, "nbytes": e.nbytes}
                for e in self.entries
            ],
        }, sort_keys=True)


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _layout(arrays: list, base: int) -> list[ManifestEntry]:
    entries = []
    off = base
    for name, a in arrays:
        entries.append(ManifestEntry(name, a.shape, _CODES[a.dtype], a.dtype.itemsize,
                                     off, a.nbytes))
        off += _align(max(a.nbytes, 1))
    return entries


def save(tensors: dict[str, np.ndarray], path: str) -> None:
    """Write a named tensor set atomically (temp file + rename)."""
    if not tensors:
        raise CheckpointError("refusing to save an empty tensor set")
    arrays = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        if a.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {a.dtype} for {name!r}")
        arrays.append((name, a))

    # payload base depends on manifest size which embeds the offsets, so
    # iterate the layout until the aligned base stops moving (1-2 rounds)
    base = _align(_HEADER.size)
    for _ in range(16):
        entries = _layout(arrays, base)
        mbytes = Manifest(VERSION, tuple(entries)).to_json().encode("utf-8")
        need = _align(_HEADER.size + len(mbytes))
        if need == base:
            break
        base = need
    else:  # pragma: no cover - layout always converges
        raise CheckpointError("could not lay out manifest")

    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".brlb.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, len(mbytes)))
            f.write(mbytes)
            pos = _HEADER.size + len(mbytes)
            for (name, a), e in zip(arrays, entries):
                f.write(b"\x00" * (e.offset - pos))
                f.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
                pos = e.offset + e.nbytes
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_manifest(blob: bytes, file_size: int) -> Manifest:
    """Validate header + manifest against the real file size."""
    if len(blob) < _HEADER.size:
        raise CheckpointError("truncated: file shorter than header")
    magic, version, mlen = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if mlen <= 0 or _HEADER.size + mlen > file_size or _HEADER.size + mlen > len(blob):
        raise CheckpointError("corrupt manifest: declared length exceeds file")
    try:
        doc = json.loads(blob[_HEADER.size:_HEADER.size + mlen].decode("utf-8"))
        raw_entries = doc["entries"]
        entries = []
        for r in raw_entries:
            entries.append(ManifestEntry(
                name=str(r["name"]),
                shape=tuple(int(s) for s in r["shape"]),
                dtype=str(r["dtype"]),
                width=int(r["width"]),
                offset=int(r["offset"]),
                nbytes=int(r["nbytes"]),
            ))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError,
            ValueError, AttributeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc

    prev_end = 0
    names = set()
    for e in entries:
        if e.dtype not in _DTYPES or np.dtype(_DTYPES[e.dtype]).itemsize != e.width:
            raise CheckpointError(f"corrupt manifest: bad dtype for {e.name!r}")
        if any(s <= 0 for s in e.shape):
            raise CheckpointError(f"corrupt manifest: bad shape for {e.name!r}")
        count = 1
        for s in e.shape:
            count *= s
        if count * e.width != e.nbytes:
            raise CheckpointError(f"corrupt manifest: size mismatch for {e.name!r}")
        if e.offset % ALIGN != 0:
            raise CheckpointError(f"corrupt manifest: unaligned offset for {e.name!r}")
        if e.offset < prev_end:
            raise CheckpointError("corrupt manifest: overlapping or unsorted entries")
        if e.offset + e.nbytes > file_size:
            raise CheckpointError(f"truncated: payload of {e.name!r} past end of file")
        if e.name in names:
            raise CheckpointError(f"corrupt manifest: duplicate name {e.name!r}")
        names.add(e.name)
        prev_end = e.offset + e.nbytes
    return Manifest(version, tuple(entries))


def load(path: str) -> dict[str, np.ndarray]:
    """Read back a tensor set; values round-trip bit-exactly."""
    with open(path, "rb") as f:
        blob = f.read()
    manifest = _parse_manifest(blob, len(blob))
    out = {}
    for e in manifest.entries:
        arr = np.frombuffer(blob, dtype=_DTYPES[e.dtype], count=e.nbytes // e.width,
                            offset=e.offset)
        # stored little-endian; convert to native (byte-swaps on BE hosts)
        out[e.name] = arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(e.shape)
    return out


def inspect(path: str) -> Manifest:
    """Parse and validate the manifest without materializing payloads."""
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        f.seek(0, os.SEEK_END)
        size = f.tell()
        if len(head) < _HEADER.size:
            raise CheckpointError("truncated: file shorter than header")
        _, _, mlen = _HEADER.unpack(head)
        if mlen <= 0 or mlen > size:
            raise CheckpointError("corrupt manifest: declared length exceeds file")
        f.seek(0)
        blob = f.read(_HEADER.size + min(mlen, size))
    return _parse_manifest(blob, size)
