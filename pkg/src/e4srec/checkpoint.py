"""Sectioned checkpoint files for pretraining artifacts.

Same conventions as the deployment bundle (little-endian, u32 section lengths,
trailing CRC32) with a JSON header so one reader handles SASRec, BPR,
backbone and embedding-table checkpoints.

Layout: b"E4SC" | u32 version | u32 header_len | header JSON |
        per array: u32 byte_len + raw bytes | u32 CRC32 of everything before.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from e4srec.errors import BundleCorruptError

MAGIC = b"E4SC"
VERSION = 1


def save_checkpoint(path: str | os.PathLike, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    specs = []
    payload = bytearray()
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        dtype = "<f4" if a.dtype.kind == "f" else "<i8"
        raw = a.astype(dtype).tobytes()
        specs.append({"name": name, "shape": list(a.shape), "dtype": dtype})
        payload += struct.pack("<I", len(raw)) + raw
    header = json.dumps({"kind": kind, "meta": meta or {}, "arrays": specs}).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + bytes(payload)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise BundleCorruptError(f"{path}: not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise BundleCorruptError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise BundleCorruptError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(body[12:12 + hlen])
    if kind is not None and header["kind"] != kind:
        raise BundleCorruptError(f"{path}: expected a {kind!r} checkpoint, found {header['kind']!r}")
    pos = 12 + hlen
    arrays = {}
    for spec in header["arrays"]:
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        dt = np.dtype(spec["dtype"])
        expected = int(np.prod(spec["shape"], dtype=np.int64)) * dt.itemsize
        if n != expected:
            raise BundleCorruptError(f"{path}: section {spec['name']!r} has {n} bytes, expected {expected}")
        arrays[spec["name"]] = np.frombuffer(body, dtype=dt, count=n // dt.itemsize, offset=pos).reshape(spec["shape"]).copy()
        pos += n
    if pos != len(body):
        raise BundleCorruptError(f"{path}: trailing bytes after last section")
    return arrays, header["meta"]
