"""The pluggable bundle: the only per-dataset parameters a deployment needs.

Layout (little-endian):

    b"E4SB" | u32 version=1 | u32 N | u32 d_s | u32 d_k | u32 r | u32 alpha
    | u32 n_targets | n_targets x (u32 len + utf-8 name) | u8 provenance
    | u32 len + JSON metadata (shapes, creation info)
    | sections, each u32 byte_len + f32 data:
        E, W_in, then A and B for each target in declared order, W_out
    | u32 CRC32 of every preceding byte

Target names are the fully-qualified per-layer projections
(``layers.0.mlp.gate_proj``) so the file maps onto the backbone one-to-one.
The backbone itself is never written.
"""

from __future__ import annotations

import io
import json
import os
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from e4srec.autodiff import Tensor
from e4srec.backbone import BackboneWeights, LoRAAdapter
from e4srec.errors import BundleCorruptError, IncompatibleBundleError
from e4srec.model import INSTRUCTION, E4SRecModel, PromptTemplate
from e4srec.seqrec import ItemEmbeddingTable

MAGIC = b"E4SB"
VERSION = 1
PROVENANCE = {"sasrec": 0, "bpr": 1}
PROVENANCE_NAMES = {v: k for k, v in PROVENANCE.items()}


@dataclass
class BundleContents:
    n_items: int
    d_s: int
    d_k: int
    r: int
    alpha: int
    targets: list[str]
    provenance: str
    metadata: dict
    E: np.ndarray
    W_in: np.ndarray
    lora: dict[str, tuple[np.ndarray, np.ndarray]]
    W_out: np.ndarray
    crc: int = 0
    extra: dict = field(default_factory=dict)

    def param_count(self) -> int:
        return int(self.E.size + self.W_in.size + sum(a.size + b.size for a, b in self.lora.values()) + self.W_out.size)


def closed_form_param_count(n_items: int, d_s: int, d_k: int, r: int, projections: list[tuple[int, int]]) -> int:
    """N*d_s + d_s*d_k + sum r*(d_in + d_out) + d_k*N."""
    return n_items * d_s + d_s * d_k + sum(r * (i + o) for i, o in projections) + d_k * n_items


def _u32(x: int) -> bytes:
    return struct.pack("<I", x)


def _section(a: np.ndarray) -> bytes:
    raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
    return _u32(len(raw)) + raw


def export_bundle(model: E4SRecModel, path: str | os.PathLike, extra: dict | None = None) -> dict:
    """Write the bundle; returns a summary with the parameter count and its share of the backbone."""
    adapter = model.adapter
    targets = adapter.module_names if adapter is not None else []
    r = adapter.r if adapter is not None else 0
    alpha = adapter.alpha if adapter is not None else 0
    shapes = {"E": list(model.E.shape), "W_in": list(model.w_in.shape), "W_out": list(model.w_out.shape)}
    for name in targets:
        shapes[name] = [list(adapter.A[name].shape), list(adapter.B[name].shape)]
    meta = {
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "shapes": shapes,
        "no_llm": model.no_llm,
        "max_len": model.max_len,
        "lora_dropout": adapter.dropout if adapter is not None else 0.0,
        "instruction": model.template.instruction,
        "backbone_hash": model.backbone.hash() if model.backbone is not None else None,
        **(extra or {}),
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<6I", VERSION, model.n_items, model.embeddings.dim, model.d_k, r, alpha))
    buf.write(_u32(len(targets)))
    for name in targets:
        enc = name.encode("utf-8")
        buf.write(_u32(len(enc)) + enc)
    buf.write(struct.pack("<B", PROVENANCE[model.embeddings.provenance]))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(_u32(len(blob)) + blob)
    buf.write(_section(model.E.data))
    buf.write(_section(model.w_in.data))
    for name in targets:
        buf.write(_section(adapter.A[name].data))
        buf.write(_section(adapter.B[name].data))
    buf.write(_section(model.w_out.data))
    body = buf.getvalue()
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(body + _u32(zlib.crc32(body)))
    os.replace(tmp, path)

    count = model.bundle_param_count()
    summary = {"path": str(path), "bytes": len(body) + 4, "param_count": count}
    if model.backbone is not None:
        summary["backbone_param_count"] = model.backbone.param_count()
        summary["ratio_to_backbone"] = count / model.backbone.param_count()
    return summary


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BundleCorruptError(f"bundle ends early: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def section(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        n = self.u32()
        expected = 4 * int(np.prod(shape))
        if n != expected:
            raise BundleCorruptError(f"section {what}: {n} bytes but declared shape {shape} needs {expected}")
        return np.frombuffer(self.take(n), dtype="<f4").reshape(shape).astype(np.float32)


def read_bundle(path: str | os.PathLike) -> BundleContents:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise BundleCorruptError(f"{path}: not a bundle file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise BundleCorruptError(f"{path}: checksum mismatch (file truncated or corrupted)")
    rd = _Reader(body)
    rd.take(4)
    version, n, d_s, d_k, r, alpha = struct.unpack("<6I", rd.take(24))
    if version != VERSION:
        raise IncompatibleBundleError(f"{path}: bundle version {version}, this reader supports {VERSION}")
    targets = [rd.take(rd.u32()).decode("utf-8") for _ in range(rd.u32())]
    prov = rd.take(1)[0]
    if prov not in PROVENANCE_NAMES:
        raise BundleCorruptError(f"{path}: unknown provenance byte {prov}")
    meta = json.loads(rd.take(rd.u32()).decode("utf-8"))
    shapes = meta.get("shapes", {})
    E = rd.section((n, d_s), "E")
    W_in = rd.section((d_s, d_k), "W_in")
    lora = {}
    for name in targets:
        a_shape, b_shape = shapes[name]
        if a_shape[1] != r or b_shape[0] != r:
            raise BundleCorruptError(f"{path}: adapter {name} shapes {a_shape}/{b_shape} disagree with r={r}")
        lora[name] = (rd.section(tuple(a_shape), name + ".A"), rd.section(tuple(b_shape), name + ".B"))
    W_out = rd.section((d_k, n), "W_out")
    if rd.pos != len(body):
        raise BundleCorruptError(f"{path}: {len(body) - rd.pos} trailing bytes after the last section")
    return BundleContents(n, d_s, d_k, r, alpha, targets, PROVENANCE_NAMES[prov], meta, E, W_in, lora, W_out, crc)


def import_bundle(path: str | os.PathLike, backbone: BackboneWeights | None) -> E4SRecModel:
    """A servable model on the shared backbone; nothing is loaded unless every check passes."""
    b = read_bundle(path)
    no_llm = bool(b.metadata.get("no_llm", False))
    if not no_llm:
        if backbone is None:
            raise IncompatibleBundleError(f"{path}: bundle needs a backbone")
        if backbone.config.dim != b.d_k:
            raise IncompatibleBundleError(
                f"{path}: bundle d_k={b.d_k} does not match backbone d_k={backbone.config.dim}")
        for name, (a, bb) in b.lora.items():
            if name not in backbone.arrays or backbone.arrays[name].shape != (a.shape[0], bb.shape[1]):
                have = backbone.arrays[name].shape if name in backbone.arrays else "missing"
                raise IncompatibleBundleError(f"{path}: adapter target {name} {a.shape[0]}x{bb.shape[1]} vs backbone {have}")
    adapter = None
    if b.targets:
        short = tuple(dict.fromkeys(t.rsplit(".", 1)[-1] for t in b.targets))
        adapter = LoRAAdapter(r=b.r, alpha=b.alpha, dropout=float(b.metadata.get("lora_dropout", 0.0)), targets=short)
        for name, (a, bb) in b.lora.items():
            adapter.A[name] = Tensor(a, requires_grad=True, name=name + ".lora_A")
            adapter.B[name] = Tensor(bb, requires_grad=True, name=name + ".lora_B")
    table = ItemEmbeddingTable(b.E, b.provenance)
    template = PromptTemplate(instruction=b.metadata.get("instruction", INSTRUCTION))
    model = E4SRecModel(None if no_llm else backbone, table, adapter, b.W_in, b.W_out, template=template,
                        no_llm=no_llm, max_len=int(b.metadata.get("max_len", 50)))
    model.bundle_crc = b.crc
    return model
