"""Self-describing checkpoint files.

Layout: MAGIC | u32 version | u64 header length | JSON header | float32 little-endian tensor
data in header order | 32-byte sha256 of everything before it.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dit.model import ModelConfig
from .generator import Generator
from .textenc import Vocab

MAGIC = b"MDRMCKPT"
FORMAT_VERSION = 1
PROVENANCE = ("pretrain", "ct", "sft", "rlhf", "distilled_cfg", "distilled_tscd", "quantized", "refiner")
_DIGEST = 32


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointHeader:
    config: dict
    provenance: str
    seed: int
    vocab: list[str]
    parent: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCE:
            raise CheckpointError(f"unknown provenance {self.provenance!r}")


def _header_bytes(header: CheckpointHeader, tensors: list[tuple[str, tuple[int, ...]]]) -> bytes:
    doc = {"format_version": FORMAT_VERSION, "config": header.config, "provenance": header.provenance,
           "parent": header.parent, "seed": int(header.seed), "vocab": header.vocab, "extra": header.extra,
           "tensors": [{"name": n, "shape": list(s)} for n, s in tensors]}
    return json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def encode(state: dict[str, torch.Tensor], header: CheckpointHeader) -> bytes:
    names = sorted(state)
    arrays = [state[n].detach().cpu().to(torch.float32).numpy() for n in names]
    head = _header_bytes(header, [(n, tuple(a.shape)) for n, a in zip(names, arrays)])
    body = b"".join([MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(head)), head]
                    + [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays])
    return body + hashlib.sha256(body).digest()


def decode(data: bytes) -> tuple[CheckpointHeader, dict[str, torch.Tensor]]:
    if len(data) < len(MAGIC) + 12 + _DIGEST or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch")
    version, n = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    pos = len(MAGIC) + 12
    doc = json.loads(body[pos:pos + n].decode("utf-8"))
    pos += n
    state = {}
    for t in doc["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(np.float32))
        pos += 4 * count
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor data")
    header = CheckpointHeader(doc["config"], doc["provenance"], doc["seed"], doc["vocab"], doc["parent"],
                              doc.get("extra", {}))
    return header, state


def file_hash(path: str | Path) -> str:
    """Hex digest stored in the file trailer; identifies a checkpoint as a parent."""
    with open(path, "rb") as f:
        f.seek(-_DIGEST, os.SEEK_END)
        return f.read(_DIGEST).hex()


def save_checkpoint(model: Generator, path: str | Path, provenance: str, seed: int, parent: str | None = None,
                    extra: dict | None = None) -> str:
    """Atomically write ``model``; returns the checkpoint hash."""
    header = CheckpointHeader(model.cfg.to_dict(), provenance, seed, list(model.vocab.tokens), parent, extra or {})
    data = encode(model.state_dict(), header)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return data[-_DIGEST:].hex()


def load_checkpoint(path: str | Path, dtype=torch.float32) -> tuple[Generator, CheckpointHeader]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, state = decode(path.read_bytes())
    cfg = ModelConfig.from_dict(header.config)
    model = Generator(cfg, Vocab(header.vocab))
    want = model.state_dict()
    if set(want) != set(state):
        missing, extra = sorted(set(want) - set(state)), sorted(set(state) - set(want))
        raise CheckpointError(f"parameter names do not match the config (missing {missing[:3]}, extra {extra[:3]})")
    for name, t in state.items():
        if tuple(want[name].shape) != tuple(t.shape):
            raise CheckpointError(f"{name}: shape {tuple(t.shape)} != {tuple(want[name].shape)}")
    model.load_state_dict({n: t.to(want[n].dtype) for n, t in state.items()})
    return model.to(dtype).eval(), header
