"""Binary checkpoint container.

Layout: ``b"CANCKPT1"``, an 8-byte little-endian manifest length, the UTF-8
JSON manifest, then raw little-endian float64 blobs at the offsets listed in
the manifest's tensor directory (offsets relative to the blob section).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import ParseError

MAGIC = b"CANCKPT1"


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.manifest["kind"]

    def to_bytes(self) -> bytes:
        directory = []
        blobs = []
        offset = 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(np.asarray(self.tensors[name], dtype="<f8"))
            directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
            raw = arr.tobytes()
            blobs.append(raw)
            offset += len(raw)
        manifest = dict(self.manifest)
        manifest["tensors"] = directory
        manifest.setdefault("library_version", __version__)
        head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise ParseError("not a checkpoint file (bad magic)")
        (length,) = struct.unpack("<Q", data[8:16])
        manifest = json.loads(data[16:16 + length].decode("utf-8"))
        base = 16 + length
        tensors = {}
        for entry in manifest.pop("tensors"):
            count = int(np.prod(entry["shape"], dtype=np.int64))
            start = base + entry["offset"]
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=start)
            tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        return cls(manifest, tensors)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        p = Path(path)
        if not p.exists():
            raise ParseError(f"no such checkpoint: {p}")
        return cls.from_bytes(p.read_bytes())


def pack_store(prefix: str, store) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    tensors = {f"{prefix}/{k}": v.detach().numpy().copy() for k, v in store.tensors().items()}
    return tensors, store.steps()


def unpack_store(prefix: str, ckpt: Checkpoint, store, steps: dict[str, int]) -> None:
    p = prefix + "/"
    tensors = {k[len(p):]: torch.from_numpy(v.copy()) for k, v in ckpt.tensors.items() if k.startswith(p)}
    store.load_tensors(tensors, steps)
