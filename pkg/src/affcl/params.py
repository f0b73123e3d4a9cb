"""Flat parameter vectors with manifests.

The server aggregates models without knowing their layer semantics: a
model's trainable parameters are flattened into one float vector, and a
manifest (ordered layer name, shape, offset) says how to put them back.
Checkpoints persist the manifest as JSON followed by the raw values as
little-endian float32.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from affcl.errors import IntegrityError, FormatError, ManifestMismatchError

_MAGIC = b"PVEC1\n"


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    shape: tuple[int, ...]
    offset: int


@dataclass(frozen=True)
class ParamManifest:
    entries: tuple[ManifestEntry, ...]
    total: int

    def to_json(self) -> dict:
        return {
            "entries": [
                {"name": e.name, "shape": list(e.shape), "offset": e.offset}
                for e in self.entries
            ],
            "total": self.total,
        }

    @staticmethod
    def from_json(obj: dict) -> "ParamManifest":
        entries = tuple(
            ManifestEntry(e["name"], tuple(e["shape"]), e["offset"])
            for e in obj["entries"]
        )
        return ParamManifest(entries=entries, total=obj["total"])


def module_manifest(module: torch.nn.Module) -> ParamManifest:
    entries = []
    offset = 0
    for name, p in module.named_parameters():
        shape = tuple(p.shape)
        entries.append(ManifestEntry(name, shape, offset))
        offset += p.numel()
    return ParamManifest(entries=tuple(entries), total=offset)


def flatten_params(module: torch.nn.Module) -> tuple[np.ndarray, ParamManifest]:
    """Copy a module's parameters into a flat float64 vector."""
    manifest = module_manifest(module)
    out = np.empty(manifest.total, dtype=np.float64)
    for entry, (_, p) in zip(manifest.entries, module.named_parameters()):
        n = p.numel()
        out[entry.offset : entry.offset + n] = (
            p.detach().to(torch.float64).reshape(-1).numpy()
        )
    return out, manifest


def load_params(module: torch.nn.Module, vector: np.ndarray, manifest: ParamManifest) -> None:
    """Write a flat vector back into a module; manifests must agree."""
    own = module_manifest(module)
    if own != manifest:
        raise ManifestMismatchError(
            "parameter manifest does not match module structure"
        )
    if vector.shape != (manifest.total,):
        raise ManifestMismatchError(
            f"vector length {vector.shape} does not match manifest total {manifest.total}"
        )
    with torch.no_grad():
        for entry, (_, p) in zip(manifest.entries, module.named_parameters()):
            n = p.numel()
            chunk = np.array(vector[entry.offset : entry.offset + n])
            p.copy_(torch.as_tensor(chunk, dtype=p.dtype).reshape(entry.shape))


def save_checkpoint(path: str | Path, vector: np.ndarray, manifest: ParamManifest,
                    extra: dict | None = None) -> None:
    """Persist manifest + raw little-endian float32 values."""
    header = manifest.to_json()
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = vector.astype("<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path: str | Path) -> tuple[np.ndarray, ParamManifest, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise FormatError(f"{path}: not a parameter checkpoint")
        n = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(n).decode("utf-8"))
        manifest = ParamManifest.from_json(header)
        raw = f.read()
    vector = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if vector.shape[0] != manifest.total:
        raise IntegrityError(
            f"{path}: payload holds {vector.shape[0]} values, manifest expects {manifest.total}"
        )
    return vector, manifest, header.get("extra", {})


def quantize_roundtrip(vector: np.ndarray) -> np.ndarray:
    """Apply the same float32 rounding a checkpoint save/load would."""
    return vector.astype("<f4").astype(np.float64)
