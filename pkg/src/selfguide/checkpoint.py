"""Named-tensor checkpoint archives.

An archive is a directory holding `manifest.json` plus `tensors.bin`. The
manifest records a format version, a config snapshot, the training step and
one index entry per tensor (name, dtype f32, shape, byte offset, sha256).
Tensors are stored little-endian float32, concatenated in sorted-name order,
so save -> load -> save round-trips byte-identically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Union

import numpy as np
import torch

from .errors import ArchiveError

FORMAT_VERSION = 1

TensorLike = Union[np.ndarray, torch.Tensor]


def _to_f32_bytes(t: TensorLike) -> tuple[bytes, tuple[int, ...]]:
    if isinstance(t, torch.Tensor):
        arr = t.detach().cpu().numpy()
    else:
        arr = np.asarray(t)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return arr.tobytes(), tuple(arr.shape)


def hash_tensors(tensors: Mapping[str, TensorLike]) -> str:
    """Cryptographic hash of a named tensor set (order-independent by name)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        raw, shape = _to_f32_bytes(tensors[name])
        h.update(name.encode())
        h.update(repr(shape).encode())
        h.update(raw)
    return h.hexdigest()


@dataclass
class Archive:
    path: Path
    manifest: dict
    tensors: dict[str, np.ndarray]

    @property
    def tensor_names(self) -> list[str]:
        return list(self.tensors)

    def get(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise ArchiveError(f"archive {self.path} has no tensor named '{name}'")
        return self.tensors[name]

    def torch(self, name: str) -> torch.Tensor:
        return torch.from_numpy(self.get(name).copy())

    @property
    def step(self) -> int:
        return int(self.manifest["step"])


def save_archive(
    path: Union[str, Path],
    tensors: Mapping[str, TensorLike],
    *,
    kind: str,
    step: int = 0,
    config: Mapping | None = None,
    extra: Mapping | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    blob = bytearray()
    for name in sorted(tensors):
        raw, shape = _to_f32_bytes(tensors[name])
        index.append(
            {
                "name": name,
                "dtype": "f32",
                "shape": list(shape),
                "offset": len(blob),
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        blob.extend(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "step": int(step),
        "config": dict(config or {}),
        "extra": dict(extra or {}),
        "tensors": index,
    }
    (path / "tensors.bin").write_bytes(bytes(blob))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_archive(path: Union[str, Path]) -> Archive:
    path = Path(path)
    manifest_path = path / "manifest.json"
    bin_path = path / "tensors.bin"
    if not manifest_path.is_file() or not bin_path.is_file():
        raise ArchiveError(f"no checkpoint archive at {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(
            f"archive {path} has format_version {manifest.get('format_version')}, "
            f"expected {FORMAT_VERSION}"
        )
    blob = bin_path.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ArchiveError(f"archive {path}: tensor '{entry['name']}' is truncated")
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ArchiveError(f"archive {path}: checksum mismatch for tensor '{entry['name']}'")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
    return Archive(path=path, manifest=manifest, tensors=tensors)


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    """state_dict under a name prefix, ready for save_archive."""
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module_tensors(module: torch.nn.Module, archive: Archive, prefix: str) -> None:
    """Load `prefix`-named tensors into the module; every key must resolve."""
    state = module.state_dict()
    loaded = {}
    for key, current in state.items():
        name = prefix + key
        if name not in archive.tensors:
            raise ArchiveError(f"archive {archive.path} is missing tensor '{name}'")
        arr = archive.tensors[name]
        if tuple(arr.shape) != tuple(current.shape):
            raise ArchiveError(
                f"tensor '{name}' has shape {tuple(arr.shape)}, expected {tuple(current.shape)}"
            )
        loaded[key] = torch.from_numpy(arr.copy()).to(current.dtype)
    module.load_state_dict(loaded)
