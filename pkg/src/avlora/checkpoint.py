"""Shared checkpoint format for every trained artifact.

A checkpoint is a directory holding `manifest.json` and `tensors.bin`.
The manifest lists {name, shape, dtype, role, byte_offset, sha256} per
tensor (in serialization order) plus free-form metadata; tensors.bin is
the concatenation of row-major little-endian float32 blobs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
FORMAT_VERSION = 1


def tensor_sha256(data: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(data, dtype="<f4").tobytes()).hexdigest()


def hash_tensors(tensors: dict[str, Tensor | np.ndarray],
                 role: str | None = None) -> dict[str, str]:
    """Content hash per tensor name, optionally restricted to one role."""
    out = {}
    for name, t in tensors.items():
        if role is not None and getattr(t, "role", None) != role:
            continue
        data = t.data if isinstance(t, Tensor) else t
        out[name] = tensor_sha256(data)
    return out


def serialized_size(tensors: dict[str, Tensor]) -> int:
    """Byte size of the tensors.bin blob for this tensor table."""
    return sum(4 * t.data.size for t in tensors.values())


def save_checkpoint(out_dir: str | Path, tensors: dict[str, Tensor],
                    metadata: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(out / BLOB_NAME, "wb") as blob:
        for name, t in tensors.items():
            data = np.ascontiguousarray(t.data, dtype="<f4")
            raw = data.tobytes()
            entries.append({
                "name": name,
                "shape": list(data.shape),
                "dtype": "f32",
                "role": t.role or "base",
                "byte_offset": offset,
                "sha256": hashlib.sha256(raw).hexdigest(),
            })
            blob.write(raw)
            offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "metadata": metadata or {},
        "tensors": entries,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))


def load_checkpoint(in_dir: str | Path) -> tuple[dict[str, Tensor], dict]:
    """Load a checkpoint; verifies per-tensor sha256 on the way in."""
    root = Path(in_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    raw = (root / BLOB_NAME).read_bytes()
    tensors: dict[str, Tensor] = {}
    for e in manifest["tensors"]:
        n_bytes = 4 * int(np.prod(e["shape"])) if e["shape"] else 4
        chunk = raw[e["byte_offset"]:e["byte_offset"] + n_bytes]
        if hashlib.sha256(chunk).hexdigest() != e["sha256"]:
            raise ValueError(f"checksum mismatch for tensor {e['name']!r}")
        data = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).copy()
        tensors[e["name"]] = Tensor(data, requires_grad=True,
                                    name=e["name"], role=e["role"])
    return tensors, manifest.get("metadata", {})
