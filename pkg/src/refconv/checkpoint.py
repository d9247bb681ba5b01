"""Checkpoints: a manifest plus one raw little-endian float32 blob per tensor.

The manifest is JSON with stable key ordering; every entry records the blob's
shape, byte length and sha256, so a reload is byte-exact and verifiable. The
stage tag tracks the pipeline position: baseline -> refconv -> merged.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STAGES = ("baseline", "refconv", "merged")

MANIFEST_NAME = "manifest.json"
BLOB_DIR = "blobs"
BLOB_DTYPE = "<f4"  # interchange format is 32-bit regardless of training precision


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    """In-memory parameter set with the metadata needed to rebuild its model."""

    model_id: str
    stage: str
    precision: str  # precision the producing run used
    seed: int
    params: dict[str, dict[str, np.ndarray]]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"stage must be one of {STAGES}, got {self.stage!r}")

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            model_id=self.model_id, stage=self.stage, precision=self.precision,
            seed=self.seed, meta=json.loads(json.dumps(self.meta)),
            params={n: {r: a.copy() for r, a in roles.items()}
                    for n, roles in self.params.items()})

    def param_count(self) -> int:
        return sum(a.size for roles in self.params.values() for a in roles.values())


def _blob_name(layer: str, role: str) -> str:
    return f"{layer}__{role}.bin"


def save_checkpoint(ckpt: Checkpoint, out_dir) -> Path:
    """Write manifest.json + blobs/. Blobs are always little-endian float32."""
    out = Path(out_dir)
    blob_dir = out / BLOB_DIR
    blob_dir.mkdir(parents=True, exist_ok=True)
    layers = []
    for name in ckpt.params:
        entry = {"name": name, "tensors": []}
        for role, arr in ckpt.params[name].items():
            raw = np.ascontiguousarray(arr, dtype=BLOB_DTYPE).tobytes()
            fname = _blob_name(name, role)
            (blob_dir / fname).write_bytes(raw)
            entry["tensors"].append({
                "role": role,
                "shape": list(arr.shape),
                "bytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
                "file": fname,
            })
        layers.append(entry)
    manifest = {
        "model_id": ckpt.model_id,
        "stage": ckpt.stage,
        "precision": ckpt.precision,
        "seed": ckpt.seed,
        "blob_dtype": BLOB_DTYPE,
        "meta": ckpt.meta,
        "layers": layers,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_checkpoint(in_dir) -> Checkpoint:
    """Reload and verify: byte length and sha256 of every blob must match."""
    src = Path(in_dir)
    mpath = src / MANIFEST_NAME
    if not mpath.is_file():
        raise CheckpointError(f"no {MANIFEST_NAME} in {src}")
    manifest = json.loads(mpath.read_text())
    params: dict[str, dict[str, np.ndarray]] = {}
    for entry in manifest["layers"]:
        roles = {}
        for t in entry["tensors"]:
            bpath = src / BLOB_DIR / t["file"]
            if not bpath.is_file():
                raise CheckpointError(f"missing blob {t['file']}")
            raw = bpath.read_bytes()
            if len(raw) != t["bytes"]:
                raise CheckpointError(
                    f"blob {t['file']}: {len(raw)} bytes, manifest says {t['bytes']}")
            if hashlib.sha256(raw).hexdigest() != t["sha256"]:
                raise CheckpointError(f"blob {t['file']}: sha256 mismatch")
            roles[t["role"]] = np.frombuffer(raw, dtype=BLOB_DTYPE).reshape(t["shape"]).copy()
        params[entry["name"]] = roles
    return Checkpoint(
        model_id=manifest["model_id"], stage=manifest["stage"],
        precision=manifest["precision"], seed=manifest["seed"],
        params=params, meta=manifest.get("meta", {}))
