"""Checkpoint persistence.

A checkpoint directory holds `manifest.json` plus binary blobs of
little-endian float32 values.  The manifest lists each tensor's name,
shape, and byte offset into its blob, in write order, so round-trips are
bit-exact.  Trainer checkpoints add optimizer state in `optimizer.bin`.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError

WEIGHTS_FILE = "weights.bin"
OPTIMIZER_FILE = "optimizer.bin"
MANIFEST_FILE = "manifest.json"


def _pack(arrays: Dict[str, np.ndarray]) -> Tuple[list, bytes]:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def _unpack(entries: list, blob: bytes) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        out[entry["name"]] = arr.astype(np.float32)
    return out


def save_checkpoint(
    directory,
    weights: Dict[str, np.ndarray],
    epoch: int,
    eval_loss: Optional[float],
    optimizer_state: Optional[Dict] = None,
) -> Path:
    """Write manifest.json + weights.bin (+ optimizer.bin) under `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    weight_entries, weight_blob = _pack(weights)
    manifest = {
        "epoch": epoch,
        "eval_loss": eval_loss,
        "weights": weight_entries,
    }
    (directory / WEIGHTS_FILE).write_bytes(weight_blob)
    if optimizer_state is not None:
        opt_entries, opt_blob = _pack(optimizer_state["tensors"])
        manifest["optimizer"] = {"step": optimizer_state["step"], "tensors": opt_entries}
        (directory / OPTIMIZER_FILE).write_bytes(opt_blob)
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1))
    return directory


def load_checkpoint(directory) -> Dict:
    """Read a checkpoint back; inverse of save_checkpoint."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    if not manifest_path.exists():
        raise ConfigError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    weights = _unpack(manifest["weights"], (directory / WEIGHTS_FILE).read_bytes())
    result = {
        "epoch": manifest["epoch"],
        "eval_loss": manifest["eval_loss"],
        "weights": weights,
    }
    if "optimizer" in manifest:
        blob = (directory / OPTIMIZER_FILE).read_bytes()
        result["optimizer"] = {
            "step": manifest["optimizer"]["step"],
            "tensors": _unpack(manifest["optimizer"]["tensors"], blob),
        }
    return result
