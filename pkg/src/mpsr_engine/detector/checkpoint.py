"""Checkpoint directories: one raw weight blob plus JSON manifest and metadata.

    <dir>/weights.bin      tensors back to back, little-endian, C order
    <dir>/manifest.json    {"version": 1, "total_bytes": n,
                            "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}]}
    <dir>/checkpoint.json  {"version": 1, "stage", "iteration", "detector", "train", "rng"}
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from ..errors import CheckpointError
from .schemas import DetectorConfig

logger = logging.getLogger("mpsr.detector.checkpoint")

FORMAT_VERSION = 1
WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "manifest.json"
META_FILE = "checkpoint.json"

# weights.bin also carries optimizer buffers and the torch RNG state under these prefixes
OPTIM_PREFIX = "optim/"
RNG_KEY = "rng/torch"


def write_weights(tensors: dict[str, torch.Tensor], directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with (d / WEIGHTS_FILE).open("wb") as f:
        for name, t in tensors.items():
            arr = t.detach().cpu().contiguous().numpy()
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = arr.tobytes(order="C")
            f.write(raw)
            entries.append({
                "name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                "offset": offset, "nbytes": len(raw),
            })
            offset += len(raw)
    manifest = {"version": FORMAT_VERSION, "total_bytes": offset, "tensors": entries}
    (d / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise CheckpointError(f"missing {path.name} in {path.parent}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: invalid JSON: {e.msg}") from e
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: expected a JSON object")
    if doc.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')!r} (expected {FORMAT_VERSION})")
    return doc


def read_weights(directory: str | Path) -> dict[str, torch.Tensor]:
    d = Path(directory)
    manifest = _read_json(d / MANIFEST_FILE)
    blob_path = d / WEIGHTS_FILE
    if not blob_path.exists():
        raise CheckpointError(f"missing {WEIGHTS_FILE} in {d}")
    blob = blob_path.read_bytes()
    if len(blob) != manifest.get("total_bytes"):
        raise CheckpointError(f"{blob_path}: {len(blob)} bytes, manifest says {manifest.get('total_bytes')}")
    out: dict[str, torch.Tensor] = {}
    try:
        for e in manifest["tensors"]:
            start, n = int(e["offset"]), int(e["nbytes"])
            if start < 0 or start + n > len(blob):
                raise CheckpointError(f"{blob_path}: tensor {e['name']} out of bounds")
            dtype = np.dtype(e["dtype"]).newbyteorder("<")
            arr = np.frombuffer(blob, dtype=dtype, count=n // dtype.itemsize, offset=start)
            arr = arr.reshape(e["shape"]).astype(dtype.newbyteorder("="))
            out[e["name"]] = torch.from_numpy(arr.copy())
    except (KeyError, TypeError, ValueError) as ex:
        raise CheckpointError(f"{d / MANIFEST_FILE}: malformed tensor table: {ex!r}") from ex
    return out


@dataclass
class Checkpoint:
    """Everything needed to rebuild a detector and resume its training."""
    detector: DetectorConfig
    weights: dict[str, torch.Tensor]
    stage: str = "base"
    iteration: int = 0
    train: dict[str, Any] = field(default_factory=dict)
    rng: dict[str, Any] = field(default_factory=dict)
    optimizer: dict[str, torch.Tensor] = field(default_factory=dict)
    torch_rng: torch.Tensor | None = None
    path: Path | None = None


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    d = Path(directory)
    tensors = dict(ckpt.weights)
    tensors.update({OPTIM_PREFIX + k: v for k, v in ckpt.optimizer.items()})
    if ckpt.torch_rng is not None:
        tensors[RNG_KEY] = ckpt.torch_rng
    try:
        write_weights(tensors, d)
        meta = {
            "version": FORMAT_VERSION,
            "stage": ckpt.stage,
            "iteration": ckpt.iteration,
            "detector": ckpt.detector.to_dict(),
            "train": ckpt.train,
            "rng": ckpt.rng,
        }
        (d / META_FILE).write_text(json.dumps(meta, indent=1), encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write checkpoint to {d}: {e}") from e
    logger.info("checkpoint.saved", extra={"path": str(d), "stage": ckpt.stage, "iteration": ckpt.iteration})
    return d


def load_checkpoint(directory: str | Path) -> Checkpoint:
    d = Path(directory)
    if not d.is_dir():
        raise CheckpointError(f"not a checkpoint directory: {d}")
    meta = _read_json(d / META_FILE)
    tensors = read_weights(d)
    try:
        det = DetectorConfig.from_dict(meta["detector"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{d / META_FILE}: bad detector config: {e!r}") from e
    weights = {k: v for k, v in tensors.items() if not k.startswith(OPTIM_PREFIX) and k != RNG_KEY}
    optim = {k[len(OPTIM_PREFIX):]: v for k, v in tensors.items() if k.startswith(OPTIM_PREFIX)}
    return Checkpoint(
        detector=det,
        weights=weights,
        stage=str(meta.get("stage", "base")),
        iteration=int(meta.get("iteration", 0)),
        train=dict(meta.get("train", {})),
        rng=dict(meta.get("rng", {})),
        optimizer=optim,
        torch_rng=tensors.get(RNG_KEY),
        path=d,
    )


def load_model(directory: str | Path, device: str | torch.device = "cpu"):
    """Detector with checkpoint weights, in eval mode."""
    from .model import FasterRCNN

    ckpt = load_checkpoint(directory)
    model = FasterRCNN(ckpt.detector)
    try:
        model.load_state_dict(ckpt.weights, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{directory}: weights do not fit the detector config: {e}") from e
    return model.to(device).eval()
