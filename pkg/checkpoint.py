"""
checkpoint.py

Binary checkpoint format.

    magic            4 bytes   b"LWFR"
    format_version   u32 LE    1
    metadata_len     u64 LE
    metadata         UTF-8 JSON (arch, epoch, schedule, metrics, tensor manifest, ...)
    payload          little-endian float32 tensors, concatenated in manifest order

The manifest lists model parameters first, then the classifier head and the
optimizer velocity when the metadata flags them. Batch-norm running
statistics are stored in the metadata so a model-only payload is exactly
4 * count_params bytes.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from errors import CorruptCheckpoint, InvalidConfig, IoFailure
from margin_loss import ClassifierHead
from model_zoo import ArchConfig, Model, build_model

logger = logging.getLogger(__name__)

MAGIC = b"LWFR"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIQ")
PAYLOAD_DTYPE = np.dtype("<f4")

HEAD_KEY = "head.class_weights"
VELOCITY_PREFIX = "velocity."

PathLike = Union[str, os.PathLike]


@dataclass
class TrainState:
    """Everything besides the backbone weights that a resumed run needs."""

    epoch: int = 0
    schedule: Dict[str, Any] = field(default_factory=dict)
    metrics: List[Dict[str, Any]] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    head: Optional[ClassifierHead] = None
    velocity: Optional[Dict[str, np.ndarray]] = None


def _manifest_entry(name: str, arr: np.ndarray, section: str) -> Dict[str, Any]:
    return {"name": name, "shape": list(arr.shape), "dtype": "f32", "section": section}


def encode_checkpoint(model: Model, state: TrainState) -> bytes:
    tensors: List[Tuple[Dict[str, Any], np.ndarray]] = [
        (_manifest_entry(k, v, "model"), v) for k, v in model.named_params().items()
    ]
    if state.head is not None:
        tensors.append((_manifest_entry(HEAD_KEY, state.head.class_weights, "head"), state.head.class_weights))
    if state.velocity is not None:
        tensors += [
            (_manifest_entry(VELOCITY_PREFIX + k, v, "optimizer"), v) for k, v in state.velocity.items()
        ]

    meta = {
        "arch": model.arch.to_dict(),
        "epoch": state.epoch,
        "schedule": state.schedule,
        "metrics": state.metrics,
        "config": state.config,
        "buffers": {k: np.asarray(v, dtype=np.float32).tolist() for k, v in model.named_buffers().items()},
        "has_head": state.head is not None,
        "has_optimizer_state": state.velocity is not None,
        "tensors": [entry for entry, _ in tensors],
    }
    meta_bytes = json.dumps(meta, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE).tobytes() for _, arr in tensors)
    return HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_bytes)) + meta_bytes + payload


def save_checkpoint(model: Model, state: TrainState, path: PathLike) -> None:
    blob = encode_checkpoint(model, state)
    tmp = f"{os.fspath(path)}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc
    logger.debug("saved checkpoint %s (%d bytes)", path, len(blob))


def _read_header(blob: bytes) -> Tuple[Dict[str, Any], memoryview]:
    if len(blob) < HEADER.size:
        raise CorruptCheckpoint(f"file is {len(blob)} bytes, shorter than the {HEADER.size}-byte header")
    magic, version, meta_len = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptCheckpoint(f"unsupported format version {version}")
    end = HEADER.size + meta_len
    if end > len(blob):
        raise CorruptCheckpoint("metadata runs past the end of the file")
    try:
        meta = json.loads(blob[HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptCheckpoint(f"unreadable metadata: {exc}") from exc
    if not isinstance(meta, dict) or "tensors" not in meta or "arch" not in meta:
        raise CorruptCheckpoint("metadata lacks arch or tensor manifest")
    return meta, memoryview(blob)[end:]


def decode_checkpoint(blob: bytes) -> Tuple[Model, TrainState]:
    meta, payload = _read_header(blob)
    manifest = meta["tensors"]
    try:
        counts = [int(np.prod(e["shape"], dtype=np.int64)) for e in manifest]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"malformed tensor manifest: {exc}") from exc
    expected = PAYLOAD_DTYPE.itemsize * sum(counts)
    if len(payload) != expected:
        raise CorruptCheckpoint(f"payload is {len(payload)} bytes, manifest describes {expected}")

    tensors: Dict[str, np.ndarray] = {}
    offset = 0
    for entry, n in zip(manifest, counts):
        arr = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=n, offset=offset)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
        offset += n * PAYLOAD_DTYPE.itemsize

    try:
        arch = ArchConfig.from_dict(meta["arch"])
        model = build_model(arch) if arch.stage_table else Model.empty(arch)
    except InvalidConfig as exc:
        raise CorruptCheckpoint(f"stored architecture is invalid: {exc}") from exc

    params = model.named_params()
    for name, dst in params.items():
        src = tensors.get(name)
        if src is None or src.shape != dst.shape:
            raise CorruptCheckpoint(f"tensor {name} missing or mis-shaped")
        dst[...] = src
    for name, dst in model.named_buffers().items():
        src = meta.get("buffers", {}).get(name)
        if src is None or len(src) != dst.size:
            raise CorruptCheckpoint(f"buffer {name} missing or mis-shaped")
        dst[...] = np.asarray(src, dtype=np.float32).reshape(dst.shape)

    state = TrainState(
        epoch=int(meta.get("epoch", 0)),
        schedule=meta.get("schedule", {}),
        metrics=meta.get("metrics", []),
        config=meta.get("config", {}),
    )
    if meta.get("has_head"):
        if HEAD_KEY not in tensors:
            raise CorruptCheckpoint("head flagged but missing")
        state.head = ClassifierHead(tensors[HEAD_KEY])
    if meta.get("has_optimizer_state"):
        state.velocity = {
            k[len(VELOCITY_PREFIX):]: v for k, v in tensors.items() if k.startswith(VELOCITY_PREFIX)
        }
        expected = set(params) | ({HEAD_KEY} if state.head is not None else set())
        if set(state.velocity) != expected:
            raise CorruptCheckpoint("optimizer state does not match the model parameters")
    return model, state


def load_checkpoint(path: PathLike) -> Tuple[Model, TrainState]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)


def payload_size(path: PathLike) -> int:
    """Payload bytes after the header and metadata."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    _, payload = _read_header(blob)
    return len(payload)


def read_metadata(path: PathLike) -> Dict[str, Any]:
    """Header-checked metadata without materializing the model."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    meta, _ = _read_header(blob)
    return meta
