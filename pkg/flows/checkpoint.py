"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"CINN1" | u32 version | u32 header length | header JSON | array blocks | checksum

The header is canonical JSON holding the model spec, free-form metadata and
the name, dtype and shape of every array block in file order. The trailing
checksum is the first 8 bytes of the SHA-256 of everything before it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Final

import numpy as np
import numpy.typing as npt

from autodiff.rng import RngStream
from flows.layers import PermutationLayer
from flows.model import FlowModel, ModelSpec, build_model

MAGIC: Final[bytes] = b"CINN1"
VERSION: Final[int] = 1
CHECKSUM_BYTES: Final[int] = 8
FLOW_PREFIX: Final[str] = "flow."
_DTYPES: Final[dict[str, str]] = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


class CheckpointError(ValueError):
    """Raised for unreadable, corrupted or mismatching checkpoints."""


@dataclass
class Checkpoint:
    spec: dict[str, Any]
    arrays: dict[str, npt.NDArray[Any]]
    metadata: dict[str, Any] = field(default_factory=dict)

    def model_spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.spec)

    def section(self, prefix: str) -> dict[str, npt.NDArray[Any]]:
        """Arrays under ``prefix`` with the prefix stripped."""
        return {name[len(prefix):]: value for name, value in self.arrays.items() if name.startswith(prefix)}


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def _encode_array(array: npt.NDArray[Any], float_dtype: str) -> tuple[str, bytes]:
    if np.issubdtype(array.dtype, np.integer):
        kind = "int64"
    else:
        kind = float_dtype
    data = np.ascontiguousarray(array, dtype=np.dtype(_DTYPES[kind]))
    return kind, data.tobytes()


def save_checkpoint(
    path: str | Path,
    checkpoint: Checkpoint,
    *,
    float_dtype: str = "float64",
) -> Path:
    """Write ``checkpoint`` atomically. ``float_dtype="float32"`` produces a smaller export copy."""
    if float_dtype not in ("float64", "float32"):
        raise CheckpointError(f"float_dtype must be float64 or float32, got {float_dtype!r}")
    entries = []
    blocks = []
    for name in sorted(checkpoint.arrays):
        array = np.asarray(checkpoint.arrays[name])
        kind, raw = _encode_array(array, float_dtype)
        entries.append({"name": name, "dtype": kind, "shape": list(array.shape)})
        blocks.append(raw)
    header = canonical_json({"spec": checkpoint.spec, "metadata": checkpoint.metadata, "arrays": entries}).encode("utf-8")
    body = b"".join([MAGIC, struct.pack("<II", VERSION, len(header)), header, *blocks])
    digest = hashlib.sha256(body).digest()[:CHECKSUM_BYTES]

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_bytes(body + digest)
    os.replace(tmp, target)
    logging.info("checkpoint saved path=%s arrays=%d bytes=%d", target, len(entries), len(body) + CHECKSUM_BYTES)
    return target


def load_checkpoint(path: str | Path) -> Checkpoint:
    source = Path(path)
    try:
        blob = source.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {source}: {exc}") from exc
    prefix_len = len(MAGIC) + 8
    if len(blob) < prefix_len + CHECKSUM_BYTES or not blob.startswith(MAGIC):
        raise CheckpointError(f"{source} is not a checkpoint (bad magic)")
    body, digest = blob[:-CHECKSUM_BYTES], blob[-CHECKSUM_BYTES:]
    if hashlib.sha256(body).digest()[:CHECKSUM_BYTES] != digest:
        raise CheckpointError(f"{source}: checksum mismatch")
    version, header_len = struct.unpack("<II", body[len(MAGIC):prefix_len])
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(body[prefix_len : prefix_len + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header: {exc}") from exc

    arrays: dict[str, npt.NDArray[Any]] = {}
    offset = prefix_len + header_len
    for entry in header["arrays"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(body):
            raise CheckpointError(f"{source}: array {entry['name']} runs past the end of the file")
        raw = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        target = np.int64 if entry["dtype"] == "int64" else np.float64
        arrays[entry["name"]] = raw.reshape(shape).astype(target)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{source}: {len(body) - offset} trailing bytes after the last array")
    return Checkpoint(spec=header["spec"], arrays=arrays, metadata=header.get("metadata", {}))


# ---------------------------------------------------------------------------
# Flow model state
# ---------------------------------------------------------------------------


def flow_arrays(model: FlowModel, prefix: str = FLOW_PREFIX) -> dict[str, npt.NDArray[Any]]:
    arrays: dict[str, npt.NDArray[Any]] = {
        f"{prefix}{name}": tensor.data.copy() for name, tensor in model.parameters().items()
    }
    for name, value in model.buffers().items():
        arrays[f"{prefix}{name}"] = np.array(value, copy=True)
    return arrays


def load_flow_arrays(model: FlowModel, arrays: dict[str, npt.NDArray[Any]]) -> None:
    """Overwrite parameters, permutations and normalization of ``model`` in place (unprefixed names)."""
    expected = set(model.parameters()) | set(model.buffers())
    missing = sorted(expected - set(arrays))
    unexpected = sorted(set(arrays) - expected)
    if missing or unexpected:
        raise CheckpointError(f"flow state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    for name, tensor in model.parameters().items():
        if arrays[name].shape != tensor.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {arrays[name].shape} != model {tensor.shape}")
        tensor.data = np.array(arrays[name], dtype=np.float64)
    perm_index = 0
    for index, layer in enumerate(model.layers):
        if isinstance(layer, PermutationLayer):
            model.layers[index] = PermutationLayer.from_perm(arrays[f"perm{perm_index}"])
            perm_index += 1
    model.set_normalization(arrays["norm.shift"], arrays["norm.scale"])


def restore_model(checkpoint: Checkpoint, prefix: str = FLOW_PREFIX) -> FlowModel:
    spec = checkpoint.model_spec()
    model = build_model(spec, RngStream(0))
    load_flow_arrays(model, checkpoint.section(prefix))
    return model


def model_checkpoint(model: FlowModel, metadata: dict[str, Any] | None = None) -> Checkpoint:
    return Checkpoint(spec=model.spec.to_dict(), arrays=flow_arrays(model), metadata=dict(metadata or {}))
