"""Binary model checkpoints.

Layout (all integers little-endian u32)::

    b"AMCK" | version | meta_len | meta (UTF-8 JSON ModelConfig)
    then for each tensor in PARAM_NAMES order:
        ndim | dim_0 ... dim_{ndim-1} | f64 LE row-major data
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, MissingFileError
from .network import PARAM_NAMES, ModelConfig, ModelParams

MAGIC = b"AMCK"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


def _config_meta(config: ModelConfig) -> bytes:
    meta = {
        "feature_dim": config.feature_dim,
        "hidden_width": config.hidden_width,
        "dropout_rate": config.dropout_rate,
        "annotator_ids": list(config.annotator_ids),
        "params": list(PARAM_NAMES),
    }
    return json.dumps(meta, sort_keys=True).encode("utf-8")


def dumps(params: ModelParams) -> bytes:
    meta = _config_meta(params.config)
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(meta)), meta]
    for name in PARAM_NAMES:
        arr = np.asarray(params.tensors[name], dtype="<f8", order="C")
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(d) for d in arr.shape)
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def loads(raw: bytes) -> ModelParams:
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointFormatError("not an AMCK checkpoint")
    (version,) = _U32.unpack(take(4))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = _U32.unpack(take(4))
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    if tuple(meta["params"]) != PARAM_NAMES:
        raise CheckpointFormatError("tensor list does not match this model layout")
    config = ModelConfig(
        feature_dim=meta["feature_dim"],
        annotator_ids=tuple(meta["annotator_ids"]),
        hidden_width=meta["hidden_width"],
        dropout_rate=meta["dropout_rate"],
    )
    expected = config.shapes()
    tensors = {}
    for name in PARAM_NAMES:
        (ndim,) = _U32.unpack(take(4))
        shape = tuple(_U32.unpack(take(4))[0] for _ in range(ndim))
        if shape != tuple(expected[name]):
            raise CheckpointFormatError(f"{name}: shape {shape} != expected {expected[name]}")
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointFormatError("trailing bytes after last tensor")
    return ModelParams(config, tensors)


def save_checkpoint(params: ModelParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params))
    return path


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())


def params_digest(params: ModelParams) -> str:
    return hashlib.sha256(dumps(params)).hexdigest()
