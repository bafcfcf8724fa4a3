"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"GTRN" | u32 format version | u32 header length | JSON header
    | float32 tensor payload | u32 CRC32 of the payload

The header carries the model config, train-state scalars, the vocabulary and
a tensor index ``name -> (shape, offset)`` into the payload (offsets in
elements).
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import ConfigError, Model, ModelConfig, build_model
from .rng import restore_rng, rng_state
from .training import TrainState

MAGIC = b"GTRN"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint file (bad magic or unparsable header)."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def save_checkpoint(path: str | Path, model: Model, state: TrainState | None = None,
                    vocab=None) -> None:
    tensors: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in model.named_parameters().items()]
    header_state = None
    if state is not None:
        tensors += [(f"adam.m.{n}", a) for n, a in state.m.items()]
        tensors += [(f"adam.v.{n}", a) for n, a in state.v.items()]
        header_state = {
            "step": state.step,
            "epoch": state.epoch,
            "best_valid": state.best_valid if math.isfinite(state.best_valid) else None,
            "rng": rng_state(state.rng) if state.rng is not None else None,
        }
    index, chunks, offset = [], [], 0
    for name, arr in tensors:
        flat = np.ascontiguousarray(arr, dtype="<f4").ravel()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(flat.tobytes())
        offset += flat.size
    payload = b"".join(chunks)
    header = json.dumps({
        "model_config": model.config.to_dict(),
        "train_state": header_state,
        "vocab": list(vocab.tokens) if vocab is not None else None,
        "tensors": index,
    }, sort_keys=True).encode("utf-8")
    blob = (MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header
            + payload + struct.pack("<I", zlib.crc32(payload)))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and verify a checkpoint; return ``(header, tensors)``."""
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from None
    if len(blob) < 12:
        raise CheckpointTruncatedError(f"{path}: file too short ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = 12 + header_len
    if len(blob) < start + 4:
        raise CheckpointTruncatedError(f"{path}: header runs past end of file")
    try:
        header = json.loads(blob[12:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointFormatError(f"{path}: unreadable header ({err})") from None
    expected = 4 * sum(int(np.prod(t["shape"], dtype=np.int64)) for t in header["tensors"])
    if len(blob) - start - 4 < expected:
        raise CheckpointTruncatedError(
            f"{path}: payload has {len(blob) - start - 4} bytes, index needs {expected}")
    if len(blob) - start - 4 > expected:
        raise CheckpointFormatError(f"{path}: trailing bytes after payload")
    payload = blob[start: start + expected]
    (crc,) = struct.unpack("<I", blob[start + expected:])
    if zlib.crc32(payload) != crc:
        raise CheckpointChecksumError(f"{path}: payload CRC32 mismatch")
    flat = np.frombuffer(payload, dtype="<f4")
    tensors = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        tensors[t["name"]] = flat[t["offset"]: t["offset"] + n].reshape(t["shape"])
    return header, tensors


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None):
    """Return ``(model, train_state or None, vocab tokens or None)``.

    ``expected_config`` guards against loading weights into the wrong
    architecture; any field difference is a :class:`ConfigError`.
    """
    header, tensors = read_checkpoint(path)
    config = ModelConfig.from_dict(header["model_config"])
    if expected_config is not None and expected_config != config:
        diffs = [f"{k}: checkpoint has {v!r}, expected {getattr(expected_config, k)!r}"
                 for k, v in config.to_dict().items() if getattr(expected_config, k) != v]
        raise ConfigError(diffs)
    model = build_model(config, seed=0, dtype=np.float32)
    params = model.named_parameters()
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise ConfigError([f"checkpoint lacks tensor {n!r}" for n in missing])
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise ConfigError([f"{name}: shape {arr.shape} != model shape {p.shape}"])
        p.data[...] = arr
    state = None
    hs = header.get("train_state")
    if hs is not None:
        state = TrainState(step=hs["step"], epoch=hs["epoch"],
                           best_valid=math.inf if hs["best_valid"] is None else hs["best_valid"],
                           rng=restore_rng(hs["rng"]) if hs["rng"] else None)
        for name in params:
            if f"adam.m.{name}" in tensors:
                state.m[name] = tensors[f"adam.m.{name}"].astype(np.float32)
                state.v[name] = tensors[f"adam.v.{name}"].astype(np.float32)
    return model, state, header.get("vocab")
