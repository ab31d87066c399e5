"""Binary checkpoint format.

Layout, all integers little-endian::

    b"GALR"  | u32 version | u64 header length | header (UTF-8 JSON) | payload

The header holds the hyperparameters, the parameter dtype and a tensor
directory ``[{name, dtype, shape, offset, length}]``; offsets are relative to
the payload start, contiguous and in directory order.  Tensors are stored
row-major in little-endian IEEE floats of the model dtype.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    CorruptHeaderError,
    DirectoryMismatchError,
    PayloadLengthError,
    UnsupportedVersionError,
)
from .separator import HyperParams, SeparatorModel

MAGIC = b"GALR"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _dtype_tag(dtype) -> str:
    return "f32" if np.dtype(dtype) == np.float32 else "f64"


def to_bytes(model: SeparatorModel) -> bytes:
    tag = _dtype_tag(model.dtype)
    directory, chunks, offset = [], [], 0
    for name, t in model.params.items():
        buf = np.ascontiguousarray(t.data, dtype=_DTYPES[tag]).tobytes()
        directory.append({"name": name, "dtype": tag, "shape": list(t.shape), "offset": offset, "length": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = {"hyperparams": model.hp.to_dict(), "dtype": tag, "seed": int(model.seed), "tensors": directory}
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(text)) + text + b"".join(chunks)


def save_checkpoint(model: SeparatorModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def _parse_header(blob: bytes) -> tuple[dict, memoryview]:
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(blob[:4])!r}, expected {MAGIC!r}")
    if len(blob) < _PREFIX.size:
        raise CorruptHeaderError("file ends inside the fixed-size prefix")
    _, version, hlen = _PREFIX.unpack_from(blob)
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    end = _PREFIX.size + hlen
    if end > len(blob):
        raise CorruptHeaderError(f"header length {hlen} runs past the end of the file")
    try:
        header = json.loads(blob[_PREFIX.size : end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or not {"hyperparams", "dtype", "tensors"} <= set(header):
        raise CorruptHeaderError("header lacks hyperparams/dtype/tensors")
    return header, memoryview(blob)[end:]


def from_bytes(blob: bytes) -> SeparatorModel:
    header, payload = _parse_header(blob)
    try:
        hp = HyperParams.from_dict(header["hyperparams"])
    except (ConfigError, TypeError) as exc:
        raise CorruptHeaderError(f"stored hyperparameters are invalid: {exc}") from None
    tag = header["dtype"]
    if tag not in _DTYPES:
        raise CorruptHeaderError(f"unknown dtype {tag!r}")
    model = SeparatorModel(hp, seed=int(header.get("seed", 0)), dtype=tag)
    directory = header["tensors"]
    expected = model.params.names()
    names = [entry.get("name") for entry in directory] if isinstance(directory, list) else None
    if names != expected:
        raise DirectoryMismatchError(f"tensor directory lists {len(names or [])} entries that do not match "
                                     f"the {len(expected)} parameters of this configuration")
    offset = 0
    arrays = {}
    for entry in directory:
        name, shape = entry["name"], tuple(entry.get("shape", ()))
        want = model.params[name].shape
        if shape != want:
            raise DirectoryMismatchError(f"{name}: directory shape {shape} != model shape {want}")
        if entry.get("dtype") != tag:
            raise DirectoryMismatchError(f"{name}: dtype {entry.get('dtype')!r} differs from checkpoint dtype {tag!r}")
        length = math.prod(shape) * _DTYPES[tag].itemsize
        if entry.get("offset") != offset or entry.get("length") != length:
            raise DirectoryMismatchError(f"{name}: offset/length {entry.get('offset')}/{entry.get('length')} "
                                         f"!= expected {offset}/{length}")
        offset += length
    if len(payload) != offset:
        raise PayloadLengthError(f"payload length mismatch: directory needs {offset} bytes, file has {len(payload)}")
    for entry in directory:
        start = entry["offset"]
        raw = payload[start : start + entry["length"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=_DTYPES[tag]).reshape(entry["shape"])
    model.params.load_state_dict(arrays)
    return model


def load_checkpoint(path) -> SeparatorModel:
    return from_bytes(Path(path).read_bytes())
