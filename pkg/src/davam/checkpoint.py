"""Checkpoint container.

Layout (all integers little-endian)::

    b"DAVAMCKPT"          magic, 9 bytes
    uint32                format version
    uint64                header length in bytes
    header                UTF-8 JSON: kind, stage flags, config, dims, vocab,
                          length histogram, tensor manifest, payload CRC32
    payload               raw row-major tensors in manifest order

Manifest entries are ``{"name", "dtype", "shape", "group"}``; dtype tags are
``"f4"`` (little-endian float32, the default) and ``"f8"``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from davam.corpus import Vocab
from davam.errors import (CheckpointVersionError, CorruptCheckpointError, MissingTensorError,
                          ModelKindError)
from davam.models import Model, ModelDims

MAGIC = b"DAVAMCKPT"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}


@dataclass
class Checkpoint:
    model: Model
    vocab: Vocab
    config: dict
    length_hist: dict = field(default_factory=dict)

    @property
    def kind(self):
        return self.model.kind


def _group(model: Model, name: str) -> str:
    if name.startswith("codebook."):
        return "codebook"
    return model.registry.group_of(name)


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write atomically (temp file + rename). Returns the sha256 of the file."""
    model = ckpt.model
    arrays = model.state_arrays()
    manifest, payloads = [], []
    for name, arr in arrays.items():
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise TypeError(f"tensor {name} has unsupported dtype {arr.dtype}")
        manifest.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                         "group": _group(model, name)})
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    payload = b"".join(payloads)
    header = {
        "kind": model.kind,
        "has_prior": model.has_prior,
        "codebook_ready": model.codebook_ready,
        "codebook": None if model.book is None else {"decay": model.book.decay, "eps": model.book.eps},
        "dims": model.dims.to_dict(),
        "config": ckpt.config,
        "vocab": ckpt.vocab.itos,
        "length_hist": {str(k): v for k, v in ckpt.length_hist.items()},
        "tensors": manifest,
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + payload

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path, expect_kind=None) -> Checkpoint:
    """Inverse of :func:`save_checkpoint`; every tensor is restored bit-exactly.

    ``expect_kind`` (a kind or tuple of kinds) rejects other model kinds with
    ``ModelKindError``.
    """
    blob = Path(path).read_bytes()
    fixed = len(MAGIC) + 12
    if len(blob) < fixed or blob[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic or too short)")
    version, head_len = struct.unpack("<IQ", blob[len(MAGIC):fixed])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    try:
        header = json.loads(blob[fixed:fixed + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    payload = blob[fixed + head_len:]
    if len(payload) != header.get("payload_bytes"):
        raise CorruptCheckpointError(
            f"{path}: payload has {len(payload)} bytes, header promises {header.get('payload_bytes')}")
    if zlib.crc32(payload) != header.get("crc32"):
        raise CorruptCheckpointError(f"{path}: payload checksum mismatch")

    kind = header["kind"]
    if expect_kind is not None:
        allowed = (expect_kind,) if isinstance(expect_kind, str) else tuple(expect_kind)
        if kind not in allowed:
            raise ModelKindError(f"{path}: checkpoint holds a {kind} model, need {'/'.join(allowed)}")

    arrays, offset = {}, 0
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        n = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
        arrays[entry["name"]] = np.frombuffer(payload[offset:offset + n], dtype=dt).reshape(entry["shape"]).copy()
        offset += n

    dtypes = {a.dtype for a in arrays.values()}
    model = Model(kind, ModelDims(**header["dims"]), seed=0,
                  dtype=dtypes.pop() if len(dtypes) == 1 else np.float32)
    expected = set(model.state_arrays())
    missing = sorted(expected - set(arrays))
    if missing:
        raise MissingTensorError(f"{path}: missing tensors {missing[:5]}")
    model.load_arrays(arrays)
    model.has_prior = header["has_prior"]
    model.codebook_ready = header["codebook_ready"]
    if model.book is not None and header.get("codebook"):
        model.book.decay = header["codebook"]["decay"]
        model.book.eps = header["codebook"]["eps"]
    hist = {int(k): v for k, v in header.get("length_hist", {}).items()}
    return Checkpoint(model, Vocab(header["vocab"][4:]), header["config"], hist)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
