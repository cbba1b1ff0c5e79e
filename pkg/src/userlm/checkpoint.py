"""Versioned binary checkpoint container.

Layout: 6-byte magic, u16 format version, u64 JSON-header length, the
UTF-8 JSON header (model config, vocabulary tokens, metadata, and a tensor
directory of name/dtype/shape), then the raw tensor payloads in directory
order, always little-endian. Everything is deterministic — saving a loaded
checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .corpus import Vocabulary
from .model import ModelConfig, TransformerParams
from .recurrence import RecurrenceParams

MAGIC = b"ULMCKP"
VERSION = 1
_HEADER_STRUCT = struct.Struct("<6sHQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: TransformerParams
    rec: RecurrenceParams
    vocab: Vocabulary
    opt_arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def named(self) -> list[tuple[str, Tensor]]:
        return self.params.named() + self.rec.named()


def _tensor_payload(arr: np.ndarray) -> tuple[str, bytes]:
    if arr.dtype == np.float64:
        dt = "<f8"
    elif arr.dtype == np.int64:
        dt = "<i8"
    else:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return dt, np.ascontiguousarray(arr, dtype=dt).tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = []
    payloads = []
    items = [(name, t.data) for name, t in ckpt.named()]
    items += sorted(ckpt.opt_arrays.items())
    for name, arr in items:
        dt, raw = _tensor_payload(np.asarray(arr))
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape)})
        payloads.append(raw)
    header = {
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.tokens,
        "meta": ckpt.meta,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER_STRUCT.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER_STRUCT.size)
        if len(head) != _HEADER_STRUCT.size:
            raise CheckpointError(f"{path}: truncated header")
        magic, version, hlen = _HEADER_STRUCT.unpack(head)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version} (expected {VERSION})"
            )
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(n * 8)
            if len(raw) != n * 8:
                raise CheckpointError(f"{path}: truncated tensor {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(shape).copy()

    cfg = ModelConfig.from_dict(header["config"])
    cfg.validate()
    vocab = Vocabulary(header["vocab"])
    if len(vocab) != cfg.vocab_size:
        raise CheckpointError(
            f"{path}: vocabulary size {len(vocab)} != config vocab_size {cfg.vocab_size}"
        )
    params = TransformerParams.init(cfg, np.random.default_rng(0))
    rec = RecurrenceParams.init(cfg, params, np.random.default_rng(0))
    ckpt = Checkpoint(config=cfg, params=params, rec=rec, vocab=vocab,
                      meta=header["meta"])
    for name, t in ckpt.named():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if arrays[name].shape != t.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} shape {arrays[name].shape} "
                f"!= expected {t.data.shape}"
            )
        t.data = arrays[name].astype(np.float64)
        del arrays[name]
    ckpt.opt_arrays = arrays  # anything left over (optimizer moments etc.)
    return ckpt
