"""Checkpoint container: a JSON header followed by raw little-endian tensors.

Layout::

    SEMPARSE-CKPT\\n
    <8-byte little-endian unsigned header length>
    <UTF-8 JSON header, keys sorted>
    <tensor bytes, concatenated in header order>

Each tensor entry records name, shape, dtype, byte offset into the payload,
byte count and CRC-32.  Nothing time-dependent is written, so identical
training runs give identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelParameters
from .pipeline import Pipeline

MAGIC = b"SEMPARSE-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParameters
    pipeline: Pipeline
    config: dict
    seed: int

    @property
    def ablation(self) -> str:
        tags = []
        if not self.params.attention_enabled:
            tags.append("-attention")
        if not self.pipeline.use_arguments:
            tags.append("-argument")
        return " ".join(tags) or "full"


def lexicon_hash(pipeline_dict: dict) -> str:
    blob = json.dumps(pipeline_dict.get("lexicon"), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    pipe = ckpt.pipeline.to_dict()
    tensors, chunks, offset = [], [], 0
    for name, param in p.named_parameters().items():
        arr = np.ascontiguousarray(param.value)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str.lstrip("<>=|"),
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "mode": p.mode,
        "attention": p.attention_enabled,
        "dims": {
            "src_vocab": p.src_vocab_size,
            "tgt_vocab": p.tgt_vocab_size,
            "hidden": p.hidden_dim,
            "embed": p.embed_dim,
            "layers": p.num_layers,
        },
        "pipeline": pipe,
        "lexicon_sha256": lexicon_hash(pipe),
        "config": ckpt.config,
        "seed": ckpt.seed,
        "tensors": tensors,
    }
    hb = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(chunks)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def read_header(blob: bytes) -> tuple[dict, int]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    start = len(MAGIC)
    if len(blob) < start + 8:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", blob[start : start + 8])
    try:
        header = json.loads(blob[start + 8 : start + 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    return header, start + 8 + n


def from_bytes(blob: bytes) -> Checkpoint:
    header, base = read_header(blob)
    d = header["dims"]
    tensors = header["tensors"]
    dt = np.dtype(tensors[0]["dtype"]) if tensors else None
    params = ModelParameters(
        d["src_vocab"], d["tgt_vocab"], d["hidden"], d["embed"], d["layers"],
        header["mode"], header["attention"], dt,
    )
    named = params.named_parameters()
    if sorted(named) != sorted(t["name"] for t in tensors):
        raise CheckpointError("tensor table does not match model layout")
    for t in tensors:
        raw = blob[base + t["offset"] : base + t["offset"] + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise CheckpointError(f"truncated payload for {t['name']}")
        if zlib.crc32(raw) != t["crc32"]:
            raise CheckpointError(f"checksum mismatch for {t['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"]).newbyteorder("<")).reshape(t["shape"])
        target = named[t["name"]]
        if target.value.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {t['name']}")
        target.value[...] = arr
    pipeline = Pipeline.from_dict(header["pipeline"])
    return Checkpoint(params, pipeline, header["config"], header["seed"])


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
