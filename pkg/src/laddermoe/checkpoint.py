"""Versioned binary checkpoints.

Layout: 4-byte magic, little-endian uint32 format version, little-endian
uint64 header length, a canonical (sorted-keys) JSON header, then the raw
little-endian float64 bytes of every tensor in header order. Writing the
same checkpoint twice produces identical bytes, and a load/save round trip
is the identity on the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import FormatError

MAGIC = b"LMOE"
FORMAT_VERSION = 1

PHASES = ("pretrain", "plm", "osf")


@dataclass
class Checkpoint:
    phase: str
    epoch: int
    enc_cfg: EncoderConfig
    dec_cfg: DecoderConfig
    train_cfg: "TrainConfig"  # noqa: F821 (import cycle; only asdict-ed here)
    params: dict[str, np.ndarray]
    rng_state: dict | None = None
    optim_step: int = 0
    optim_m: dict[str, np.ndarray] = field(default_factory=dict)
    optim_v: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _config_blob(ckpt: Checkpoint) -> dict:
    return {
        "encoder": dataclasses.asdict(ckpt.enc_cfg),
        "decoder": dataclasses.asdict(ckpt.dec_cfg),
        "train": dataclasses.asdict(ckpt.train_cfg),
    }


def config_digest(configs: dict) -> str:
    blob = json.dumps(configs, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _tensor_sections(ckpt: Checkpoint):
    for section, table in (("param", ckpt.params), ("adam_m", ckpt.optim_m), ("adam_v", ckpt.optim_v)):
        for name in sorted(table):
            yield section, name, np.asarray(table[name], dtype=np.float64)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    if ckpt.phase not in PHASES:
        raise FormatError(f"unknown phase {ckpt.phase!r}, expected one of {PHASES}")
    configs = _config_blob(ckpt)
    tensors = list(_tensor_sections(ckpt))
    header = {
        "format_version": FORMAT_VERSION,
        "config_digest": config_digest(configs),
        "configs": configs,
        "phase": ckpt.phase,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "optim_step": ckpt.optim_step,
        "extra": ckpt.extra,
        "byte_order": "little",
        "dtype": "<f8",
        "tensors": [
            {"section": sec, "name": name, "shape": list(arr.shape)}
            for sec, name, arr in tensors
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    from .training import TrainConfig  # deferred, training imports this module

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    configs = header["configs"]
    if config_digest(configs) != header["config_digest"]:
        raise FormatError(f"{path}: config digest mismatch")

    offset = 16 + hlen
    sections: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated tensor data for {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
        sections[entry["section"]][entry["name"]] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")

    enc_cfg = EncoderConfig(**{**configs["encoder"], "adapter_layers": tuple(configs["encoder"]["adapter_layers"])})
    dec_cfg = DecoderConfig(**configs["decoder"])
    train_cfg = TrainConfig(**configs["train"])
    return Checkpoint(
        phase=header["phase"],
        epoch=header["epoch"],
        enc_cfg=enc_cfg,
        dec_cfg=dec_cfg,
        train_cfg=train_cfg,
        params=sections["param"],
        rng_state=header["rng_state"],
        optim_step=header["optim_step"],
        optim_m=sections["adam_m"],
        optim_v=sections["adam_v"],
        extra=header.get("extra", {}),
    )
