"""Versioned checkpoint container.

Layout: 8-byte magic, uint32 format version, uint64 header length, UTF-8 JSON
header ``{kind, config, step, tensors: [{name, shape, offset, numel}], extra}``,
then the tensors back to back as little-endian float32.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CSSKCKPT"
FORMAT_VERSION = 1
KINDS = ("encoder", "system")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, state: dict, kind: str, config: dict, step: int = 0,
                    extra: dict | None = None) -> Path:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "numel": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"kind": kind, "config": config, "step": int(step), "tensors": index,
                         "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header)
        for b in blobs:
            f.write(b)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Returns ``(state_dict, header)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(data[20:20 + hlen])
    body = memoryview(data)[20 + hlen:]
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(body, dtype="<f4", count=t["numel"], offset=t["offset"])
        state[t["name"]] = torch.from_numpy(arr.reshape(t["shape"]).copy())
    return state, header


def save_encoder(path, encoder, step: int = 0, extra: dict | None = None) -> Path:
    return save_checkpoint(path, encoder.state_dict(), "encoder", {"encoder": encoder.cfg.to_dict()},
                           step, extra)


def load_encoder(path):
    from .ssl_encoder.model import EncoderConfig, SSLEncoder

    state, header = load_checkpoint(path)
    cfg = header["config"].get("encoder")
    if header["kind"] != "encoder" or cfg is None:
        kind = header["kind"]
        if kind == "system" and cfg is not None:
            state = {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
        else:
            raise CheckpointError(f"{path}: {kind} checkpoint holds no encoder")
    enc = SSLEncoder(EncoderConfig(**cfg))
    enc.load_state_dict(state)
    return enc.eval(), header


def save_system(path, system, step: int = 0, extra: dict | None = None) -> Path:
    config = {"separator": system.cfg.to_dict(),
              "encoder": system.encoder.cfg.to_dict() if system.encoder is not None else None,
              "use_layers": system.use_layers}
    return save_checkpoint(path, system.state_dict(), "system", config, step, extra)


def load_system(path):
    from .separator.model import SeparationSystem, SeparatorConfig
    from .ssl_encoder.model import EncoderConfig, SSLEncoder

    state, header = load_checkpoint(path)
    if header["kind"] != "system":
        raise CheckpointError(f"{path}: expected a system checkpoint, got {header['kind']!r}")
    cfg = header["config"]
    enc = SSLEncoder(EncoderConfig(**cfg["encoder"])) if cfg.get("encoder") else None
    system = SeparationSystem(SeparatorConfig(**cfg["separator"]), enc, cfg.get("use_layers"))
    system.load_state_dict(state)
    return system.eval(), header
