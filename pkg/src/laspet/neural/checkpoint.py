"""LASP parameter checkpoints: magic, version, config echo, then named little-endian f32 blocks."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from laspet.neural.model import LasNet, LasNetConfig

MAGIC = b"LASP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: LasNet, path: str | Path) -> None:
    cfg = json.dumps({"model": model.cfg.to_dict(), "longitudinal": model.longitudinal}, sort_keys=True).encode()
    state = model.state_dict()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(state))]
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> LasNet:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a LASP checkpoint")
    version, n_cfg = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(buf[pos:pos + n_cfg])
    pos += n_cfg
    (n_blocks,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    model = LasNet(LasNetConfig.from_dict(meta["model"]), longitudinal=meta["longitudinal"])
    expected = model.state_dict()
    state = {}
    for _ in range(n_blocks):
        (n_name,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n_name].decode()
        pos += n_name
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        if name not in expected or tuple(expected[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: unexpected block {name} {shape}")
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    model.load_state_dict(state)
    return model
