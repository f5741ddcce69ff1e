"""Versioned binary checkpoints: magic, version, JSON metadata, then
name-indexed tensor blocks in the raw tensor layout. Writes are atomic
(temp file + rename); save/load round-trips training bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import tensor_bytes, tensor_from_bytes

MAGIC = b"PFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    step: int
    stages_done: list[str]
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_meta: dict = field(default_factory=dict)
    rng_states: dict[str, tuple[int, int]] = field(default_factory=dict)
    config_snapshot: dict[str, str] = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        meta = {
            "stage": self.stage,
            "step": self.step,
            "stages_done": self.stages_done,
            "opt_meta": self.opt_meta,
            "rng_states": {k: list(v) for k, v in self.rng_states.items()},
            "config": self.config_snapshot,
        }
        meta_bytes = json.dumps(meta, sort_keys=True).encode()
        blocks: list[tuple[str, np.ndarray]] = []
        for group, tensors in (
            ("params", self.params), ("ema", self.ema), ("opt_m", self.opt_m), ("opt_v", self.opt_v)
        ):
            for name in sorted(tensors):
                blocks.append((f"{group}/{name}", tensors[name]))
        payload = bytearray()
        payload += MAGIC
        payload += struct.pack("<I", VERSION)
        payload += struct.pack("<Q", len(meta_bytes)) + meta_bytes
        payload += struct.pack("<Q", len(blocks))
        for name, arr in blocks:
            nb = name.encode()
            payload += struct.pack("<H", len(nb)) + nb
            payload += tensor_bytes(arr)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(bytes(payload))
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        buf = Path(path).read_bytes()
        if buf[:4] != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (meta_len,) = struct.unpack_from("<Q", buf, 8)
        meta = json.loads(buf[16 : 16 + meta_len].decode())
        offset = 16 + meta_len
        (n_blocks,) = struct.unpack_from("<Q", buf, offset)
        offset += 8
        groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "ema": {}, "opt_m": {}, "opt_v": {}}
        for _ in range(n_blocks):
            (name_len,) = struct.unpack_from("<H", buf, offset)
            offset += 2
            name = buf[offset : offset + name_len].decode()
            offset += name_len
            arr, offset = tensor_from_bytes(buf, offset)
            group, _, key = name.partition("/")
            groups[group][key] = arr
        return cls(
            stage=meta["stage"],
            step=meta["step"],
            stages_done=list(meta["stages_done"]),
            params=groups["params"],
            ema=groups["ema"],
            opt_m=groups["opt_m"],
            opt_v=groups["opt_v"],
            opt_meta=meta["opt_meta"],
            rng_states={k: (int(v[0]), int(v[1])) for k, v in meta["rng_states"].items()},
            config_snapshot=meta.get("config", {}),
        )
