"""Binary checkpoints: length-prefixed JSON header followed by raw little-endian float32 arrays.

The header lists every entry as ``(group, name, shape, offset)``; groups are
``param``, ``adam_m`` and ``adam_v``.  Writes go to a temp file that is
renamed into place, so a crash never leaves a truncated checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FDCKPT01"
DTYPE = np.dtype("<f4")
GROUPS = ("param", "adam_m", "adam_v")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    params: dict
    config: dict
    config_hash: str
    epoch: int = 0
    step: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_step: int = 0
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def n_scalars(self) -> int:
        return int(sum(np.asarray(a).size for a in self.params.values()))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for group, arrays in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        names = set()
        for name, arr in arrays.items():
            if name in names:
                raise CheckpointError(f"duplicate entry {group}/{name}")
            names.add(name)
            a = np.ascontiguousarray(np.asarray(arr), dtype=DTYPE)
            entries.append({"group": group, "name": name, "shape": list(a.shape), "offset": offset})
            blobs.append(a.tobytes())
            offset += a.nbytes
    header = {"config": ckpt.config, "config_hash": ckpt.config_hash, "epoch": ckpt.epoch, "step": ckpt.step,
              "adam_step": ckpt.adam_step, "rng": ckpt.rng, "extra": ckpt.extra, "dtype": "float32",
              "endianness": "little", "entries": entries}
    hb = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(hb)))
            f.write(hb)
            for b in blobs:
                f.write(b)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    body = memoryview(raw)[16 + n:]
    groups = {g: {} for g in GROUPS}
    for e in header["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + count * DTYPE.itemsize
        if end > len(body):
            raise CheckpointError(f"{path}: truncated at entry {e['group']}/{e['name']}")
        arr = np.frombuffer(body[e["offset"]:end], dtype=DTYPE).reshape(e["shape"]).astype(np.float32)
        groups[e["group"]][e["name"]] = arr
    return Checkpoint(groups["param"], header["config"], header["config_hash"], header["epoch"], header["step"],
                      groups["adam_m"], groups["adam_v"], header["adam_step"], header["rng"], header.get("extra", {}))
