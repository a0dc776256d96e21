"""Binary checkpoint format.

Layout: the 8 magic bytes ``HTRNER01``, a little-endian uint64 header
length, a UTF-8 JSON header, then the arrays listed in the header as
contiguous little-endian float64 data in the declared order.  The header
carries a SHA-256 of the array section.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from htrner.net import NetworkConfig, ParamStore, check_params
from htrner.tags import SymbolTable
from htrner.train import MetricsLog, Optimizer, TrainConfig, TrainState

MAGIC = b"HTRNER01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


@dataclass
class Checkpoint:
    net_config: NetworkConfig
    table: SymbolTable
    params: ParamStore
    train_config: TrainConfig | None = None
    state: TrainState | None = None
    optimizer_slots: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_steps: int = 0
    provenance: dict = field(default_factory=dict)
    log_csv: str = ""

    def optimizer(self) -> Optimizer:
        """Rebuild the optimiser this checkpoint was saved with."""
        if self.train_config is None:
            raise CheckpointError("checkpoint has no training configuration")
        opt = Optimizer(self.train_config, self.params)
        if set(opt.slots) != set(self.optimizer_slots):
            raise CheckpointError("optimiser state does not match the saved optimiser kind")
        for k, v in self.optimizer_slots.items():
            opt.slots[k][...] = v
        opt.step_count = self.optimizer_steps
        return opt

    def metrics_log(self) -> MetricsLog:
        return MetricsLog.from_csv(self.log_csv) if self.log_csv else MetricsLog()


def _arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param:{k}", ckpt.params.params[k]) for k in sorted(ckpt.params.params)]
    out += [(f"buffer:{k}", ckpt.params.buffers[k]) for k in sorted(ckpt.params.buffers)]
    out += [(f"opt:{k}", ckpt.optimizer_slots[k]) for k in sorted(ckpt.optimizer_slots)]
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    arrays = _arrays(ckpt)
    blobs = [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays]
    digest = hashlib.sha256()
    for b in blobs:
        digest.update(b)
    header = {
        "version": FORMAT_VERSION,
        "network": ckpt.net_config.to_json(),
        "symbols": list(ckpt.table.symbols),
        "blank_index": ckpt.table.blank_index,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "sha256": digest.hexdigest(),
        "train_config": ckpt.train_config.to_json() if ckpt.train_config else None,
        "state": ckpt.state.to_json() if ckpt.state else None,
        "optimizer_steps": ckpt.optimizer_steps,
        "provenance": ckpt.provenance,
        "metrics_csv": ckpt.log_csv,
    }
    hbytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:6] != MAGIC[:6]:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if data[:8] != MAGIC:
        raise CheckpointError(f"unsupported checkpoint version {data[6:8].decode(errors='replace')!r}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointError("checkpoint truncated inside the header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {header.get('version')!r}")
    body = data[16 + hlen :]
    if hashlib.sha256(body).hexdigest() != header["sha256"]:
        raise CheckpointError("checksum mismatch: checkpoint is truncated or corrupt")
    arrays: dict[str, np.ndarray] = {}
    off = 0
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        arrays[name] = arr
        off += 8 * n
    if off != len(body):
        raise CheckpointError("array section size does not match the header")
    net_config = NetworkConfig.from_json(header["network"])
    table = SymbolTable(tuple(header["symbols"]), header["blank_index"])
    params = ParamStore(
        {k[6:]: v for k, v in arrays.items() if k.startswith("param:")},
        {k[7:]: v for k, v in arrays.items() if k.startswith("buffer:")},
    )
    try:
        check_params(params, net_config)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    if len(table) != net_config.num_classes:
        raise CheckpointError(f"symbol table has {len(table)} entries but the network has {net_config.num_classes} classes")
    return Checkpoint(
        net_config,
        table,
        params,
        TrainConfig.from_json(header["train_config"]) if header["train_config"] else None,
        TrainState.from_json(header["state"]) if header["state"] else None,
        {k[4:]: v for k, v in arrays.items() if k.startswith("opt:")},
        header["optimizer_steps"],
        header["provenance"],
        header["metrics_csv"],
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return from_bytes(data)
