"""Self-contained checkpoint archive: a JSON header (architecture config
plus metadata and an array index) followed by raw little-endian array
bytes. The byte layout is fully deterministic, so identical training runs
produce identical files.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .network import ArchitectureConfig, build_model

MAGIC = b"FNCKPT01"


def _write_archive(path, config, arrays, meta):
    names = sorted(arrays)
    index = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        index.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset}
        )
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps(
        {"config": config, "meta": meta, "arrays": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def _read_archive(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path} is not a checkpoint archive")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode())
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return header["config"], arrays, header["meta"]


@dataclass
class Checkpoint:
    """Architecture config plus all weight/buffer arrays and run metadata."""

    arch: ArchitectureConfig
    state: dict
    best_val_loss: float
    best_epoch: int
    config_digest: str = ""
    fold_id: int = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, best_val_loss, best_epoch, config_digest="", fold_id=None, extra=None):
        state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.cfg, state, float(best_val_loss), int(best_epoch),
                   config_digest, fold_id, extra or {})

    def save(self, path):
        meta = {
            "best_val_loss": self.best_val_loss,
            "best_epoch": self.best_epoch,
            "config_digest": self.config_digest,
            "fold_id": self.fold_id,
            "extra": self.extra,
        }
        _write_archive(path, self.arch.to_dict(), self.state, meta)

    @classmethod
    def load(cls, path):
        config, arrays, meta = _read_archive(path)
        return cls(
            arch=ArchitectureConfig.from_dict(config),
            state=arrays,
            best_val_loss=meta["best_val_loss"],
            best_epoch=meta["best_epoch"],
            config_digest=meta.get("config_digest", ""),
            fold_id=meta.get("fold_id"),
            extra=meta.get("extra", {}),
        )

    def to_model(self):
        """Rebuild the model; loading verifies config/shape compatibility."""
        model = build_model(self.arch, seed=0)
        tensors = {k: torch.from_numpy(v.copy()) for k, v in self.state.items()}
        model.load_state_dict(tensors, strict=True)
        model.eval()
        return model
