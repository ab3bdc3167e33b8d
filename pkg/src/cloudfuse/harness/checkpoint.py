"""Byte-deterministic checkpoint files.

Layout: 8-byte magic ``CLFUSECK``, u32 format version, u64 header length, a
UTF-8 JSON header (sorted keys) and then raw little-endian tensor payloads
in header order. The header echoes the full training config, the step
counter, the sampler state and the loss history.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from cloudfuse.errors import ConfigMismatchError, ValidationError
from cloudfuse.harness.config import TrainConfig, arch_diff

MAGIC = b"CLFUSECK"
VERSION = 1
PREAMBLE = struct.Struct("<IQ")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class Checkpoint:
    config: TrainConfig
    model_state: dict  # parameter name -> tensor
    optimizer_state: dict = field(default_factory=dict)  # "name/moment" -> tensor
    step: int = 0
    sampler: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def save(self, path) -> Path:
        tensors = [(f"model/{k}", v) for k, v in self.model_state.items()]
        tensors += [(f"optim/{k}", v) for k, v in self.optimizer_state.items()]
        index, blobs, offset = [], [], 0
        for name, t in tensors:
            arr = t.detach().cpu().contiguous().numpy()
            dtype = str(arr.dtype)
            if dtype not in _DTYPES:
                raise ValidationError(f"unsupported tensor dtype {dtype} for {name}")
            blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            index.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
            blobs.append(blob)
            offset += len(blob)
        header = {
            "format_version": VERSION,
            "config": self.config.to_dict(),
            "step": self.step,
            "sampler": self.sampler,
            "history": self.history,
            "tensors": index,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(PREAMBLE.pack(VERSION, len(head)))
            fh.write(head)
            for blob in blobs:
                fh.write(blob)
        return path

    def build_model(self, dtype=None):
        from cloudfuse.reconstruction import CloudRemovalNet

        model = CloudRemovalNet(self.config.fusion())
        first = next(iter(self.model_state.values()))
        model = model.to(first.dtype)
        model.load_state_dict(self.model_state)
        return model.to(dtype) if dtype is not None else model


def load_checkpoint(path, expected: TrainConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected`` set, refuse on any architecture difference."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC or len(raw) < len(MAGIC) + PREAMBLE.size:
        raise ValidationError(f"{path}: not a checkpoint file")
    version, head_len = PREAMBLE.unpack_from(raw, len(MAGIC))
    if version != VERSION:
        raise ValidationError(f"{path}: checkpoint format {version}, this build reads {VERSION}")
    start = len(MAGIC) + PREAMBLE.size
    header = json.loads(raw[start : start + head_len])
    payload = memoryview(raw)[start + head_len :]
    config = TrainConfig.from_dict(header["config"])
    if expected is not None:
        diff = arch_diff(config.arch(), expected.arch())
        if diff:
            raise ConfigMismatchError(diff)
    model_state, optim_state = {}, {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
        t = torch.from_numpy(arr.astype(entry["dtype"]).reshape(entry["shape"]))
        kind, name = entry["name"].split("/", 1)
        (model_state if kind == "model" else optim_state)[name] = t
    return Checkpoint(config, model_state, optim_state, header["step"], header["sampler"], header["history"])
