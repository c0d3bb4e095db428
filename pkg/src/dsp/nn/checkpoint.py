"""Checkpoint container: magic, version, JSON header, then raw little-endian arrays.

Layout::

    b"DSPCKPT\\0" | uint32 version | uint64 header length | header JSON | array bytes

The header carries the training config, vocabulary, seed, epoch and a
shape table ``{name: {dtype, shape, offset, nbytes}}`` with offsets
relative to the start of the array section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from dsp.nn.model import PointerGeneratorParser
from dsp.nn.train import TrainConfig
from dsp.nn.vocab import Vocabulary

MAGIC = b"DSPCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: PointerGeneratorParser, config: TrainConfig, epoch: int = -1,
                    extra: dict | None = None):
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    table, offset = {}, 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        arrays[name] = arr
        table[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes}
        offset += arr.nbytes
    header = {
        "version": VERSION,
        "config": config.to_json(),
        "vocab": model.vocab.to_json(),
        "seed": config.seed,
        "epoch": epoch,
        "arrays": table,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(blob)))
        f.write(blob)
        for arr in arrays.values():
            f.write(arr.tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, n = struct.unpack("<IQ", f.read(12))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(f.read(n).decode("utf-8"))


def load_checkpoint(path) -> tuple[PointerGeneratorParser, TrainConfig, dict]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    header = json.loads(data[start : start + n].decode("utf-8"))
    base = start + n
    config = TrainConfig.from_json(header["config"])
    vocab = Vocabulary.from_json(header["vocab"])
    model = PointerGeneratorParser(vocab, config.model_config())
    state = {}
    for name, info in header["arrays"].items():
        raw = data[base + info["offset"] : base + info["offset"] + info["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(info["dtype"])).reshape(info["shape"])
        state[name] = torch.from_numpy(arr.copy())
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing arrays {sorted(missing)}")
    model.load_state_dict(state)
    model.eval()
    return model, config, header
