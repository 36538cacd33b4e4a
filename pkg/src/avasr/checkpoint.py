"""Versioned binary checkpoint container.

Layout: magic "AVCK", version u16, header-length u32 (little-endian), a JSON
header (model/arch config, alphabet, ordered tensor index with names and
shapes), then the raw tensor payloads as 64-bit little-endian floats in index
order. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .alphabet import Alphabet
from .models import CharRnnLm, LmConfig, ModelConfig, RecognitionModel

_MAGIC = b"AVCK"
_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def save_tensors(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    index = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    header = json.dumps({"config": config, "tensors": index}).encode()
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(_MAGIC, _VERSION, len(header)))
        f.write(header)
        for v in tensors.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic, version, hlen = _PREFIX.unpack(f.read(_PREFIX.size))
        if magic != _MAGIC:
            raise ValueError("not a checkpoint file")
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode())
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            tensors[entry["name"]] = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape).copy()
    return header["config"], tensors


def _state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    module.load_state_dict({k: torch.as_tensor(v, dtype=torch.float64) for k, v in tensors.items()})


def save_model(path, model: RecognitionModel) -> None:
    config = {
        "type": "recognition",
        "alphabet": list(model.alphabet.labels),
        "arch": model.config.to_dict(),
    }
    save_tensors(path, config, _state_arrays(model))


def load_model(path) -> RecognitionModel:
    config, tensors = load_tensors(path)
    if config.get("type") != "recognition":
        raise ValueError("checkpoint does not hold a recognition model")
    model = RecognitionModel(Alphabet(tuple(config["alphabet"])), ModelConfig(**config["arch"]))
    _load_state(model, tensors)
    return model


def save_lm(path, lm: CharRnnLm, config: LmConfig) -> None:
    meta = {"type": "lm", "alphabet": list(lm.alphabet.labels), "arch": config.to_dict()}
    save_tensors(path, meta, _state_arrays(lm))


def load_lm(path) -> CharRnnLm:
    config, tensors = load_tensors(path)
    if config.get("type") != "lm":
        raise ValueError("checkpoint does not hold a language model")
    lm = CharRnnLm(Alphabet(tuple(config["alphabet"])), LmConfig(**config["arch"]))
    _load_state(lm, tensors)
    return lm
