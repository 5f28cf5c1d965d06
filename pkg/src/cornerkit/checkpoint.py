"""Versioned text checkpoints: named parameter arrays plus their TrainConfig.

One self-describing JSON document per file, keys sorted, numbers serialized
with full round-trip precision, so save -> load -> save reproduces the file
byte-for-byte.  Text keeps desk-scale checkpoints (< 1e5 parameters)
diffable and portable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Value, check_finite

FORMAT_VERSION = 1
_DTYPES = {"float32": np.float32, "float64": np.float64}


class CheckpointError(ValueError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass
class ModelCheckpoint:
    """Trained (or freshly initialized) parameter bundle for one task."""

    task: str
    config: dict
    step: int
    eval_loss: float
    params: dict = field(default_factory=dict)  # name -> np.ndarray
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        for name, arr in self.params.items():
            if arr.dtype.name not in _DTYPES:
                raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")


def save_checkpoint(path, ckpt: ModelCheckpoint):
    document = {
        "format_version": ckpt.format_version,
        "task": ckpt.task,
        "config": ckpt.config,
        "step": ckpt.step,
        "eval_loss": float(ckpt.eval_loss),
        "params": {
            name: {
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "data": [float(x) for x in arr.reshape(-1)],
            }
            for name, arr in ckpt.params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(document, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> ModelCheckpoint:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            document = json.load(fh)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e.msg}") from None
    version = document.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported_version: file has {version!r}, supported {FORMAT_VERSION}")
    params = {}
    for name, spec in document["params"].items():
        if spec["dtype"] not in _DTYPES:
            raise CheckpointError(f"array {name!r}: unsupported dtype {spec['dtype']}")
        data = np.asarray(spec["data"], dtype=_DTYPES[spec["dtype"]])
        expected = int(np.prod(spec["shape"])) if spec["shape"] else 1
        if data.size != expected:
            raise CheckpointError(
                f"corrupt checkpoint: array {name!r} declares shape "
                f"{tuple(spec['shape'])} but carries {data.size} values")
        check_finite(data, f"checkpoint array {name!r}")
        params[name] = data.reshape(spec["shape"])
    return ModelCheckpoint(task=document["task"], config=document["config"],
                           step=int(document["step"]),
                           eval_loss=float(document["eval_loss"]),
                           params=params, format_version=version)


def params_to_values(params):
    return {name: Value(arr.copy(), requires_grad=True)
            for name, arr in params.items()}
