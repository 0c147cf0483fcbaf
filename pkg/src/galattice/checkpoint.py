"""Binary checkpoint format for :class:`GalaModel`.

Layout::

    GALA1\\n
    <manifest byte length>\\n
    <manifest: JSON text with version, task, model config, parameter names/shapes>
    <payload: float64 little-endian values in manifest order>
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .heads import GalaModel
from .model import ModelConfig
from .tasks import TaskKind

MAGIC = b"GALA1\n"
SUPPORTED_VERSIONS = (1,)


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: GalaModel, path) -> None:
    params = list(model.named_parameters())
    manifest = {
        "version": GalaModel.VERSION,
        "task": model.task.value,
        "n_classes": model.n_classes,
        "n_points": model.n_points,
        "config": model.config.to_dict(),
        "params": [[name, list(p.shape)] for name, p in params],
    }
    text = json.dumps(manifest, indent=1, sort_keys=True).encode()
    payload = b"".join(
        p.detach().cpu().numpy().astype("<f8", copy=False).tobytes() for _, p in params
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(text)}\n".encode())
        fh.write(text)
        fh.write(payload)


def read_manifest(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a GALA1 checkpoint")
    rest = data[len(MAGIC):]
    head, sep, rest = rest.partition(b"\n")
    if not sep or not head.isdigit():
        raise CheckpointError(f"{path}: malformed manifest length")
    n = int(head)
    if len(rest) < n:
        raise CheckpointError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(rest[:n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    if not isinstance(manifest, dict):
        raise CheckpointError(f"{path}: manifest is not a JSON object")
    return manifest, rest[n:]


def load_checkpoint(path) -> GalaModel:
    manifest, payload = read_manifest(path)
    if manifest.get("version") not in SUPPORTED_VERSIONS:
        raise CheckpointError(f"{path}: unknown checkpoint version {manifest.get('version')!r}")
    try:
        task = TaskKind.parse(manifest["task"])
    except ValueError:
        raise CheckpointError(f"{path}: unknown task id {manifest['task']!r}") from None
    expected = sum(int(np.prod(shape)) for _, shape in manifest["params"]) * 8
    if expected != len(payload):
        raise CheckpointError(
            f"{path}: payload length mismatch, manifest needs {expected} bytes, found {len(payload)}"
        )
    model = GalaModel(task, ModelConfig(**manifest["config"]), n_classes=manifest["n_classes"],
                      n_points=manifest["n_points"])
    own = dict(model.named_parameters())
    names = [name for name, _ in manifest["params"]]
    if names != list(own):
        raise CheckpointError(f"{path}: parameter names do not match the {task.value} architecture")
    values = np.frombuffer(payload, dtype="<f8")
    offset = 0
    with torch.no_grad():
        for name, shape in manifest["params"]:
            size = int(np.prod(shape))
            chunk = values[offset : offset + size].reshape(shape)
            own[name].copy_(torch.from_numpy(chunk.astype(np.float64)))
            offset += size
    return model
