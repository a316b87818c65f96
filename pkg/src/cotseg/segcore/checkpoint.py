"""Single-file parameter checkpoints.

An ``.npz`` container holding every parameter under ``param/<name>``,
optional optimizer moments under ``optim/<name>/<slot>`` and a JSON manifest
(format tag, version, model config, per-parameter shape and trainable flag).
"""
from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from ..errors import CheckpointError

FORMAT = "cotseg-checkpoint"
VERSION = 1


def save_checkpoint(path, model, trainable=(), *, optimizer=None, iteration: int = 0, extra: dict | None = None) -> Path:
    """Write atomically: a failed write leaves any previous file intact."""
    path = Path(path)
    trainable = set(trainable)
    arrays: dict[str, np.ndarray] = {}
    params = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.detach().cpu().numpy()
        params[name] = {"shape": list(p.shape), "trainable": name in trainable}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                for slot, value in state.items():
                    arrays[f"optim/{names[id(p)]}/{slot}"] = torch.as_tensor(value).detach().cpu().numpy()
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "iteration": int(iteration),
        "model_config": getattr(model, "config", {}),
        "params": params,
        "extra": extra or {},
    }
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except OSError as exc:
        Path(tmp).unlink(missing_ok=True)
        raise CheckpointError(f"could not write {path}: {exc}") from exc
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[str, dict[str, np.ndarray]]]:
    """Return ``(manifest, params, optimizer_state)``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        with np.load(path, allow_pickle=False) as data:
            manifest = json.loads(bytes(data["__manifest__"]).decode())
            params, optim = {}, {}
            for key in data.files:
                if key.startswith("param/"):
                    params[key[6:]] = data[key]
                elif key.startswith("optim/"):
                    name, slot = key[6:].rsplit("/", 1)
                    optim.setdefault(name, {})[slot] = data[key]
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if manifest.get("format") != FORMAT or "version" not in manifest:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if manifest["version"] != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest['version']}")
    return manifest, params, optim


def load_checkpoint(path, model=None):
    """Load parameters into ``model`` (built from the stored config if None).

    Returns ``(model, manifest, optimizer_state)``.
    """
    from .model import PromptableSegmenter

    manifest, params, optim = read_checkpoint(path)
    if model is None:
        model = PromptableSegmenter(**manifest["model_config"])
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))
        unexpected = sorted(set(params) - set(own))
        raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    with torch.no_grad():
        for name, p in own.items():
            if tuple(p.shape) != params[name].shape:
                raise CheckpointError(f"{name}: shape {params[name].shape} != {tuple(p.shape)}")
            p.copy_(torch.from_numpy(params[name]))
    return model, manifest, optim


def restore_optimizer(optimizer, model, optim_state: dict[str, dict[str, np.ndarray]]) -> None:
    names = {id(p): n for n, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            slots = optim_state.get(names[id(p)])
            if slots:
                optimizer.state[p] = {k: torch.from_numpy(np.array(v)) for k, v in slots.items()}
