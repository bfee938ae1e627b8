"""Bit-exact checkpoint directories.

Layout::

    <ckpt>/manifest.json
    <ckpt>/tensors/<name>.bin     raw little-endian float32, row-major

The manifest records the format version, the model kind, its architecture
config and layer spec, and for every tensor its shape, byte length and the
dtype it is restored to. Writes go to a temporary sibling directory that is
renamed into place, so a crash never leaves a partial checkpoint behind.
"""

from __future__ import annotations

import dataclasses
import json
import os
import shutil
from pathlib import Path

import numpy as np
import torch

from .errors import DataValidationError, ShapeError

FORMAT_VERSION = 1


def _model_classes() -> dict:
    from .gan import ConditionalGenerator, Discriminator, Generator
    from .probe import LinearProbe
    from .ssd import SSDDetector

    return {cls.kind: cls for cls in (Discriminator, Generator, ConditionalGenerator, SSDDetector, LinearProbe)}


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    return value


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def config_to_dict(config) -> dict:
    return {f.name: _jsonable(getattr(config, f.name)) for f in dataclasses.fields(config)}


def config_from_dict(cls, data: dict):
    return cls(**{k: _tupled(v) for k, v in data.items()})


def _state_arrays(model) -> dict[str, np.ndarray | torch.Tensor]:
    if isinstance(model, torch.nn.Module):
        return dict(model.state_dict())
    return model.state_arrays()


def save_checkpoint(model, path: str | Path) -> Path:
    """Serialize ``model`` (any registered kind) to the directory ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.parent / f".{path.name}.tmp-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "tensors").mkdir(parents=True)

    tensors = {}
    for name, value in _state_arrays(model).items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        fname = f"tensors/{name}.bin"
        (tmp / fname).write_bytes(blob)
        tensors[name] = {"dtype": "float32", "restore_dtype": str(arr.dtype), "shape": list(arr.shape),
                         "file": fname, "nbytes": len(blob)}
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "config": config_to_dict(model.config),
        "layer_spec": model.layer_spec(),
        "tensors": tensors,
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    if path.exists():
        old = path.parent / f".{path.name}.old-{os.getpid()}"
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old)
    else:
        os.replace(tmp, path)
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataValidationError(f"{path}: unsupported checkpoint format {manifest.get('format_version')}")
    return manifest


def load_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest = read_manifest(path)
    arrays = {}
    for name, meta in manifest["tensors"].items():
        blob = (path / meta["file"]).read_bytes()
        expected = int(np.prod(meta["shape"], dtype=np.int64)) * 4
        if len(blob) != expected or meta["nbytes"] != expected:
            raise ShapeError(f"{path}: tensor {name} has {len(blob)} bytes, shape {meta['shape']} needs {expected}")
        arr = np.frombuffer(blob, dtype="<f4").reshape(meta["shape"])
        arrays[name] = arr.astype(meta.get("restore_dtype", "float32"))
    return manifest, arrays


def load_checkpoint(path: str | Path, expected_kind: str | None = None):
    """Rebuild the model stored at ``path`` with its exact parameters."""
    manifest, arrays = load_arrays(path)
    kind = manifest["kind"]
    if expected_kind is not None and kind != expected_kind:
        raise ShapeError(f"{path}: checkpoint holds a {kind}, expected {expected_kind}")
    classes = _model_classes()
    if kind not in classes:
        raise DataValidationError(f"{path}: unknown model kind {kind!r}")
    cls = classes[kind]
    config = config_from_dict(cls.config_class, manifest["config"])
    if not issubclass(cls, torch.nn.Module):
        return cls.from_state(config, arrays)
    model = cls(config)
    state = model.state_dict()
    if set(state) != set(arrays):
        raise ShapeError(f"{path}: tensor names do not match a {kind} built from its config")
    for name, value in arrays.items():
        if tuple(state[name].shape) != value.shape:
            raise ShapeError(f"{path}: tensor {name} has shape {value.shape}, model expects {tuple(state[name].shape)}")
    model.load_state_dict({k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()})
    model.eval()
    return model

