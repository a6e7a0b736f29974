"""
Model checkpoints.

A checkpoint is a single JSON document. Floats are written with their shortest round-trip
representation, so save -> load -> save reproduces the file byte for byte.
"""
import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from .engine import LAYER_KINDS, Model
from .exceptions import ConfigurationError, InputError
from .noise import NoiseSpec

FORMAT_VERSION = 1


def atomic_write_bytes(path: Union[str, Path], data: bytes):
    """Write to a temporary file next to the target, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=path.parent, prefix=f".{path.name}.", delete=False) as fh:
        fh.write(data)
        temp_path = fh.name
    try:
        os.replace(temp_path, path)
    except OSError:
        os.unlink(temp_path)
        raise


def model_to_dict(model: Model) -> Dict[str, Any]:
    layers = []
    for layer, spec in zip(model.layers, model.noise):
        entry = layer.spec()
        entry["params"] = [p.tolist() for p in layer.params()]
        entry["noise"] = None
        if spec is not None:
            entry["noise"] = {
                "target": spec.target.value,
                "base_sigma": float(spec.base_sigma),
                "alpha": float(spec.alpha),
                "learnable": spec.learnable,
                "enabled": spec.enabled,
            }
        layers.append(entry)
    return {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "input_domain": list(model.input_domain),
        "layers": layers,
    }


def model_from_dict(document: Dict[str, Any]) -> Model:
    version = document.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format_version {version!r}")
    layers, noise = [], []
    for index, entry in enumerate(document["layers"]):
        entry = dict(entry)
        kind = entry.pop("kind")
        if kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {kind!r} at layer {index}")
        params = entry.pop("params", [])
        noise_entry = entry.pop("noise", None)
        layer = LAYER_KINDS[kind](**entry)
        if params:
            layer.set_params([np.array(p, dtype=np.float64) for p in params])
        layers.append(layer)
        noise.append(NoiseSpec(**noise_entry) if noise_entry else None)
    return Model(layers, document["input_shape"], noise, tuple(document["input_domain"]))


def dumps(model: Model) -> bytes:
    return (json.dumps(model_to_dict(model), sort_keys=True, indent=1) + "\n").encode("utf-8")


def save_checkpoint(model: Model, path: Union[str, Path]) -> str:
    """Save a model and return the SHA-256 of the written bytes."""
    data = dumps(model)
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: Union[str, Path]) -> Model:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InputError(f"checkpoint {path} is not valid JSON: {e}") from e
    return model_from_dict(document)


def calculate_checksum(file_path: Union[str, Path], chunk_size: int = 8192) -> str:
    """Calculate SHA-256 checksum of a file."""
    sha256_hash = hashlib.sha256()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            sha256_hash.update(chunk)
    return sha256_hash.hexdigest()
