"""Checkpoints: a JSON manifest plus a flat little-endian float64 blob."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .features import FeatureScaler
from .model import ModelConfig, init_params

FORMAT = "waydcm-checkpoint/1"
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict
    model: ModelConfig
    scaler: FeatureScaler
    manifest: dict


def blob_path(manifest_path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def save_checkpoint(path, params: dict, model: ModelConfig, scaler: FeatureScaler, extra: dict | None = None) -> Path:
    """Write ``path`` (manifest) and its ``.bin`` sibling; returns the manifest path."""
    path = Path(path)
    entries, offset, chunks = [], 0, []
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data, dtype=_DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.reshape(-1))
    beta = None
    if "dcm.beta" in params:
        beta = {n: float(v) for n, v in zip(model.features, params["dcm.beta"].data)}
    manifest = {
        "format": FORMAT,
        "version": __version__,
        "model": model.to_dict(),
        "scaler": scaler.to_dict(),
        "beta": beta,
        "params": entries,
        "n_values": offset,
        "blob": blob_path(path).name,
        **(extra or {}),
    }
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=_DTYPE)
    blob_path(path).write_bytes(blob.astype(_DTYPE).tobytes())
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        raw = blob_path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint manifest {path} is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    try:
        model = ModelConfig(**manifest["model"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model section: {exc}") from exc
    if len(raw) % _DTYPE.itemsize:
        raise CheckpointError("blob length is not a whole number of float64 values")
    blob = np.frombuffer(raw, dtype=_DTYPE)
    if blob.size != manifest.get("n_values"):
        raise CheckpointError(f"blob holds {blob.size} values, manifest expects {manifest.get('n_values')}")

    expected = init_params(model, 0)
    stored = {e["name"]: e for e in manifest["params"]}
    for name in expected:
        if name not in stored:
            raise CheckpointError(f"parameter {name!r} missing from checkpoint")
    for name in stored:
        if name not in expected:
            raise CheckpointError(f"unexpected parameter {name!r} in checkpoint")
    params = {}
    for name, ref in expected.items():
        e = stored[name]
        shape = tuple(e["shape"])
        if shape != ref.shape:
            raise CheckpointError(f"parameter {name!r} has shape {shape}, model expects {ref.shape}")
        n = int(np.prod(shape, dtype=int))
        lo = e["offset"]
        if lo < 0 or lo + n > blob.size:
            raise CheckpointError(f"parameter {name!r} lies outside the blob")
        params[name] = ad.parameter(blob[lo : lo + n].reshape(shape))
    return Checkpoint(params, model, FeatureScaler.from_dict(manifest["scaler"]), manifest)
