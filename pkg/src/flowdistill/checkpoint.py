"""Checkpoints and reports on disk.

A checkpoint is a JSON manifest (``<name>.json``) next to a raw blob
(``<name>.bin``) holding every parameter as little-endian float64, in
manifest order.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .models import ModelConfig, VelocityModel

FORMAT_VERSION = 1
DTYPE = "<f8"


class CheckpointError(ValueError):
    pass


def _paths(path) -> tuple[Path, Path]:
    manifest = Path(path)
    if manifest.suffix != ".json":
        manifest = manifest.with_suffix(".json")
    return manifest, manifest.with_suffix(".bin")


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_checkpoint(model: VelocityModel, path, extra: dict | None = None) -> Path:
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks = [], []
    for name, node in model.store:
        entries.append({"name": name, "shape": list(node.shape)})
        chunks.append(np.ascontiguousarray(node.value, dtype=DTYPE).tobytes())
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "dtype": DTYPE,
        "params": entries,
        "blob": blob_path.name,
        "blob_bytes": len(blob),
    }
    if extra:
        manifest["extra"] = extra
    blob_path.write_bytes(blob)
    dump_json(manifest, manifest_path)
    return manifest_path


def load_checkpoint(path, expect: ModelConfig | None = None) -> VelocityModel:
    manifest_path, _ = _paths(path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version} "
                              f"(this build reads version {FORMAT_VERSION})")
    config = ModelConfig.from_dict(manifest["config"])
    if expect is not None and config != expect:
        raise CheckpointError(f"config mismatch: checkpoint has {config}, expected {expect}")
    model = VelocityModel(config, manifest.get("seed", 0))
    declared = [(e["name"], tuple(e["shape"])) for e in manifest["params"]]
    actual = [(name, node.shape) for name, node in model.store]
    if declared != actual:
        raise CheckpointError("manifest parameter list does not match its config")
    expected_bytes = 8 * sum(math.prod(shape) for _, shape in declared)
    if manifest.get("blob_bytes") != expected_bytes:
        raise CheckpointError(f"manifest/blob length disagreement: manifest says "
                              f"{manifest.get('blob_bytes')} bytes, shapes need {expected_bytes}")
    blob_path = manifest_path.parent / manifest["blob"]
    blob = blob_path.read_bytes()
    if len(blob) != expected_bytes:
        raise CheckpointError(f"truncated blob {blob_path}: expected {expected_bytes} bytes, "
                              f"got {len(blob)}")
    flat = np.frombuffer(blob, dtype=DTYPE)
    offset = 0
    values = {}
    for name, shape in declared:
        size = math.prod(shape)
        values[name] = flat[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
    model.store.load(values)
    return model


def save_report(report: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dump_json(report, path)
    return path


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())
