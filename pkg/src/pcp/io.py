"""On-disk formats for models and datasets.

Model directory::

    manifest.json   layer list, shapes, selections, sampler masks, version, checksum
    weights.bin     little-endian float32 tensors, concatenated in layer order
                    (weight then bias), each row-major

Dataset directory::

    data_manifest.json   shape, count, labels (or null), domain tag
    images.bin           little-endian float32 images, row-major [N, C, H, W]
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from pcp.graph import Layer, ModelGraph

FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


def _sha256(data):
    return "sha256:" + hashlib.sha256(data).hexdigest()


def model_to_bytes(model):
    """Return ``(manifest_dict, payload_bytes)`` for ``model``."""
    chunks = []
    layers = []
    for layer in model.layers:
        entry = {"kind": layer.kind, "name": layer.name}
        if layer.kind == "conv":
            entry.update(stride=layer.stride, pad=layer.pad, prunable=layer.prunable)
        if layer.kind == "maxpool":
            entry["size"] = layer.size
        if layer.kind == "gather":
            entry["index"] = [int(v) for v in layer.index]
        if layer.weight is not None:
            entry["weight_shape"] = list(layer.weight.shape)
            entry["bias_shape"] = list(layer.bias.shape)
            chunks.append(np.ascontiguousarray(layer.weight, dtype=_F32).tobytes())
            chunks.append(np.ascontiguousarray(layer.bias, dtype=_F32).tobytes())
        layers.append(entry)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": model.name,
        "iteration": model.iteration,
        "input_shape": list(model.input_shape),
        "layers": layers,
        "selections": {str(k): v.astype(int).tolist() for k, v in model.selections.items()},
        "samplers": {str(k): v.astype(int).tolist() for k, v in model.samplers.items()},
        "checksum": _sha256(payload),
    }
    return manifest, payload


def model_from_bytes(manifest, payload):
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {manifest.get('format_version')!r}")
    if _sha256(payload) != manifest.get("checksum"):
        raise ChecksumError("weights payload does not match manifest checksum")
    expected = 0
    for entry in manifest["layers"]:
        if "weight_shape" in entry:
            expected += int(np.prod(entry["weight_shape"])) + int(np.prod(entry["bias_shape"]))
    if expected * 4 != len(payload):
        raise FormatError(
            f"manifest declares {expected} float32 values but payload holds {len(payload) // 4}"
        )
    values = np.frombuffer(payload, dtype=_F32)
    offset = 0
    layers = []
    for entry in manifest["layers"]:
        kw = {"name": entry.get("name", "")}
        if "weight_shape" in entry:
            ws, bs = tuple(entry["weight_shape"]), tuple(entry["bias_shape"])
            nw, nb = int(np.prod(ws)), int(np.prod(bs))
            kw["weight"] = values[offset:offset + nw].reshape(ws).astype(np.float32)
            offset += nw
            kw["bias"] = values[offset:offset + nb].reshape(bs).astype(np.float32)
            offset += nb
        if entry["kind"] == "conv":
            kw.update(stride=entry["stride"], pad=entry["pad"], prunable=entry["prunable"])
        if entry["kind"] == "maxpool":
            kw["size"] = entry["size"]
        if entry["kind"] == "gather":
            kw["index"] = np.asarray(entry["index"], dtype=np.int64)
        layers.append(Layer(entry["kind"], **kw))
    selections = {int(k): np.asarray(v, dtype=np.uint8) for k, v in manifest["selections"].items()}
    model = ModelGraph(layers, manifest["input_shape"], selections,
                       name=manifest.get("name", "model"), iteration=manifest.get("iteration", 0))
    stored = {int(k): v for k, v in manifest.get("samplers", {}).items()}
    derived = {k: v.astype(int).tolist() for k, v in model.samplers.items()}
    if stored != derived:
        raise FormatError("sampler masks in manifest disagree with residual first-conv selections")
    return model


def save_model(model, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest, payload = model_to_bytes(model)
    (path / "weights.bin").write_bytes(payload)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return path


def load_model(path):
    path = Path(path)
    for name in ("manifest.json", "weights.bin"):
        if not (path / name).is_file():
            raise FileNotFoundError(f"model file not found: {path / name}")
    manifest = json.loads((path / "manifest.json").read_text())
    return model_from_bytes(manifest, (path / "weights.bin").read_bytes())


def save_dataset(dataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    images = np.ascontiguousarray(dataset.images, dtype=_F32)
    (path / "images.bin").write_bytes(images.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": dataset.name,
        "domain": dataset.domain,
        "count": int(images.shape[0]),
        "shape": list(images.shape[1:]),
        "labels": None if dataset.labels is None else [int(v) for v in dataset.labels],
        "checksum": _sha256(images.tobytes()),
    }
    (path / "data_manifest.json").write_text(json.dumps(manifest))
    return path


def load_dataset(path):
    from pcp.transfer import Dataset

    path = Path(path)
    for name in ("data_manifest.json", "images.bin"):
        if not (path / name).is_file():
            raise FileNotFoundError(f"dataset file not found: {path / name}")
    manifest = json.loads((path / "data_manifest.json").read_text())
    raw = (path / "images.bin").read_bytes()
    if "checksum" in manifest and _sha256(raw) != manifest["checksum"]:
        raise ChecksumError(f"{path / 'images.bin'} does not match its manifest checksum")
    shape = (manifest["count"], *manifest["shape"])
    if int(np.prod(shape)) * 4 != len(raw):
        raise FormatError(f"dataset manifest declares shape {shape} but images.bin holds {len(raw) // 4} values")
    images = np.frombuffer(raw, dtype=_F32).reshape(shape).astype(np.float32)
    labels = manifest["labels"]
    return Dataset(images, None if labels is None else np.asarray(labels, dtype=np.int64),
                   domain=manifest.get("domain", "source"), name=manifest.get("name", path.name))
