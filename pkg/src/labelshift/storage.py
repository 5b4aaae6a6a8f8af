"""On-disk formats for datasets and network checkpoints.

Dataset directory::

    manifest.json                 spec, scene count, dtypes, file names
    scene_00000.features.f8       H*W*d little-endian float64, row-major
    scene_00000.labels.u1         H*W uint8 (255 = ignore)
    ...

Checkpoint file::

    bytes 0..7    little-endian uint64 N, length of the header
    bytes 8..8+N  UTF-8 JSON header: networks (name, kind, dims, split_index),
                  iteration, rectification record, parameter count
    remainder     little-endian float64 parameters, network by network in
                  header order, each as W0, b0, W1, b1, ... (W row-major)
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import Discriminator
from .net import PixelNet
from .synth import DomainDataset, Scene, SceneSpec

DATASET_FORMAT = "labelshift-dataset"
CHECKPOINT_FORMAT = "labelshift-checkpoint"
VERSION = 1

_F8 = np.dtype("<f8")
_U1 = np.dtype("u1")


class FormatError(ValueError):
    """A persisted artifact is malformed or does not match what was expected."""


def _scene_names(i: int) -> tuple[str, str]:
    return f"scene_{i:05d}.features.f8", f"scene_{i:05d}.labels.u1"


def save_dataset(ds: DomainDataset, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    spec = ds.spec
    entries = []
    for i, scene in enumerate(ds):
        fname, lname = _scene_names(i)
        np.ascontiguousarray(scene.features, dtype=_F8).tofile(root / fname)
        np.ascontiguousarray(scene.labels, dtype=_U1).tofile(root / lname)
        entries.append({"features": fname, "labels": lname})
    manifest = {
        "format": DATASET_FORMAT,
        "version": VERSION,
        "spec": spec.to_dict(),
        "scene_count": len(ds),
        "height": spec.height,
        "width": spec.width,
        "num_classes": spec.num_classes,
        "feature_dim": spec.feature_dim,
        "feature_dtype": _F8.str,
        "label_dtype": _U1.str,
        "endianness": "little",
        "scenes": entries,
        "meta": ds.meta,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def _read_exact(file: Path, dtype: np.dtype, count: int, what: str) -> np.ndarray:
    if not file.exists():
        raise FormatError(f"{what}: missing file {file.name}")
    size = file.stat().st_size
    if size != count * dtype.itemsize:
        raise FormatError(f"{what}: {file.name} holds {size} bytes, "
                          f"expected {count * dtype.itemsize}")
    return np.fromfile(file, dtype=dtype, count=count)


def load_dataset(path, expect: SceneSpec | None = None) -> DomainDataset:
    """Read a dataset directory; ``expect`` additionally pins the scene geometry."""
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{root}: no manifest.json") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{root}: not a dataset manifest")
    try:
        spec = SceneSpec.from_dict(manifest["spec"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{root}: bad spec in manifest: {exc}") from exc
    for key, value in (("height", spec.height), ("width", spec.width),
                       ("num_classes", spec.num_classes), ("feature_dim", spec.feature_dim)):
        if manifest.get(key) != value:
            raise FormatError(f"{root}: manifest {key}={manifest.get(key)} "
                              f"disagrees with its spec ({value})")
    if manifest.get("feature_dtype") != _F8.str or manifest.get("label_dtype") != _U1.str:
        raise FormatError(f"{root}: unsupported dtypes")
    if expect is not None:
        for key in ("height", "width", "num_classes", "feature_dim"):
            if getattr(expect, key) != getattr(spec, key):
                raise FormatError(f"{root}: dataset {key}={getattr(spec, key)}, "
                                  f"expected {getattr(expect, key)}")
    entries = manifest.get("scenes", [])
    if len(entries) != manifest.get("scene_count"):
        raise FormatError(f"{root}: scene_count does not match the scene list")
    h, w, d = spec.height, spec.width, spec.feature_dim
    scenes = []
    for i, entry in enumerate(entries):
        what = f"scene {i}"
        feats = _read_exact(root / entry["features"], _F8, h * w * d, what)
        labels = _read_exact(root / entry["labels"], _U1, h * w, what)
        scenes.append(Scene(feats.reshape(h, w, d).astype(np.float64),
                            labels.reshape(h, w).copy()))
    return DomainDataset(scenes, spec, dict(manifest.get("meta", {})))


@dataclass
class Checkpoint:
    networks: dict[str, PixelNet]
    iteration: int = 0
    rectification: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def net(self) -> PixelNet:
        return self.networks["net"]

    @property
    def disc(self) -> Discriminator | None:
        return self.networks.get("disc")


_KINDS = {"PixelNet": PixelNet, "Discriminator": Discriminator}


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nets, blocks = [], []
    for name, net in ckpt.networks.items():
        kind = type(net).__name__
        if kind not in _KINDS:
            raise TypeError(f"cannot checkpoint a {kind}")
        nets.append({"name": name, "kind": kind, "dims": net.dims,
                     "split_index": net.split_index})
        blocks += [p.astype(_F8).ravel() for p in net.params()]
    block = np.concatenate(blocks) if blocks else np.zeros(0, _F8)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": VERSION,
        "networks": nets,
        "iteration": int(ckpt.iteration),
        "rectification": ckpt.rectification,
        "extra": ckpt.extra,
        "param_count": int(block.size),
        "dtype": _F8.str,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(block.astype(_F8).tobytes())
    return path


def _param_count(dims) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def load_checkpoint(path, expect_dims: dict[str, list[int]] | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header length")
    (n,) = struct.unpack("<Q", data[:8])
    if 8 + n > len(data):
        raise FormatError(f"{path}: header length {n} exceeds file size")
    try:
        header = json.loads(data[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header") from exc
    if header.get("format") != CHECKPOINT_FORMAT or header.get("dtype") != _F8.str:
        raise FormatError(f"{path}: not a checkpoint")
    block_bytes = len(data) - 8 - n
    expected = sum(_param_count(e["dims"]) for e in header["networks"])
    if expected != header.get("param_count") or block_bytes != expected * _F8.itemsize:
        raise FormatError(f"{path}: parameter block holds {block_bytes} bytes, "
                          f"header implies {expected * _F8.itemsize}")
    flat = np.frombuffer(data, dtype=_F8, offset=8 + n).astype(np.float64)
    nets: dict[str, PixelNet] = {}
    pos = 0
    for entry in header["networks"]:
        dims = entry["dims"]
        if expect_dims and entry["name"] in expect_dims and expect_dims[entry["name"]] != dims:
            raise FormatError(f"{path}: network {entry['name']!r} has dims {dims}, "
                              f"expected {expect_dims[entry['name']]}")
        weights, biases = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            weights.append(flat[pos:pos + a * b].reshape(a, b))
            pos += a * b
            biases.append(flat[pos:pos + b].copy())
            pos += b
        cls = _KINDS.get(entry["kind"])
        if cls is None:
            raise FormatError(f"{path}: unknown network kind {entry['kind']!r}")
        nets[entry["name"]] = cls(weights, biases, entry["split_index"])
    return Checkpoint(nets, header["iteration"], header.get("rectification"),
                      header.get("extra", {}))


def write_json(path, obj) -> Path:
    """Canonical JSON: sorted keys, fixed indentation, trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")
    os.replace(tmp, path)
    return path
