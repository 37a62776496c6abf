"""Model manifests, IDX datasets and report files.

Manifest schema (JSON)::

    {
      "format": "rvmix-model", "version": 1,
      "input_shape": [H, W, C], "num_classes": K,
      "input_scale": 0.00392..., "input_zero_point": 0,      # optional
      "float_accuracy": 0.97,                                 # optional
      "layers": [
        {"kind": "conv2d", "in_channels": 1, "out_channels": 4, "kernel": 2,
         "stride": 2, "padding": 0, "relu": true,
         "weights": {"offset": 0, "count": 16}, "bias": {"offset": 64, "count": 4}},
        {"kind": "dense", "in_channels": 784, "out_channels": 128, "relu": true, ...},
        {"kind": "maxpool", "kernel": 2, "stride": 2},
        {"kind": "add", "skip": 1}
      ]
    }

Offsets are byte offsets into the blob; counts are float32 elements. The blob is
raw little-endian float32. Weight order: dense (out, in), conv2d
(out, ky, kx, in), depthwise (channel, ky, kx).
"""
from __future__ import annotations

import csv
import gzip
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dse import MixedPrecisionConfig, ParetoPoint, pareto_front
from .model import FloatLayer, FloatModel
from .qnn import LAYER_KINDS, QuantParams

MANIFEST_FORMAT = "rvmix-model"
REPORT_COLUMNS = ("config", "accuracy", "mac_instr", "est_cycles", "mem_accesses", "on_front")
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class ManifestError(ValueError):
    """Base class for model-ingestion failures."""


class SchemaError(ManifestError):
    pass


class DimensionError(ManifestError):
    pass


class BlobError(ManifestError):
    pass


class DatasetError(ValueError):
    pass


class ReportError(OSError):
    pass


# -- manifests ---------------------------------------------------------------------

@dataclass
class ModelManifest:
    layers: list[dict]
    input_shape: tuple
    num_classes: int
    float_accuracy: Optional[float] = None
    input_scale: float = 1 / 255
    input_zero_point: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ModelManifest":
        if not isinstance(d, dict):
            raise SchemaError("manifest must be a JSON object")
        if d.get("format", MANIFEST_FORMAT) != MANIFEST_FORMAT:
            raise SchemaError(f"unknown manifest format {d.get('format')!r}")
        for key in ("layers", "input_shape", "num_classes"):
            if key not in d:
                raise SchemaError(f"manifest is missing {key!r}")
        layers = d["layers"]
        if not isinstance(layers, list) or not layers:
            raise SchemaError("manifest has an empty layer list")
        shape = d["input_shape"]
        if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(v, int) and v > 0 for v in shape)):
            raise SchemaError(f"input_shape must be [H, W, C] positive integers, got {shape!r}")
        nc = d["num_classes"]
        if not isinstance(nc, int) or nc < 1:
            raise SchemaError(f"num_classes must be a positive integer, got {nc!r}")
        for i, layer in enumerate(layers):
            if not isinstance(layer, dict) or layer.get("kind") not in LAYER_KINDS:
                raise SchemaError(f"layer {i}: unknown or missing kind")
        return cls(layers, tuple(shape), nc, d.get("float_accuracy"),
                   float(d.get("input_scale", 1 / 255)), int(d.get("input_zero_point", 0)))

    def to_dict(self) -> dict:
        d = {"format": MANIFEST_FORMAT, "version": 1, "input_shape": list(self.input_shape),
             "num_classes": self.num_classes, "input_scale": self.input_scale,
             "input_zero_point": self.input_zero_point, "layers": self.layers}
        if self.float_accuracy is not None:
            d["float_accuracy"] = self.float_accuracy
        return d


def _int_field(layer: dict, key: str, i: int, default=None) -> int:
    v = layer.get(key, default)
    if not isinstance(v, int) or isinstance(v, bool) or v < 0:
        raise SchemaError(f"layer {i}: field {key!r} must be a non-negative integer, got {v!r}")
    return v


def _tensor(blob: bytes, ref, count: int, i: int, what: str) -> np.ndarray:
    if not isinstance(ref, dict) or "offset" not in ref:
        raise SchemaError(f"layer {i}: {what} needs an offset")
    off = ref["offset"]
    n = ref.get("count", count)
    if not isinstance(off, int) or off < 0 or off % 4:
        raise SchemaError(f"layer {i}: {what} offset must be a non-negative multiple of 4")
    if n != count:
        raise DimensionError(f"layer {i}: {what} has {n} values, dims imply {count}")
    if off + 4 * count > len(blob):
        raise BlobError(f"layer {i}: {what} [{off}, {off + 4 * count}) runs past the blob end ({len(blob)} bytes)")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float64)


def build_model(manifest: ModelManifest, blob: bytes) -> FloatModel:
    """Validate the layer chain and slice tensors out of the blob."""
    shape = tuple(manifest.input_shape)
    layers: list[FloatLayer] = []
    shapes = []
    for i, d in enumerate(manifest.layers):
        kind = d["kind"]
        relu = bool(d.get("relu", False))
        name = str(d.get("name", f"{kind}{i}"))
        if kind == "dense":
            cin, cout = _int_field(d, "in_channels", i), _int_field(d, "out_channels", i)
            if cin != int(np.prod(shape)):
                raise DimensionError(f"layer {i}: dense expects {cin} inputs, previous layer gives {shape}")
            w = _tensor(blob, d.get("weights"), cout * cin, i, "weights").reshape(cout, cin)
            b = _tensor(blob, d.get("bias"), cout, i, "bias")
            layers.append(FloatLayer("dense", w, b, relu=relu, name=name))
            shape = (cout,)
        elif kind in ("conv2d", "depthwise"):
            if len(shape) != 3:
                raise DimensionError(f"layer {i}: {kind} needs a spatial input, got {shape}")
            cin, cout = _int_field(d, "in_channels", i), _int_field(d, "out_channels", i)
            k, s, p = _int_field(d, "kernel", i), _int_field(d, "stride", i, 1), _int_field(d, "padding", i, 0)
            if cin != shape[2]:
                raise DimensionError(f"layer {i}: {kind} expects {cin} channels, input has {shape[2]}")
            if kind == "depthwise" and cout != cin:
                raise DimensionError(f"layer {i}: depthwise supports channel multiplier 1 only")
            if k < 1 or s < 1:
                raise SchemaError(f"layer {i}: kernel and stride must be positive")
            ho, wo = (shape[0] + 2 * p - k) // s + 1, (shape[1] + 2 * p - k) // s + 1
            if ho < 1 or wo < 1:
                raise DimensionError(f"layer {i}: window does not fit {shape}")
            wshape = (cout, k, k, cin) if kind == "conv2d" else (cin, k, k)
            w = _tensor(blob, d.get("weights"), int(np.prod(wshape)), i, "weights").reshape(wshape)
            b = _tensor(blob, d.get("bias"), cout, i, "bias")
            layers.append(FloatLayer(kind, w, b, s, p, k, relu=relu, name=name))
            shape = (ho, wo, cout)
        elif kind in ("maxpool", "avgpool"):
            if len(shape) != 3:
                raise DimensionError(f"layer {i}: {kind} needs a spatial input, got {shape}")
            k = _int_field(d, "kernel", i)
            s = _int_field(d, "stride", i, k)
            ho, wo = (shape[0] - k) // s + 1, (shape[1] - k) // s + 1
            if k < 1 or s < 1 or ho < 1 or wo < 1:
                raise DimensionError(f"layer {i}: pool window {k}/{s} does not fit {shape}")
            layers.append(FloatLayer(kind, stride=s, kernel=k, relu=relu, name=name))
            shape = (ho, wo, shape[2])
        else:  # add
            skip = d.get("skip")
            if not isinstance(skip, int) or not -1 <= skip < i:
                raise SchemaError(f"layer {i}: add needs a skip index in [-1, {i - 1}]")
            other = tuple(manifest.input_shape) if skip == -1 else shapes[skip]
            if other != shape:
                raise DimensionError(f"layer {i}: add operands differ in shape ({shape} vs {other})")
            layers.append(FloatLayer("add", skip=skip, relu=relu, name=name))
        shapes.append(shape)
    if int(np.prod(shape)) != manifest.num_classes:
        raise DimensionError(f"final layer gives {shape}, manifest declares {manifest.num_classes} classes")
    params = QuantParams(manifest.input_scale, manifest.input_zero_point)
    return FloatModel(layers, tuple(manifest.input_shape), params, manifest.float_accuracy)


def load_model(manifest_path, blob_path=None) -> FloatModel:
    """Load a manifest and its float32 blob (default: manifest path with .bin)."""
    manifest_path = Path(manifest_path)
    try:
        d = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{manifest_path}: not valid JSON ({exc})") from None
    manifest = ModelManifest.from_dict(d)
    if blob_path is None:
        blob_path = manifest_path.parent / d.get("blob", manifest_path.with_suffix(".bin").name)
    blob = Path(blob_path).read_bytes()
    if len(blob) % 4:
        raise BlobError(f"{blob_path}: size {len(blob)} is not a multiple of 4 (truncated?)")
    return build_model(manifest, blob)


def save_model(model: FloatModel, manifest_path, blob_path=None, num_classes: Optional[int] = None) -> None:
    """Inverse of load_model: write manifest + blob for a FloatModel."""
    manifest_path = Path(manifest_path)
    blob_path = Path(blob_path) if blob_path else manifest_path.with_suffix(".bin")
    blob = bytearray()
    entries = []
    shape = tuple(model.input_shape)
    for layer in model.layers:
        e: dict = {"kind": layer.kind, "name": layer.name}
        if layer.relu:
            e["relu"] = True
        if layer.kind in ("dense", "conv2d", "depthwise"):
            w = np.asarray(layer.weights, dtype="<f4")
            b = np.asarray(layer.bias, dtype="<f4")
            if layer.kind == "dense":
                e.update(in_channels=int(w.shape[1]), out_channels=int(w.shape[0]))
            elif layer.kind == "conv2d":
                e.update(in_channels=int(w.shape[3]), out_channels=int(w.shape[0]))
            else:
                e.update(in_channels=int(w.shape[0]), out_channels=int(w.shape[0]))
            if layer.kind != "dense":
                e.update(kernel=int(w.shape[1]), stride=layer.stride, padding=layer.padding)
            e["weights"] = {"offset": len(blob), "count": int(w.size)}
            blob += w.tobytes()
            e["bias"] = {"offset": len(blob), "count": int(b.size)}
            blob += b.tobytes()
        elif layer.kind in ("maxpool", "avgpool"):
            e.update(kernel=layer.kernel, stride=layer.stride)
        else:
            e["skip"] = layer.skip
        entries.append(e)
    if num_classes is None:
        last = model.layers[-1]
        num_classes = int(last.weights.shape[0])
    m = ModelManifest(entries, shape, num_classes, model.float_accuracy,
                      model.input_params.scale, model.input_params.zero_point)
    d = m.to_dict()
    d["blob"] = blob_path.name
    atomic_write(blob_path, bytes(blob))
    atomic_write(manifest_path, (json.dumps(d, indent=2) + "\n").encode())


# -- IDX datasets --------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, C) uint8
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n])


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DatasetError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def parse_idx(data: bytes, expect_magic: int, what: str = "idx") -> np.ndarray:
    if len(data) < 4:
        raise DatasetError(f"{what}: file too short for an IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expect_magic:
        raise DatasetError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetError(f"{what}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(data) - header < count:
        raise DatasetError(f"{what}: truncated data ({len(data) - header} of {count} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx_images(path) -> np.ndarray:
    arr = parse_idx(_read_maybe_gzip(path), IDX_IMAGES_MAGIC, str(path))
    return arr[..., None] if arr.ndim == 3 else arr


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label pair (optionally gzip-compressed)."""
    images = load_idx_images(images_path)
    labels = parse_idx(_read_maybe_gzip(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if len(images) != len(labels):
        raise DatasetError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    return Dataset(images, labels.astype(np.int64))


def encode_idx(array: np.ndarray) -> bytes:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    return struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes()


def save_idx(path, array: np.ndarray, compress: Optional[bool] = None) -> None:
    data = encode_idx(array)
    if compress if compress is not None else str(path).endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    atomic_write(path, data)


# -- reports --------------------------------------------------------------------------

_UMASK = os.umask(0)
os.umask(_UMASK)


def atomic_write(path, data: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from None
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except OSError as exc:
        os.unlink(tmp)
        raise ReportError(f"cannot write {path}: {exc}") from None


def _point_dict(p: ParetoPoint, on_front: bool) -> dict:
    return {"config": str(p.config), "pinned": sorted(p.config.pinned), "accuracy": p.accuracy,
            "mac_instr": p.mac_instr, "est_cycles": p.est_cycles, "mem_accesses": p.mem_accesses,
            "on_front": on_front}


def render_report(points: Sequence[ParetoPoint], fmt: str = "csv") -> str:
    if not points:
        raise ValueError("report needs at least one point")
    front = {id(p) for p in pareto_front(points)}
    if fmt == "json":
        rows = [_point_dict(p, id(p) in front) for p in points]
        return json.dumps({"points": rows}, indent=2) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=";", lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for p in points:
        w.writerow([str(p.config), repr(float(p.accuracy)), p.mac_instr, p.est_cycles,
                    p.mem_accesses, int(id(p) in front)])
    return buf.getvalue()


def write_report(points: Sequence[ParetoPoint], path, fmt: Optional[str] = None) -> None:
    """Write points as CSV (``;``-separated) or JSON; format defaults from the suffix."""
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    atomic_write(path, render_report(points, fmt).encode())


def read_report(path) -> list[ParetoPoint]:
    """Parse a report written by ``write_report`` (CSV or JSON, sniffed)."""
    text = Path(path).read_text()
    try:
        if text.lstrip().startswith("{"):
            rows = json.loads(text)["points"]
            return [ParetoPoint(MixedPrecisionConfig.parse(r["config"], r.get("pinned", ())),
                                float(r["accuracy"]), int(r["mac_instr"]), int(r["est_cycles"]),
                                int(r["mem_accesses"])) for r in rows]
        reader = csv.DictReader(io.StringIO(text), delimiter=";")
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"unexpected columns {reader.fieldnames}")
        return [ParetoPoint(MixedPrecisionConfig.parse(r["config"]), float(r["accuracy"]),
                            int(r["mac_instr"]), int(r["est_cycles"]), int(r["mem_accesses"]))
                for r in reader]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed report ({exc})") from None
