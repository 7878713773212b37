"""Model and dataset definitions with stable on-disk formats.

Models are a directory holding ``manifest.json`` (diff-able metadata) plus
``weights.bin`` (little-endian raw tensor blob, sha256-checksummed). Datasets
are a directory with ``dataset.json``, a raw sample blob, and an optional
``labels.csv``. Saving the result of a load is byte-identical for canonical
files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import ConvSpec
from .errors import ConfigError, ShapeError
from .qtensor import QTensor, QuantParams, pow2_scale_for, quantize

log = logging.getLogger("winofi")

FORMAT_VERSION = 1
ENGINES = ("direct", "winograd")

_DTYPES = {"int8": "<i1", "int16": "<i2", "int64": "<i8"}


@dataclass
class ConvLayer:
    out_channels: int
    padding: int
    weights: QTensor  # (K, C, 3, 3) at the model bit width
    out_scale: float
    bias: Optional[np.ndarray] = None
    stride: int = 1
    kernel_size: int = 3

    type = "conv3x3"


@dataclass
class ReluLayer:
    type = "relu"


@dataclass
class ConstrainedReluLayer:
    """ReLU with profiled bounds baked in: out-of-range values are suppressed."""

    lo: int
    hi: int
    mode: str = "clamp"

    type = "constrained_relu"

    def __post_init__(self):
        if self.mode not in ("clamp", "zero"):
            raise ConfigError(f"unknown constrained activation mode {self.mode!r}")
        if self.lo > self.hi:
            raise ConfigError("constrained activation needs lo <= hi")


@dataclass
class FlattenLayer:
    type = "flatten"


@dataclass
class LinearLayer:
    out_features: int
    weights: QTensor  # (F, D)
    out_scale: float
    bias: Optional[np.ndarray] = None

    type = "linear"


LAYER_TYPES = {"conv3x3", "relu", "constrained_relu", "flatten", "linear"}


@dataclass
class ModelDef:
    name: str
    bit_width: int
    input_shape: tuple  # (C, H, W)
    input_scale: float
    layers: list
    engine: str = "direct"

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.engine not in ENGINES:
            raise ConfigError(f"unknown engine {self.engine!r}")

    @property
    def input_qparams(self) -> QuantParams:
        return QuantParams(self.bit_width, self.input_scale)

    def conv_layer_ids(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, ConvLayer)]

    def validate(self) -> None:
        """Check the shape chain end to end; raises ShapeError/ConfigError."""
        self.execution_plan()

    def execution_plan(self):
        """Per-layer (layer, in_shape, out_shape, ConvSpec|None), input at (C, H, W)."""
        shape = self.input_shape
        plan = []
        for i, layer in enumerate(self.layers):
            in_shape = shape
            spec = None
            if isinstance(layer, ConvLayer):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i}: conv3x3 needs (C, H, W) input, got {shape}")
                c, h, w = shape
                spec = ConvSpec(
                    in_channels=c,
                    out_channels=layer.out_channels,
                    padding=layer.padding,
                    weights=layer.weights,
                    out_qparams=QuantParams(self.bit_width, layer.out_scale),
                    bias=layer.bias,
                    kernel_size=layer.kernel_size,
                    stride=layer.stride,
                )
                oh, ow = spec.out_hw(h, w)
                shape = (layer.out_channels, oh, ow)
            elif isinstance(layer, (ReluLayer, ConstrainedReluLayer)):
                pass
            elif isinstance(layer, FlattenLayer):
                n = 1
                for d in shape:
                    n *= d
                shape = (n,)
            elif isinstance(layer, LinearLayer):
                if len(shape) != 1:
                    raise ShapeError(f"layer {i}: linear needs flat input, got {shape}")
                if layer.weights.shape != (layer.out_features, shape[0]):
                    raise ShapeError(
                        f"layer {i}: linear weights {layer.weights.shape} != "
                        f"({layer.out_features}, {shape[0]})"
                    )
                shape = (layer.out_features,)
            else:
                raise ConfigError(f"layer {i}: unsupported layer type {type(layer).__name__}")
            plan.append((layer, in_shape, shape, spec))
        return plan


# ---------------------------------------------------------------------------
# On-disk model format


def _canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _check_keys(what: str, d: dict, allowed: set, strict: bool) -> None:
    unknown = set(d) - allowed
    if unknown:
        msg = f"{what}: unknown fields {sorted(unknown)}"
        if strict:
            raise ConfigError(msg)
        log.warning("%s (ignored in lenient mode)", msg)


def save_model(model: ModelDef, path: str) -> None:
    model.validate()
    os.makedirs(path, exist_ok=True)
    tensors = {}
    arrays = {}
    w_dtype = "int8" if model.bit_width == 8 else "int16"
    layers_json = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, ConvLayer):
            wname = f"layer{i}.weight"
            arrays[wname] = (layer.weights.array, w_dtype)
            entry = {
                "type": "conv3x3",
                "out_channels": layer.out_channels,
                "padding": layer.padding,
                "stride": layer.stride,
                "kernel_size": layer.kernel_size,
                "weight": wname,
                "weight_scale": layer.weights.qparams.scale,
                "out_scale": layer.out_scale,
                "bias": None,
            }
            if layer.bias is not None:
                bname = f"layer{i}.bias"
                arrays[bname] = (layer.bias, "int64")
                entry["bias"] = bname
            layers_json.append(entry)
        elif isinstance(layer, ReluLayer):
            layers_json.append({"type": "relu"})
        elif isinstance(layer, ConstrainedReluLayer):
            layers_json.append({"type": "constrained_relu", "lo": layer.lo, "hi": layer.hi, "mode": layer.mode})
        elif isinstance(layer, FlattenLayer):
            layers_json.append({"type": "flatten"})
        elif isinstance(layer, LinearLayer):
            wname = f"layer{i}.weight"
            arrays[wname] = (layer.weights.array, w_dtype)
            entry = {
                "type": "linear",
                "out_features": layer.out_features,
                "weight": wname,
                "weight_scale": layer.weights.qparams.scale,
                "out_scale": layer.out_scale,
                "bias": None,
            }
            if layer.bias is not None:
                bname = f"layer{i}.bias"
                arrays[bname] = (layer.bias, "int64")
                entry["bias"] = bname
            layers_json.append(entry)

    blob = bytearray()
    for name in sorted(arrays):
        arr, dtype = arrays[name]
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        tensors[name] = {"dtype": dtype, "shape": list(np.asarray(arr).shape), "offset": len(blob)}
        blob.extend(raw)
    blob = bytes(blob)

    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "winofi-model",
        "name": model.name,
        "bit_width": model.bit_width,
        "engine": model.engine,
        "input": {
            "channels": model.input_shape[0],
            "height": model.input_shape[1],
            "width": model.input_shape[2],
            "scale": model.input_scale,
        },
        "layers": layers_json,
        "tensors": tensors,
        "blob": {"file": "weights.bin", "sha256": hashlib.sha256(blob).hexdigest()},
    }
    with open(os.path.join(path, "weights.bin"), "wb") as f:
        f.write(blob)
    with open(os.path.join(path, "manifest.json"), "w") as f:
        f.write(_canonical_json(manifest))


_TOP_KEYS = {"format_version", "kind", "name", "bit_width", "engine", "input", "layers", "tensors", "blob"}
_LAYER_KEYS = {
    "conv3x3": {"type", "out_channels", "padding", "stride", "kernel_size", "weight", "weight_scale", "out_scale", "bias"},
    "relu": {"type"},
    "constrained_relu": {"type", "lo", "hi", "mode"},
    "flatten": {"type"},
    "linear": {"type", "out_features", "weight", "weight_scale", "out_scale", "bias"},
}


def load_model(path: str, strict: bool = True) -> ModelDef:
    try:
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read model manifest: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"model manifest is not valid JSON: {e}") from e

    _check_keys("manifest", manifest, _TOP_KEYS, strict)
    if "format_version" not in manifest:
        raise ConfigError("model manifest is missing the mandatory format_version field")
    if manifest["format_version"] != FORMAT_VERSION:
        raise ConfigError(f"unsupported model format_version {manifest['format_version']}")

    with open(os.path.join(path, manifest["blob"]["file"]), "rb") as f:
        blob = f.read()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob"]["sha256"]:
        raise ConfigError("weights blob checksum mismatch")

    bit_width = int(manifest["bit_width"])

    def tensor(name: str) -> np.ndarray:
        meta = manifest["tensors"][name]
        dt = np.dtype(_DTYPES[meta["dtype"]])
        shape = tuple(meta["shape"])
        n = int(np.prod(shape)) if shape else 1
        off = meta["offset"]
        return np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(shape).astype(np.int64)

    layers = []
    for i, lj in enumerate(manifest["layers"]):
        ltype = lj.get("type")
        if ltype not in LAYER_TYPES:
            raise ConfigError(f"layer {i}: unsupported layer type {ltype!r}")
        _check_keys(f"layer {i}", lj, _LAYER_KEYS[ltype], strict)
        if ltype == "conv3x3":
            w = tensor(lj["weight"])
            wq = QTensor(w.shape, w, QuantParams(bit_width, lj["weight_scale"]))
            bias = tensor(lj["bias"]) if lj.get("bias") else None
            layers.append(
                ConvLayer(
                    out_channels=int(lj["out_channels"]),
                    padding=int(lj["padding"]),
                    weights=wq,
                    out_scale=lj["out_scale"],
                    bias=bias,
                    stride=int(lj.get("stride", 1)),
                    kernel_size=int(lj.get("kernel_size", 3)),
                )
            )
        elif ltype == "relu":
            layers.append(ReluLayer())
        elif ltype == "constrained_relu":
            layers.append(ConstrainedReluLayer(lo=int(lj["lo"]), hi=int(lj["hi"]), mode=lj.get("mode", "clamp")))
        elif ltype == "flatten":
            layers.append(FlattenLayer())
        elif ltype == "linear":
            w = tensor(lj["weight"])
            wq = QTensor(w.shape, w, QuantParams(bit_width, lj["weight_scale"]))
            bias = tensor(lj["bias"]) if lj.get("bias") else None
            layers.append(
                LinearLayer(
                    out_features=int(lj["out_features"]),
                    weights=wq,
                    out_scale=lj["out_scale"],
                    bias=bias,
                )
            )

    inp = manifest["input"]
    model = ModelDef(
        name=manifest["name"],
        bit_width=bit_width,
        input_shape=(inp["channels"], inp["height"], inp["width"]),
        input_scale=inp["scale"],
        layers=layers,
        engine=manifest.get("engine", "direct"),
    )
    model.validate()
    return model


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class Dataset:
    """Evaluation samples, each a (1, C, H, W) QTensor; labels optional."""

    samples: list
    labels: Optional[list] = None

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.samples):
            raise ConfigError("labels length does not match sample count")

    def __len__(self):
        return len(self.samples)


def save_dataset(ds: Dataset, path: str) -> None:
    if not ds.samples:
        raise ConfigError("refusing to save an empty dataset")
    os.makedirs(path, exist_ok=True)
    qp = ds.samples[0].qparams
    shape = ds.samples[0].shape
    dtype = "int8" if qp.bit_width == 8 else "int16"
    blob = b"".join(
        np.ascontiguousarray(s.array, dtype=_DTYPES[dtype]).tobytes() for s in ds.samples
    )
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "winofi-dataset",
        "count": len(ds.samples),
        "shape": list(shape[1:]),  # (C, H, W)
        "bit_width": qp.bit_width,
        "scale": qp.scale,
        "blob": {"file": "samples.bin", "sha256": hashlib.sha256(blob).hexdigest()},
        "labels": "labels.csv" if ds.labels is not None else None,
    }
    with open(os.path.join(path, "samples.bin"), "wb") as f:
        f.write(blob)
    if ds.labels is not None:
        with open(os.path.join(path, "labels.csv"), "w") as f:
            f.write("index,label\n")
            for i, lab in enumerate(ds.labels):
                f.write(f"{i},{lab}\n")
    with open(os.path.join(path, "dataset.json"), "w") as f:
        f.write(_canonical_json(meta))


def load_dataset(path: str, strict: bool = True) -> Dataset:
    try:
        with open(os.path.join(path, "dataset.json")) as f:
            meta = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read dataset: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"dataset.json is not valid JSON: {e}") from e
    _check_keys(
        "dataset.json",
        meta,
        {"format_version", "kind", "count", "shape", "bit_width", "scale", "blob", "labels"},
        strict,
    )
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigError("unsupported or missing dataset format_version")
    with open(os.path.join(path, meta["blob"]["file"]), "rb") as f:
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != meta["blob"]["sha256"]:
        raise ConfigError("dataset blob checksum mismatch")
    qp = QuantParams(int(meta["bit_width"]), meta["scale"])
    shape = tuple(meta["shape"])
    n = int(np.prod(shape))
    dtype = np.dtype(_DTYPES["int8" if qp.bit_width == 8 else "int16"])
    flat = np.frombuffer(blob, dtype=dtype).astype(np.int64)
    if flat.size != meta["count"] * n:
        raise ConfigError("dataset blob size does not match count * shape")
    samples = [
        QTensor((1,) + shape, flat[i * n : (i + 1) * n], qp) for i in range(meta["count"])
    ]
    labels = None
    if meta.get("labels"):
        labels = []
        with open(os.path.join(path, meta["labels"])) as f:
            next(f)
            for line in f:
                _, lab = line.strip().split(",")
                labels.append(int(lab))
    return Dataset(samples, labels)


def generate_dataset(model: ModelDef, count: int, seed: int) -> Dataset:
    """Random inputs matching the model's input spec (deterministic per seed)."""
    if count < 1:
        raise ConfigError("dataset count must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xDA7A)))
    qp = model.input_qparams
    samples = []
    for _ in range(count):
        x = rng.normal(0.0, 1.0, size=model.input_shape)
        samples.append(quantize(x.reshape((1,) + model.input_shape), qp))
    return Dataset(samples)


# ---------------------------------------------------------------------------
# Toy model generation


def _float_conv3x3(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, ww = x.shape
    xp = np.zeros((n, c, h + 2 * pad, ww + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + ww] = x
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return np.einsum("nchwyx,kcyx->nkhw", win, w)


def generate_toy_model(
    depth: int = 3,
    channels: int = 4,
    bit_width: int = 8,
    seed: int = 0,
    *,
    hw: int = 8,
    in_channels: int = 1,
    classes: int = 4,
    padding: int = 1,
    name: Optional[str] = None,
    engine: str = "direct",
) -> ModelDef:
    """Deterministic random-weight CNN: ``depth`` conv3x3+relu blocks, then
    flatten and a linear classifier head. Scales are power-of-two, calibrated
    on a small random batch so clean activations rarely saturate."""
    if depth < 1 or channels < 1 or hw < 4:
        raise ConfigError("toy model needs depth >= 1, channels >= 1, hw >= 4")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x70F)))
    cal = rng.normal(0.0, 1.0, size=(4, in_channels, hw, hw))
    input_scale = pow2_scale_for(float(np.abs(cal).max()), bit_width)
    in_qp = QuantParams(bit_width, input_scale)

    layers = []
    x = cal
    c_in = in_channels
    for d in range(depth):
        w = rng.normal(0.0, 1.0 / math.sqrt(c_in * 9), size=(channels, c_in, 3, 3))
        w_scale = pow2_scale_for(float(np.abs(w).max()), bit_width)
        y = _float_conv3x3(x, w, padding)
        out_scale = pow2_scale_for(float(np.abs(y).max()) * 1.25, bit_width)
        layers.append(
            ConvLayer(
                out_channels=channels,
                padding=padding,
                weights=quantize(w, QuantParams(bit_width, w_scale)),
                out_scale=out_scale,
            )
        )
        layers.append(ReluLayer())
        x = np.maximum(y, 0.0)
        c_in = channels
    feat = x.reshape(x.shape[0], -1)
    wl = rng.normal(0.0, 1.0 / math.sqrt(feat.shape[1]), size=(classes, feat.shape[1]))
    wl_scale = pow2_scale_for(float(np.abs(wl).max()), bit_width)
    logits = feat @ wl.T
    logit_scale = pow2_scale_for(float(np.abs(logits).max()) * 1.25, bit_width)
    layers.append(FlattenLayer())
    layers.append(
        LinearLayer(
            out_features=classes,
            weights=quantize(wl, QuantParams(bit_width, wl_scale)),
            out_scale=logit_scale,
        )
    )
    model = ModelDef(
        name=name or f"toycnn-d{depth}c{channels}-int{bit_width}-s{seed}",
        bit_width=bit_width,
        input_shape=(in_channels, hw, hw),
        input_scale=input_scale,
        layers=layers,
        engine=engine,
    )
    model.validate()
    return model


# Built-in fixtures; layer count is depth*2 (conv+relu) + flatten + linear.
BUILTIN_MODELS = {
    "toycnn-int8": dict(depth=3, channels=4, bit_width=8, seed=1001, hw=8, classes=4),
    "toycnn-int16": dict(depth=3, channels=4, bit_width=16, seed=1002, hw=8, classes=4),
    "microcnn-int16": dict(depth=3, channels=3, bit_width=16, seed=1003, hw=6, classes=4),
}


def builtin_model(name: str) -> ModelDef:
    if name not in BUILTIN_MODELS:
        raise ConfigError(f"unknown builtin model {name!r}; have {sorted(BUILTIN_MODELS)}")
    return generate_toy_model(name=name, **BUILTIN_MODELS[name])
