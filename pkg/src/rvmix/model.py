"""Float reference models and post-training quantization to a bit-width config."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .qnn import (
    WEIGHT_KINDS,
    LayerSpec,
    QuantModel,
    QuantParams,
    choose_params,
    quantize_tensor,
    round_half_away,
)

INPUT_PARAMS = QuantParams(1 / 255, 0)
INT32_MIN, INT32_MAX = -(1 << 31), (1 << 31) - 1


@dataclass
class FloatLayer:
    kind: str
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    kernel: int = 1
    relu: bool = False
    skip: Optional[int] = None
    name: str = ""


@dataclass
class FloatModel:
    layers: list[FloatLayer]
    input_shape: tuple
    input_params: QuantParams = INPUT_PARAMS
    float_accuracy: Optional[float] = None
    # per-layer output ranges from calibration, filled lazily
    ranges: Optional[list[tuple[float, float]]] = field(default=None, repr=False)

    @property
    def weight_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in WEIGHT_KINDS]

    def forward(self, x: np.ndarray) -> list[np.ndarray]:
        return float_forward(self.layers, x)

    def calibrate(self, images: np.ndarray) -> list[tuple[float, float]]:
        """Record min/max of every layer output on ``images`` (uint8 codes)."""
        x = self.input_params.scale * (np.asarray(images, dtype=np.float64) - self.input_params.zero_point)
        outs = self.forward(x)
        self.ranges = [(float(o.min()), float(o.max())) for o in outs]
        return self.ranges


def _windows(x, k, s, p, pad_value=0.0):
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=pad_value)
    return sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]


def float_layer(x: np.ndarray, layer: FloatLayer, outputs: Sequence[np.ndarray]) -> np.ndarray:
    """One float layer on a batch (B, ...)."""
    k = layer.kind
    if k == "dense":
        y = x.reshape(x.shape[0], -1) @ layer.weights.T + layer.bias
    elif k == "conv2d":
        win = _windows(x, layer.weights.shape[1], layer.stride, layer.padding)
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(*win.shape[:3], -1)
        y = cols @ layer.weights.reshape(layer.weights.shape[0], -1).T + layer.bias
    elif k == "depthwise":
        win = _windows(x, layer.weights.shape[1], layer.stride, layer.padding)
        y = np.einsum("bhwckl,ckl->bhwc", win, layer.weights) + layer.bias
    elif k == "maxpool":
        y = _windows(x, layer.kernel, layer.stride, 0).max(axis=(-1, -2))
    elif k == "avgpool":
        y = _windows(x, layer.kernel, layer.stride, 0).mean(axis=(-1, -2))
    elif k == "add":
        y = x + outputs[layer.skip]
    else:
        raise ValueError(f"unknown layer kind {k!r}")
    return np.maximum(y, 0.0) if layer.relu else y


def float_forward(layers: Sequence[FloatLayer], x: np.ndarray) -> list[np.ndarray]:
    """All layer outputs for a float batch (B, H, W, C)."""
    inp = x = np.asarray(x, dtype=np.float64)
    outs: list[np.ndarray] = []
    for layer in layers:
        x = float_layer(x, layer, outs + [inp])
        outs.append(x)
    return outs


def float_accuracy(model: FloatModel, images, labels) -> float:
    x = model.input_params.scale * (np.asarray(images, dtype=np.float64) - model.input_params.zero_point)
    logits = model.forward(x)[-1]
    return float(np.mean(np.argmax(logits.reshape(len(x), -1), axis=1) == np.asarray(labels)))


def quantize_bias(bias: np.ndarray, s_in: float, s_w: float) -> np.ndarray:
    q = round_half_away(np.asarray(bias, dtype=np.float64) / (s_in * s_w))
    return np.clip(q, INT32_MIN, INT32_MAX).astype(np.int64)


def quantize_model(model: FloatModel, config: Sequence[int],
                   calib_images: Optional[np.ndarray] = None) -> QuantModel:
    """Post-training quantization with one weight bit width per weight layer.

    Activations are always 8-bit; their ranges come from a float pass over the
    calibration images, so they do not depend on ``config``.
    """
    wl = model.weight_layers
    if len(config) != len(wl):
        raise ValueError(f"config has {len(config)} entries, model has {len(wl)} weight layers")
    if calib_images is not None or model.ranges is None:
        if calib_images is None:
            raise ValueError("model is not calibrated; pass calib_images")
        model.calibrate(calib_images)
    bits_of = dict(zip(wl, config))
    layers: list[LayerSpec] = []
    params = [model.input_params]  # params[i] = input params of layer i
    for i, fl in enumerate(model.layers):
        in_p = params[-1]
        lo, hi = model.ranges[i]
        if fl.kind in WEIGHT_KINDS:
            w = quantize_tensor(fl.weights, bits_of[i])
            out_p = choose_params(lo, hi, 8)
            bias = quantize_bias(fl.bias, in_p.scale, w.params.scale)
            k = fl.weights.shape[1] if fl.kind != "dense" else 1
            layers.append(LayerSpec(fl.kind, out_p, w, bias, fl.stride, fl.padding, k, name=fl.name))
        elif fl.kind == "maxpool":
            out_p = in_p
            layers.append(LayerSpec("maxpool", out_p, stride=fl.stride, kernel=fl.kernel, name=fl.name))
        elif fl.kind == "avgpool":
            out_p = choose_params(lo, hi, 8)
            layers.append(LayerSpec("avgpool", out_p, stride=fl.stride, kernel=fl.kernel, name=fl.name))
        else:
            out_p = choose_params(lo, hi, 8)
            layers.append(LayerSpec("add", out_p, skip=fl.skip, name=fl.name))
        params.append(out_p)
    return QuantModel(layers, model.input_params)
