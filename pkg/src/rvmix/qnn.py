"""Affine quantization and the bit-exact integer reference for every layer kind.

All codes are unsigned. A layer's accumulator is computed exactly the way the
hardware path computes it::

    acc = bias' + sum(qA * qW) - zw * sum(qA)          (mod 2**32)
    bias' = b + N*za*zw - za * sum(qW)

then requantized to an unsigned byte. Arrays carry an optional leading batch
axis so the same code serves single images and whole evaluation sets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WEIGHT_KINDS = ("dense", "conv2d", "depthwise")
LAYER_KINDS = WEIGHT_KINDS + ("maxpool", "avgpool", "add")
ADD_LEFT_SHIFT = 20


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int = 8

    def __post_init__(self):
        if not self.scale > 0 or not math.isfinite(self.scale):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not 0 <= self.zero_point < (1 << self.bits):
            raise ValueError(f"zero point {self.zero_point} not representable in {self.bits} bits")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


@dataclass
class QTensor:
    data: np.ndarray
    params: QuantParams

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        if self.data.size and (self.data.min() < 0 or self.data.max() > self.params.qmax):
            raise ValueError(f"codes outside [0, {self.params.qmax}]")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def dequantize(self) -> np.ndarray:
        return self.params.scale * (self.data - self.params.zero_point)


def round_half_away(x):
    """Round to nearest, ties away from zero (works on scalars and arrays)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def choose_params(lo: float, hi: float, bits: int) -> QuantParams:
    """Min/max calibration. The range is widened to contain 0 so 0.0 is exact."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    qmax = (1 << bits) - 1
    if hi == lo:
        return QuantParams(1.0, 0, bits)
    scale = (hi - lo) / qmax
    if not scale > 0:  # subnormal range: every value rounds to the zero code anyway
        return QuantParams(1.0, 0, bits)
    zp = int(round_half_away(-lo / scale))
    return QuantParams(scale, min(max(zp, 0), qmax), bits)


def quantize_with(values, params: QuantParams) -> QTensor:
    v = np.asarray(values, dtype=np.float64)
    q = round_half_away(v / params.scale) + params.zero_point
    return QTensor(np.clip(q, 0, params.qmax).astype(np.int64), params)


def quantize_tensor(values, bits: int, symmetric_range: bool = False) -> QTensor:
    """Quantize a real tensor with min/max calibration.

    With ``symmetric_range`` the calibration range is [-max|v|, max|v|]. An
    all-equal tensor gets scale 1 and a zero point that maps the constant
    exactly when the constant is an integer in [-qmax, 0]; any other constant
    lands on an endpoint of the zero-widened range and is exact there too.
    """
    if bits not in (2, 4, 8):
        raise ValueError(f"bits must be 2, 4 or 8, got {bits}")
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite values in tensor")
    lo, hi = float(v.min()), float(v.max())
    if symmetric_range:
        m = max(abs(lo), abs(hi))
        lo, hi = -m, m
    qmax = (1 << bits) - 1
    if lo == hi and float(lo).is_integer() and -qmax <= lo <= 0:
        params = QuantParams(1.0, int(-lo), bits)
    else:
        # a positive or non-integer constant sits exactly on an end of the
        # zero-widened range, so it is still represented exactly
        params = choose_params(lo, hi, bits)
    return quantize_with(v, params)


# -- fixed-point requantization ------------------------------------------------

def quantize_multiplier(real: float) -> tuple[int, int]:
    """Return (m0, shift) with real ~= m0 * 2**(-31 - shift), m0 in [2**30, 2**31).

    Multipliers too small to ever produce a nonzero result collapse to (0, 0).
    """
    if real < 0 or not math.isfinite(real):
        raise ValueError(f"multiplier must be finite and non-negative, got {real}")
    if real == 0:
        return 0, 0
    mant, exp = math.frexp(real)  # real = mant * 2**exp, mant in [0.5, 1)
    m0 = int(round_half_away(mant * (1 << 31)))
    if m0 == 1 << 31:
        m0 //= 2
        exp += 1
    shift = -exp
    if shift > 31:
        return 0, 0
    if shift < -30:
        raise ValueError(f"multiplier {real} too large for the fixed-point format")
    return m0, shift


def rounding_rshift(x, total_shift: int):
    """x / 2**total_shift rounded half away from zero (exact integer arithmetic)."""
    x = np.asarray(x, dtype=np.int64) if not isinstance(x, int) else x
    if total_shift <= 0:
        return x << -total_shift
    half = 1 << (total_shift - 1)
    if isinstance(x, int):
        mag = (abs(x) + half) >> total_shift
        return -mag if x < 0 else mag
    mag = (np.abs(x) + half) >> total_shift
    return np.where(x < 0, -mag, mag)


def scale_by(acc, multiplier: tuple[int, int]):
    """Signed fixed-point product acc * m0 * 2**(-31-shift), rounded half away."""
    m0, shift = multiplier
    if isinstance(acc, (int, np.integer)):
        acc = int(acc)
        mag = (abs(acc) * m0 + (1 << (30 + shift))) >> (31 + shift)
        return -mag if acc < 0 else mag
    acc = np.asarray(acc, dtype=np.int64)
    t = 31 + shift
    mag = (np.abs(acc) * np.int64(m0) + np.int64(1 << (t - 1))) >> np.int64(t)
    return np.where(acc < 0, -mag, mag)


def requantize(acc, multiplier: tuple[int, int], out_zero_point: int, qmax: int = 255):
    """32-bit accumulator -> unsigned code in [0, qmax]."""
    v = scale_by(acc, multiplier)
    if isinstance(v, int):
        return min(max(v + out_zero_point, 0), qmax)
    return np.clip(v + out_zero_point, 0, qmax).astype(np.int64)


def wrap32(x):
    """Reinterpret as a signed 32-bit two's-complement value."""
    if isinstance(x, (int, np.integer)):
        x = int(x) & 0xFFFFFFFF
        return x - (1 << 32) if x >> 31 else x
    x = np.asarray(x, dtype=np.int64) & 0xFFFFFFFF
    return np.where(x >= 1 << 31, x - (1 << 32), x)


# -- layers --------------------------------------------------------------------

@dataclass
class LayerSpec:
    """One quantized layer.

    Weight layouts: dense (F, N); conv2d (F, K, K, C); depthwise (C, K, K).
    Activations are HWC. ``skip`` names the second operand of an ``add`` as a
    layer index (-1 is the model input).
    """

    kind: str
    out_params: Optional[QuantParams] = None
    weights: Optional[QTensor] = None
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    kernel: int = 1
    skip: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in WEIGHT_KINDS:
            if self.weights is None:
                raise ValueError(f"{self.kind} layer needs weights")
            if self.weights.params.bits not in (2, 4, 8):
                raise ValueError("weight bits must be 2, 4 or 8")
            if self.bias is None:
                self.bias = np.zeros(self.out_channels, dtype=np.int64)
            self.bias = np.asarray(self.bias, dtype=np.int64)
            if self.bias.shape != (self.out_channels,):
                raise ValueError(f"bias length {self.bias.shape} != out channels {self.out_channels}")
            if self.kind != "dense":
                self.kernel = self.weights.shape[1]

    @property
    def weight_bits(self) -> Optional[int]:
        return self.weights.params.bits if self.weights is not None else None

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        if self.kind == "dense":
            return self.weights.shape[1]
        if self.kind == "conv2d":
            return self.weights.shape[3]
        return self.weights.shape[0]

    @property
    def reduction(self) -> int:
        """Inputs summed per output value (the N of the MAC sum)."""
        if self.kind == "dense":
            return self.weights.shape[1]
        if self.kind == "conv2d":
            return int(np.prod(self.weights.shape[1:]))
        return self.kernel * self.kernel

    def flat_weights(self) -> np.ndarray:
        return self.weights.data.reshape(self.weights.shape[0], -1)

    def folded_bias(self, in_zero_point: int) -> np.ndarray:
        """bias' = b + N*za*zw - za*sum(qW), exact integers (not yet wrapped)."""
        zw = self.weights.params.zero_point
        w = self.flat_weights()
        return self.bias + self.reduction * in_zero_point * zw - in_zero_point * w.sum(axis=1)

    def multiplier(self, in_params: QuantParams) -> tuple[int, int]:
        return quantize_multiplier(in_params.scale * self.weights.params.scale / self.out_params.scale)

    def output_shape(self, in_shape: Sequence[int]) -> tuple:
        if self.kind == "dense":
            return (self.out_channels,)
        if self.kind == "add":
            return tuple(in_shape)
        h, w, c = in_shape
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"{self.kind}: window {k} does not fit input {h}x{w} with padding {p}")
        if self.kind == "conv2d":
            return (ho, wo, self.out_channels)
        return (ho, wo, c)


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.int64)
    if x.ndim == ndim:
        return x[None], True
    return x, False


def _windows(x: np.ndarray, k: int, s: int, p: int, pad_value: int) -> np.ndarray:
    """(B, H, W, C) -> (B, Ho, Wo, C, K, K) sliding windows."""
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=pad_value)
    win = sliding_window_view(x, (k, k), axis=(1, 2))
    return win[:, ::s, ::s]


def _int_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # exact: every partial sum stays far below 2**53
    return np.rint(a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)


def _accumulate(x: QTensor, layer: LayerSpec) -> tuple[np.ndarray, bool]:
    """Bias fold plus zero-point correction, wrapped to 32 bits."""
    raw, sum_a, batched = _raw(x.data, layer, x.params.zero_point)
    zw = layer.weights.params.zero_point
    # depthwise sums are already per channel; the others are shared by all filters
    corr = zw * (sum_a if layer.kind == "depthwise" else sum_a[..., None])
    return wrap32(layer.folded_bias(x.params.zero_point) + raw - corr), batched


def accumulators(x: QTensor, layer: LayerSpec) -> np.ndarray:
    """Signed 32-bit accumulators before requantization (used by tests)."""
    acc, batched = _accumulate(x, layer)
    return acc[0] if batched else acc


def _raw(data: np.ndarray, layer: LayerSpec, za: int):
    """Raw unsigned sum(qA*qW) and sum(qA) per output position."""
    if layer.kind == "dense":
        # single inputs are flat (N,) or spatial (H, W, C); batches add one axis
        x = np.asarray(data, dtype=np.int64)
        batched = x.ndim in (1, 3)
        x = x.reshape(1, -1) if batched else x.reshape(x.shape[0], -1)
        if x.shape[1] != layer.in_channels:
            raise ValueError(f"dense expects {layer.in_channels} inputs, got {x.shape[1]}")
        raw = _int_matmul(x, layer.flat_weights().T)
        return raw, x.sum(axis=1), batched
    x, batched = _batched(data, 3)
    if layer.kind == "conv2d":
        if x.shape[-1] != layer.in_channels:
            raise ValueError(f"conv2d expects {layer.in_channels} channels, got {x.shape[-1]}")
        win = _windows(x, layer.kernel, layer.stride, layer.padding, za)
        # (B, Ho, Wo, C, K, K) -> (B, Ho, Wo, K, K, C) flattened in (ky, kx, c) order
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(*win.shape[:3], -1)
        raw = _int_matmul(cols, layer.flat_weights().T)
        return raw, cols.sum(axis=-1), batched
    if layer.kind == "depthwise":
        if x.shape[-1] != layer.in_channels:
            raise ValueError(f"depthwise expects {layer.in_channels} channels, got {x.shape[-1]}")
        win = _windows(x, layer.kernel, layer.stride, layer.padding, za)
        w = layer.weights.data  # (C, K, K)
        raw = np.einsum("bhwckl,ckl->bhwc", win, w)
        # per-channel sum(qA) -> shape (B, Ho, Wo, C); broadcast handled below
        return raw, win.sum(axis=(-1, -2)), batched
    raise ValueError(f"{layer.kind} has no MAC reduction")


def dense_golden(x: QTensor, layer: LayerSpec) -> QTensor:
    return _weighted(x, layer, "dense")


def conv2d_golden(x: QTensor, layer: LayerSpec) -> QTensor:
    return _weighted(x, layer, "conv2d")


def depthwise_golden(x: QTensor, layer: LayerSpec) -> QTensor:
    return _weighted(x, layer, "depthwise")


def _weighted(x: QTensor, layer: LayerSpec, kind: str) -> QTensor:
    if layer.kind != kind:
        raise ValueError(f"expected a {kind} layer, got {layer.kind}")
    acc, batched = _accumulate(x, layer)
    out = requantize(acc, layer.multiplier(x.params), layer.out_params.zero_point,
                     layer.out_params.qmax)
    return QTensor(out[0] if batched else out, layer.out_params)


def maxpool_golden(x: QTensor, layer: LayerSpec) -> QTensor:
    data, batched = _batched(x.data, 3)
    win = _windows(data, layer.kernel, layer.stride, layer.padding, 0)
    if layer.padding:
        raise ValueError("maxpool does not support padding")
    out = win.max(axis=(-1, -2))
    return QTensor(out[0] if batched else out, x.params)


def avgpool_golden(x: QTensor, layer: LayerSpec) -> QTensor:
    if layer.padding:
        raise ValueError("avgpool does not support padding")
    data, batched = _batched(x.data, 3)
    win = _windows(data, layer.kernel, layer.stride, 0, 0)
    count = layer.kernel * layer.kernel
    acc = (win - x.params.zero_point).sum(axis=(-1, -2))
    out_p = layer.out_params or x.params
    mult = quantize_multiplier(x.params.scale / (out_p.scale * count))
    out = requantize(acc, mult, out_p.zero_point, out_p.qmax)
    return QTensor(out[0] if batched else out, out_p)


def add_golden(a: QTensor, b: QTensor, out_params: QuantParams) -> QTensor:
    """Elementwise a + b rescaled to ``out_params``."""
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    twice_max = 2 * max(a.params.scale, b.params.scale)
    ma = quantize_multiplier(a.params.scale / twice_max)
    mb = quantize_multiplier(b.params.scale / twice_max)
    mo = quantize_multiplier(twice_max / ((1 << ADD_LEFT_SHIFT) * out_params.scale))
    sa = scale_by((a.data - a.params.zero_point) << ADD_LEFT_SHIFT, ma)
    sb = scale_by((b.data - b.params.zero_point) << ADD_LEFT_SHIFT, mb)
    out = requantize(np.asarray(sa + sb, dtype=np.int64), mo, out_params.zero_point, out_params.qmax)
    return QTensor(out, out_params)


def run_layer(x: QTensor, layer: LayerSpec, outputs: Sequence[QTensor] = ()) -> QTensor:
    if layer.kind == "dense":
        return dense_golden(x, layer)
    if layer.kind == "conv2d":
        return conv2d_golden(x, layer)
    if layer.kind == "depthwise":
        return depthwise_golden(x, layer)
    if layer.kind == "maxpool":
        return maxpool_golden(x, layer)
    if layer.kind == "avgpool":
        return avgpool_golden(x, layer)
    if layer.skip is None:
        raise ValueError("add layer needs a skip index")
    other = outputs[layer.skip]
    return add_golden(x, other, layer.out_params or x.params)


@dataclass
class QuantModel:
    layers: list[LayerSpec]
    input_params: QuantParams = field(default_factory=lambda: QuantParams(1 / 255, 0))

    def forward(self, images: np.ndarray) -> QTensor:
        """Run the integer reference. ``images`` may carry a batch axis."""
        x = inp = QTensor(images, self.input_params)
        outs: list[QTensor] = []
        for layer in self.layers:
            # skip=-1 addresses the model input, which sits after all outputs
            x = run_layer(x, layer, outs + [inp])
            outs.append(x)
        return x


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """argmax along the last axis; ties resolve to the lowest index."""
    return np.argmax(logits, axis=-1)


def infer(model, image) -> int:
    """Class index for one image (argmax of the final layer's codes)."""
    if not isinstance(model, QuantModel):
        model = QuantModel(list(model))
    data = image.data if isinstance(image, QTensor) else np.asarray(image)
    logits = model.forward(data).data.reshape(-1)
    return int(argmax_lowest(logits))


def predict(model: QuantModel, images: np.ndarray, batch: int = 500) -> np.ndarray:
    preds = []
    for i in range(0, len(images), batch):
        out = model.forward(images[i:i + batch]).data
        preds.append(argmax_lowest(out.reshape(out.shape[0], -1)))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_accuracy(model, dataset, n: Optional[int] = None) -> float:
    """Top-1 accuracy on the first ``n`` samples of ``dataset`` (images, labels)."""
    images, labels = (dataset.images, dataset.labels) if hasattr(dataset, "images") else dataset
    total = len(labels)
    n = total if n is None else n
    if total == 0 or n <= 0:
        raise ValueError("accuracy needs at least one sample")
    if n > total:
        raise ValueError(f"asked for {n} samples, dataset has {total}")
    if not isinstance(model, QuantModel):
        model = QuantModel(list(model))
    preds = predict(model, np.asarray(images[:n]))
    return float(np.mean(preds == np.asarray(labels[:n])))


def with_out_params(layer: LayerSpec, params: QuantParams) -> LayerSpec:
    return replace(layer, out_params=params)
