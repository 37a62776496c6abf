"""Design-space exploration over per-layer weight bit widths.

Accuracy comes from the integer reference on an image subset; costs come from
the kernel generator's predictions (no simulation). Both are cached per
(layer, width) pair because activation ranges are calibrated once in float and
therefore do not depend on the other layers' widths.
"""
from __future__ import annotations

import itertools
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .kernelgen import KernelBundle, gen_kernel, scalar_macs, simulate
from .model import FloatModel, quantize_bias
from .qnn import (
    WEIGHT_KINDS,
    LayerSpec,
    QTensor,
    QuantModel,
    QuantParams,
    choose_params,
    evaluate_accuracy,
    quantize_tensor,
    run_layer,
)
from .sim import CostTable

WIDTHS = (8, 4, 2)
ACC_EPS = 1e-9


class InfeasibleError(ValueError):
    """No front member satisfies the accuracy-loss threshold."""


@dataclass(frozen=True)
class MixedPrecisionConfig:
    bits: tuple[int, ...]
    pinned: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        object.__setattr__(self, "pinned", frozenset(self.pinned))
        if not self.bits:
            raise ValueError("config needs at least one layer")
        if any(b not in (2, 4, 8) for b in self.bits):
            raise ValueError(f"widths must be 2, 4 or 8: {self.bits}")
        for p in self.pinned:
            if not 0 <= p < len(self.bits):
                raise ValueError(f"pinned layer {p} out of range")
            if self.bits[p] != 8:
                raise ValueError(f"pinned layer {p} must be 8-bit")

    def __str__(self) -> str:
        return "-".join(str(b) for b in self.bits)

    def __len__(self) -> int:
        return len(self.bits)

    @classmethod
    def parse(cls, text: str, pinned: Iterable[int] = ()) -> "MixedPrecisionConfig":
        try:
            bits = tuple(int(t) for t in text.strip().split("-"))
        except ValueError:
            raise ValueError(f"bad config {text!r}; expected e.g. 8-4-2-2") from None
        return cls(bits, frozenset(pinned))

    @classmethod
    def uniform(cls, n: int, bits: int = 8) -> "MixedPrecisionConfig":
        return cls((bits,) * n)


@dataclass(frozen=True)
class ParetoPoint:
    config: MixedPrecisionConfig
    accuracy: float
    mac_instr: int
    est_cycles: int
    mem_accesses: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if min(self.mac_instr, self.est_cycles, self.mem_accesses) < 0:
            raise ValueError("counts must be non-negative")


@dataclass(frozen=True)
class CostEstimate:
    mac_instr: int
    est_cycles: int
    mem_accesses: int


def enumerate_configs(n_layers: int, widths: Sequence[int] = WIDTHS,
                      pinned: Iterable[int] = ()) -> list[MixedPrecisionConfig]:
    """All width assignments; pinned layers stay at 8. Widest configs come first."""
    if n_layers < 1:
        raise ValueError("need at least one quantizable layer")
    pinned = frozenset(pinned)
    for p in pinned:
        if not 0 <= p < n_layers:
            raise ValueError(f"pinned layer {p} out of range for {n_layers} layers")
    widths = sorted(set(widths), reverse=True)
    if not widths or any(w not in (2, 4, 8) for w in widths):
        raise ValueError(f"widths must be a non-empty subset of {{2, 4, 8}}, got {widths}")
    free = [i for i in range(n_layers) if i not in pinned]
    out = []
    for combo in itertools.product(widths, repeat=len(free)):
        bits = [8] * n_layers
        for i, b in zip(free, combo):
            bits[i] = b
        out.append(MixedPrecisionConfig(tuple(bits), pinned))
    return out


def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Points not dominated in (accuracy up, mac_instr down), ordered by mac_instr.

    q dominates p when q is at least as good on both axes and better on one;
    exact ties are mutually non-dominating and all kept.
    """
    if not points:
        raise ValueError("pareto_front needs at least one point")
    order = sorted(points, key=lambda p: (p.mac_instr, -p.accuracy))
    front: list[ParetoPoint] = []
    best_smaller = -1.0  # best accuracy among strictly cheaper points
    i = 0
    while i < len(order):
        mac = order[i].mac_instr
        j = i
        while j < len(order) and order[j].mac_instr == mac:
            j += 1
        group = order[i:j]
        top = group[0].accuracy
        if top > best_smaller:
            front.extend(p for p in group if p.accuracy == top)
        best_smaller = max(best_smaller, top)
        i = j
    return front


def select(front: Sequence[ParetoPoint], max_loss: float, reference_accuracy: float) -> ParetoPoint:
    """Cheapest point whose accuracy is within ``max_loss`` of the reference."""
    feasible = [p for p in front if p.accuracy >= reference_accuracy - max_loss - ACC_EPS]
    if not feasible:
        raise InfeasibleError(
            f"no configuration within {max_loss:.4f} of reference accuracy {reference_accuracy:.4f}")
    return min(feasible, key=lambda p: (p.mac_instr, -p.accuracy))


# -- evaluation engine ------------------------------------------------------------------

@dataclass
class Explorer:
    """Caches quantized layers and kernel predictions for one calibrated model."""

    model: FloatModel
    cost_table: CostTable = field(default_factory=CostTable)
    _layers: dict = field(default_factory=dict, repr=False)
    _costs: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.model.ranges is None:
            raise ValueError("model must be calibrated before exploration")
        self._act_params, self._shapes = self._plan()

    def in_params(self, i: int) -> QuantParams:
        """Activation quantization of layer ``i``'s input."""
        return self._act_params[i]

    def in_shape(self, i: int) -> tuple:
        return self._shapes[i]

    @property
    def n_layers(self) -> int:
        return len(self.model.weight_layers)

    def _plan(self):
        """Activation params and input shape seen by every layer."""
        params = [self.model.input_params]
        shapes = [tuple(self.model.input_shape)]
        for i, fl in enumerate(self.model.layers):
            lo, hi = self.model.ranges[i]
            p = params[-1] if fl.kind == "maxpool" else choose_params(lo, hi, 8)
            shape = _out_shape(fl, shapes[-1])
            params.append(p)
            shapes.append(shape)
        return params, shapes

    def layer(self, i: int, bits: int) -> LayerSpec:
        key = (i, bits)
        if key not in self._layers:
            fl = self.model.layers[i]
            in_p, out_p = self._act_params[i], self._act_params[i + 1]
            if fl.kind in WEIGHT_KINDS:
                w = quantize_tensor(fl.weights, bits)
                k = fl.weights.shape[1] if fl.kind != "dense" else 1
                spec = LayerSpec(fl.kind, out_p, w, quantize_bias(fl.bias, in_p.scale, w.params.scale),
                                 fl.stride, fl.padding, k, name=fl.name)
            elif fl.kind == "add":
                spec = LayerSpec("add", out_p, skip=fl.skip, name=fl.name)
            else:
                spec = LayerSpec(fl.kind, out_p, stride=fl.stride, kernel=fl.kernel, name=fl.name)
            self._layers[key] = spec
        return self._layers[key]

    def quantized(self, config: MixedPrecisionConfig) -> QuantModel:
        wl = self.model.weight_layers
        if len(config) != len(wl):
            raise ValueError(f"config has {len(config)} widths, model has {len(wl)} weight layers")
        bits = dict(zip(wl, config.bits))
        layers = [self.layer(i, bits.get(i, 8)) for i in range(len(self.model.layers))]
        return QuantModel(layers, self.model.input_params)

    def kernel(self, i: int, bits: int, baseline: bool = False) -> KernelBundle:
        spec = self.layer(i, bits)
        return gen_kernel(spec, self._act_params[i], self._shapes[i], baseline=baseline)

    def layer_cost(self, i: int, bits: int, baseline: bool = False) -> CostEstimate:
        key = (i, bits, baseline)
        if key not in self._costs:
            bundle = self.kernel(i, bits, baseline)
            pred = bundle.predicted
            # the baseline issues one scalar mul per multiply-accumulate
            mac = scalar_macs(bundle.layer, bundle.out_shape) if baseline else pred.mac_instr
            self._costs[key] = CostEstimate(mac, pred.cycles(self.cost_table), pred.mem_accesses)
        return self._costs[key]

    def estimate_cost(self, config: MixedPrecisionConfig, baseline: bool = False) -> CostEstimate:
        """Summed kernel predictions; host-side pool/add layers contribute nothing."""
        wl = self.model.weight_layers
        if len(config) != len(wl):
            raise ValueError(f"config has {len(config)} widths, model has {len(wl)} weight layers")
        costs = [self.layer_cost(i, b, baseline) for i, b in zip(wl, config.bits)]
        return CostEstimate(sum(c.mac_instr for c in costs), sum(c.est_cycles for c in costs),
                            sum(c.mem_accesses for c in costs))

    def evaluate(self, config: MixedPrecisionConfig, dataset, n: Optional[int] = None,
                 simulate_layers: Sequence[int] = (), simulate_images: int = 1) -> ParetoPoint:
        qm = self.quantized(config)
        acc = evaluate_accuracy(qm, dataset, n)
        if simulate_layers:
            self.validate(qm, config, dataset, simulate_layers, simulate_images)
        c = self.estimate_cost(config)
        return ParetoPoint(config, acc, c.mac_instr, c.est_cycles, c.mem_accesses)

    def validate(self, qm: QuantModel, config, dataset, layers: Sequence[int], n_images: int = 1) -> None:
        """Run the chosen layers on the simulator and demand bit-exact agreement."""
        images = dataset.images if hasattr(dataset, "images") else dataset[0]
        wl = self.model.weight_layers
        bits = dict(zip(wl, config.bits))
        for img in images[:n_images]:
            x = QTensor(img, self.model.input_params)
            outs: list[QTensor] = []
            for i, spec in enumerate(qm.layers):
                ref = run_layer(x, spec, outs + [QTensor(img, self.model.input_params)])
                if i in layers:
                    if spec.kind not in WEIGHT_KINDS:
                        raise ValueError(f"layer {i} ({spec.kind}) has no kernel to simulate")
                    got, rep = simulate(self.kernel(i, bits[i]), x)
                    if rep.status != "halt" or not np.array_equal(got.data.reshape(-1), ref.data.reshape(-1)):
                        raise AssertionError(f"layer {i}: simulated kernel disagrees with the reference")
                outs.append(ref)
                x = ref


def _out_shape(fl, shape):
    if fl.kind == "dense":
        return (fl.weights.shape[0],)
    if fl.kind == "add":
        return shape
    h, w, c = shape
    k = fl.weights.shape[1] if fl.kind in ("conv2d", "depthwise") else fl.kernel
    ho = (h + 2 * fl.padding - k) // fl.stride + 1
    wo = (w + 2 * fl.padding - k) // fl.stride + 1
    return (ho, wo, fl.weights.shape[0] if fl.kind == "conv2d" else c)


def estimate_cost(explorer: Explorer, config: MixedPrecisionConfig) -> CostEstimate:
    return explorer.estimate_cost(config)


def evaluate_config(explorer: Explorer, config: MixedPrecisionConfig, dataset, n: Optional[int] = None,
                    simulate_layers: Sequence[int] = ()) -> ParetoPoint:
    return explorer.evaluate(config, dataset, n, simulate_layers)


_WORKER: dict = {}


def _init_worker(explorer, dataset, n):
    _WORKER.update(explorer=explorer, dataset=dataset, n=n)


def _eval_in_worker(config):
    return _WORKER["explorer"].evaluate(config, _WORKER["dataset"], _WORKER["n"])


def sweep(explorer: Explorer, configs: Sequence[MixedPrecisionConfig], dataset,
          n: Optional[int] = None, workers: int = 1, progress=None) -> list[ParetoPoint]:
    """Evaluate every config; results follow the order of ``configs``."""
    if workers <= 1:
        points = []
        for k, cfg in enumerate(configs):
            points.append(explorer.evaluate(cfg, dataset, n))
            if progress:
                progress(k + 1, len(configs), points[-1])
        return points
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(explorer, dataset, n)) as pool:
        points = []
        for k, p in enumerate(pool.map(_eval_in_worker, configs)):
            points.append(p)
            if progress:
                progress(k + 1, len(configs), p)
        return points


def stderr_progress(done: int, total: int, point: ParetoPoint) -> None:
    print(f"[{done}/{total}] {point.config}  acc={point.accuracy:.4f}  mac={point.mac_instr}",
          file=sys.stderr, flush=True)
