"""Per-mode cycle speedups of the extended kernels over the scalar baseline.

Prints one row per layer: baseline cycles and Mode1/Mode2/Mode3 speedups under
a cost table (default: the built-in one). Counts come from the kernel
predictions, which match the simulator exactly; ``--simulate`` runs every
kernel to confirm.

Usage:
    python scripts/speedup_table.py [--cost-table costs.json] [--simulate]
"""
from __future__ import annotations

import argparse

import numpy as np

from rvmix.kernelgen import gen_kernel, simulate
from rvmix.macunit import Mode
from rvmix.qnn import LayerSpec, QTensor, QuantParams
from rvmix.sim import CostTable

# (label, kind, weight shape, input shape, stride, padding)
LAYERS = [
    ("dense 256->16", "dense", (16, 256), (256,), 1, 0),
    ("dense 1024->32", "dense", (32, 1024), (1024,), 1, 0),
    ("conv 3x3 16->16 @6x6", "conv2d", (16, 3, 3, 16), (6, 6, 16), 1, 1),
    ("conv 5x5 32->32 @8x8", "conv2d", (32, 5, 5, 32), (8, 8, 32), 1, 2),
    ("pointwise 64->64 @4x4", "conv2d", (64, 1, 1, 64), (4, 4, 64), 1, 0),
]


def make_layer(rng, kind, wshape, stride, padding) -> LayerSpec:
    w = QTensor(rng.integers(0, 4, size=wshape), QuantParams(0.02, 1, bits=2))
    return LayerSpec(kind, QuantParams(0.05, 3), w, rng.integers(-1000, 1000, wshape[0]),
                     stride=stride, padding=padding, kernel=wshape[1] if kind != "dense" else 1)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cost-table", help="JSON cost table")
    ap.add_argument("--simulate", action="store_true", help="also run every kernel on the simulator")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    cost = CostTable.from_json(args.cost_table) if args.cost_table else CostTable()
    rng = np.random.default_rng(args.seed)
    in_params = QuantParams(0.03, 5)

    print(f"{'layer':<24}{'baseline cyc':>14}{'Mode1':>8}{'Mode2':>8}{'Mode3':>8}")
    for label, kind, wshape, in_shape, stride, padding in LAYERS:
        layer = make_layer(rng, kind, wshape, stride, padding)
        x = QTensor(rng.integers(0, 256, size=in_shape), in_params)
        bundles = [gen_kernel(layer, in_params, in_shape, baseline=True)]
        bundles += [gen_kernel(layer, in_params, in_shape, m) for m in Mode]
        cycles = [b.predicted.cycles(cost) for b in bundles]
        if args.simulate:
            for b, c in zip(bundles, cycles):
                _, rep = simulate(b, x, cost)
                assert rep.total_cycles == c, f"{b.name}: simulated {rep.total_cycles} != predicted {c}"
        base = cycles[0]
        print(f"{label:<24}{base:>14}" + "".join(f"{base / c:>7.1f}x" for c in cycles[1:]))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
