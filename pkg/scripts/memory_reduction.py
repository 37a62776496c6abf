"""Per-layer load+store reduction of the extended kernels on the fixture CNN.

For each weight layer of a bit-width configuration, simulates the extended and
the baseline kernel on one evaluation image and reports memory accesses.

Usage:
    python scripts/memory_reduction.py [--config 4-4-2-2-2] [--image 0]
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from rvmix.dse import Explorer, MixedPrecisionConfig
from rvmix.io import load_idx, load_idx_images, load_model
from rvmix.kernelgen import simulate
from rvmix.qnn import QTensor, run_layer

FIXTURES = Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="4-4-2-2-2")
    ap.add_argument("--image", type=int, default=0)
    ap.add_argument("--fixtures", type=Path, default=FIXTURES)
    args = ap.parse_args(argv)

    model = load_model(args.fixtures / "mnist_cnn.json")
    model.calibrate(load_idx_images(args.fixtures / "train-images-idx3-ubyte.gz")[:400])
    data = load_idx(args.fixtures / "eval-images-idx3-ubyte.gz", args.fixtures / "eval-labels-idx1-ubyte.gz")
    ex = Explorer(model)
    cfg = MixedPrecisionConfig.parse(args.config)
    qm = ex.quantized(cfg)

    x = QTensor(data.images[args.image], model.input_params)
    reductions = []
    print(f"{'layer':<8}{'bits':>5}{'baseline':>12}{'extended':>12}{'reduction':>11}")
    for i, (spec, bits) in enumerate(zip(qm.layers, cfg.bits)):
        _, ext = simulate(ex.kernel(i, bits), x)
        _, base = simulate(ex.kernel(i, bits, baseline=True), x)
        r = 1 - ext.mem_accesses / base.mem_accesses
        reductions.append(r)
        print(f"{spec.name:<8}{bits:>5}{base.mem_accesses:>12}{ext.mem_accesses:>12}{r:>10.1%}")
        x = run_layer(x, spec)
    print(f"average reduction: {np.mean(reductions):.1%}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
