"""Full bit-width sweep of the fixture CNN with Pareto front and selection.

Equivalent to ``rvmix explore`` on the bundled fixture, plus a table of the
front. Writes the full report when ``--output`` is given.

Usage:
    python scripts/run_dse.py [--images 1000] [--workers 4] [--max-loss 0.01] [-o dse.csv]
"""
from __future__ import annotations

import argparse
from pathlib import Path

from rvmix.dse import Explorer, MixedPrecisionConfig, enumerate_configs, pareto_front, select, sweep
from rvmix.io import load_idx, load_idx_images, load_model, write_report

FIXTURES = Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=1000)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--max-loss", type=float, default=0.01)
    ap.add_argument("--pin", default="0", help="comma-separated layers kept at 8 bits")
    ap.add_argument("-o", "--output", type=Path)
    ap.add_argument("--fixtures", type=Path, default=FIXTURES)
    args = ap.parse_args(argv)

    model = load_model(args.fixtures / "mnist_cnn.json")
    model.calibrate(load_idx_images(args.fixtures / "train-images-idx3-ubyte.gz")[:400])
    data = load_idx(args.fixtures / "eval-images-idx3-ubyte.gz", args.fixtures / "eval-labels-idx1-ubyte.gz")
    ex = Explorer(model)
    pinned = [int(p) for p in args.pin.split(",") if p.strip()]
    configs = enumerate_configs(ex.n_layers, pinned=pinned)
    points = sweep(ex, configs, data, args.images, args.workers)
    if args.output:
        write_report(points, args.output)

    all8 = MixedPrecisionConfig.uniform(ex.n_layers, 8).bits
    ref = next(p for p in points if p.config.bits == all8)
    front = pareto_front(points)
    print(f"float accuracy {model.float_accuracy:.4f}; all-8 reference {ref.accuracy:.4f}, "
          f"{ref.mac_instr} MAC instructions")
    print(f"{'config':<12}{'accuracy':>10}{'mac_instr':>11}{'reduction':>11}{'est_cycles':>12}")
    for p in front:
        print(f"{str(p.config):<12}{p.accuracy:>10.4f}{p.mac_instr:>11}"
              f"{1 - p.mac_instr / ref.mac_instr:>10.1%}{p.est_cycles:>12}")
    best = select(front, args.max_loss, ref.accuracy)
    print(f"selected at max loss {args.max_loss:g}: {best.config} "
          f"({1 - best.mac_instr / ref.mac_instr:.1%} fewer MAC instructions)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
