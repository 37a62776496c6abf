"""Command-line interface: quantize, explore, run, report.

Exit codes: 0 success, 1 validation error, 2 simulation fault.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .asm import AsmError, assemble
from .dse import (
    Explorer,
    InfeasibleError,
    MixedPrecisionConfig,
    enumerate_configs,
    pareto_front,
    select,
    stderr_progress,
    sweep,
)
from .io import (
    DatasetError,
    ManifestError,
    ReportError,
    atomic_write,
    load_idx,
    load_idx_images,
    load_model,
    read_report,
    render_report,
    write_report,
)
from .kernelgen import KernelGenError, gen_kernel, simulate
from .macunit import Mode
from .qnn import QTensor, evaluate_accuracy, run_layer
from .sim import CostTable, Machine, SimulationFault, trace_writer

EXIT_OK, EXIT_INVALID, EXIT_FAULT = 0, 1, 2


class SimulationBudgetError(RuntimeError):
    pass


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()] if text else []


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model manifest (JSON)")
    p.add_argument("--blob", help="float32 blob (default: taken from the manifest)")
    p.add_argument("--idx-images", help="evaluation images (IDX, optionally gzipped)")
    p.add_argument("--idx-labels", help="evaluation labels (IDX)")
    p.add_argument("--calib-images", help="calibration images (IDX); defaults to the evaluation images")
    p.add_argument("--calib", type=int, default=400, help="number of calibration images")


def _load(args, need_data: bool = True):
    model = load_model(args.model, args.blob)
    data = None
    if args.idx_images and args.idx_labels:
        data = load_idx(args.idx_images, args.idx_labels)
    elif need_data:
        raise DatasetError("--idx-images and --idx-labels are required")
    if args.calib_images:
        calib = load_idx_images(args.calib_images)
    elif data is not None:
        print("warning: calibrating on evaluation images", file=sys.stderr)
        calib = data.images
    else:
        raise DatasetError("need --calib-images or an evaluation set for calibration")
    model.calibrate(calib[:args.calib])
    return model, data


def cmd_quantize(args) -> int:
    model, data = _load(args, need_data=False)
    ex = Explorer(model)
    n = len(model.weight_layers)
    config = MixedPrecisionConfig.parse(args.config) if args.config else MixedPrecisionConfig.uniform(n)
    qm = ex.quantized(config)
    layers = []
    for i, spec in enumerate(qm.layers):
        entry = {"index": i, "kind": spec.kind, "name": spec.name,
                 "out_scale": spec.out_params.scale, "out_zero_point": spec.out_params.zero_point}
        if spec.weights is not None:
            m0, shift = spec.multiplier(ex.in_params(i))
            entry.update(weight_bits=spec.weight_bits, weight_scale=spec.weights.params.scale,
                         weight_zero_point=spec.weights.params.zero_point, m0=m0, shift=shift)
        layers.append(entry)
    cost = ex.estimate_cost(config)
    out = {"config": str(config), "layers": layers, "mac_instr": cost.mac_instr,
           "est_cycles": cost.est_cycles, "mem_accesses": cost.mem_accesses}
    if data is not None:
        out["accuracy"] = evaluate_accuracy(qm, data, min(args.images, len(data)))
    text = json.dumps(out, indent=2) + "\n"
    if args.output:
        atomic_write(args.output, text.encode())
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_explore(args) -> int:
    model, data = _load(args)
    ex = Explorer(model)
    n_images = min(args.images, len(data))
    configs = enumerate_configs(ex.n_layers, _int_list(args.widths), _int_list(args.pin))
    print(f"evaluating {len(configs)} configurations on {n_images} images", file=sys.stderr)
    points = sweep(ex, configs, data, n_images, args.workers, stderr_progress)
    ref_cfg = MixedPrecisionConfig.uniform(ex.n_layers, 8)
    ref = next((p for p in points if p.config.bits == ref_cfg.bits), None)
    if ref is None:
        ref = ex.evaluate(ref_cfg, data, n_images)
    front = pareto_front(points)
    if args.output:
        write_report(points, args.output, args.format)
    best = select(front, args.max_loss, ref.accuracy)
    summary = {"reference": {"config": str(ref.config), "accuracy": ref.accuracy, "mac_instr": ref.mac_instr},
               "selected": {"config": str(best.config), "accuracy": best.accuracy,
                            "mac_instr": best.mac_instr,
                            "mac_reduction": 1 - best.mac_instr / ref.mac_instr},
               "front": [str(p.config) for p in front]}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _trace(args):
    if not args.trace:
        return None, None
    fh = sys.stderr if args.trace == "-" else open(args.trace, "w")
    return trace_writer(fh), fh


def _finish_run(rep) -> None:
    if rep.status != "halt":
        raise SimulationBudgetError(f"instruction budget exhausted after {rep.retired} instructions")


def cmd_run(args) -> int:
    cost = CostTable.from_json(args.cost_table) if args.cost_table else CostTable()
    tracer, fh = _trace(args)
    try:
        if args.asm:
            program = assemble(Path(args.asm).read_text())
            m = Machine(cost)
            entry = m.load_program(program)
            rep = m.run(entry, args.max_instructions, tracer)
            _finish_run(rep)
            out = rep.to_dict()
            out["registers"] = {f"x{i}": v for i, v in enumerate(m.regs) if v}
            print(json.dumps(out, indent=2))
            return EXIT_OK
        if not args.model or args.layer is None:
            raise ValueError("run needs --asm, or --model with --layer")
        model, data = _load(args, need_data=False)
        ex = Explorer(model)
        wl = model.weight_layers
        if args.layer not in wl:
            raise ValueError(f"layer {args.layer} is not a weight layer (choose from {wl})")
        config = (MixedPrecisionConfig.parse(args.config) if args.config
                  else MixedPrecisionConfig.uniform(len(wl)))
        bits = dict(zip(wl, config.bits))
        qm = ex.quantized(config)
        mode = Mode.from_bits(args.mode) if args.mode else None
        spec = qm.layers[args.layer]
        if mode is not None and spec.weight_bits > mode.bits:
            raise ValueError(f"{spec.weight_bits}-bit layer cannot run in {mode.name}")
        bundle = gen_kernel(spec, ex.in_params(args.layer), ex.in_shape(args.layer), mode, args.baseline)
        if data is not None:
            img = data.images[args.image]
        else:
            img = load_idx_images(args.calib_images)[args.image]
        x = QTensor(img, model.input_params)
        outs = []
        for i, layer in enumerate(qm.layers[:args.layer]):
            x = run_layer(x, layer, outs + [QTensor(img, model.input_params)])
            outs.append(x)
        got, rep = simulate(bundle, x, cost, args.max_instructions, tracer)
        _finish_run(rep)
        ref = run_layer(x, spec, outs + [QTensor(img, model.input_params)])
        match = bool(np.array_equal(got.data.reshape(-1), ref.data.reshape(-1)))
        pred = bundle.predicted
        out = {"kernel": bundle.name, "layer": args.layer, "weight_bits": bits[args.layer],
               "bit_exact": match, "report": rep.to_dict(),
               "predicted": {"mac_instr": pred.mac_instr, "weight_loads": pred.weight_loads,
                             "act_loads": pred.act_loads, "est_cycles": pred.cycles(cost)}}
        print(json.dumps(out, indent=2))
        if args.emit_asm:
            atomic_write(args.emit_asm, bundle.asm.encode())
        return EXIT_OK if match else EXIT_FAULT
    finally:
        if fh is not None and fh is not sys.stderr:
            fh.close()


def cmd_report(args) -> int:
    points = read_report(args.input)
    if args.front_only:
        points = pareto_front(points)
    if args.output:
        write_report(points, args.output, args.format)
    else:
        sys.stdout.write(render_report(points, args.format or "csv"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rvmix", description="Mixed-precision MAC extension toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize a model at one bit-width config")
    _add_model_args(q)
    q.add_argument("--config", help="per-layer widths, e.g. 8-4-2-2 (default all 8)")
    q.add_argument("--images", type=int, default=1000, help="evaluation images")
    q.add_argument("-o", "--output", help="write the summary JSON here")
    q.set_defaults(func=cmd_quantize)

    e = sub.add_parser("explore", help="sweep bit-width configs and extract the Pareto front")
    _add_model_args(e)
    e.add_argument("--max-loss", type=float, default=0.01, help="accuracy loss threshold (fraction)")
    e.add_argument("--pin", default="0", help="comma-separated layers kept at 8 bits ('' for none)")
    e.add_argument("--images", type=int, default=1000, help="evaluation images")
    e.add_argument("--widths", default="2,4,8", help="candidate widths")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("-o", "--output", help="report file (.csv or .json)")
    e.add_argument("--format", choices=("csv", "json"))
    e.set_defaults(func=cmd_explore)

    r = sub.add_parser("run", help="assemble and simulate a program or one model layer")
    r.add_argument("--asm", help="assembly file to run")
    r.add_argument("--model", help="model manifest (JSON)")
    r.add_argument("--blob")
    r.add_argument("--idx-images")
    r.add_argument("--idx-labels")
    r.add_argument("--calib-images")
    r.add_argument("--calib", type=int, default=400)
    r.add_argument("--layer", type=int, help="weight layer index to simulate")
    r.add_argument("--config", help="per-layer widths (default all 8)")
    r.add_argument("--mode", type=int, choices=(8, 4, 2), help="force a MAC mode by field width")
    r.add_argument("--baseline", action="store_true", help="use the scalar baseline kernel")
    r.add_argument("--image", type=int, default=0, help="image index fed to the model")
    r.add_argument("--cost-table", help="JSON cost table")
    r.add_argument("--trace", help="write an instruction trace to this file ('-' for stderr)")
    r.add_argument("--max-instructions", type=int, default=200_000_000)
    r.add_argument("--emit-asm", help="also write the generated kernel source here")
    r.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="re-emit a saved report as CSV or JSON")
    p.add_argument("input", help="report written by explore")
    p.add_argument("-o", "--output")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--front-only", action="store_true")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SimulationFault, SimulationBudgetError) as exc:
        print(f"simulation fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except (ManifestError, DatasetError, AsmError, KernelGenError, InfeasibleError, ReportError,
            ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    raise SystemExit(main())
