"""Assembly generation for quantized layers.

Every kernel is emitted from a template with the layer's constants baked in.
The extended kernels unroll the reduction fully and issue one ``nn_mac_*`` per
activation word per filter group; the baseline kernels are plain compiled-C
style byte loops using ``mul``.

Because the generated code has no data-dependent control flow, the emitter
knows how often each instruction will retire. It records that multiplicity as
it writes each line, which yields an exact prediction of the instruction class
histogram, per-region memory traffic and cycle count without simulating.

Register conventions shared by the templates::

    x8   activation pixel base          x9   weight pointer
    x10  bias pointer                   x11  output pointer
    x12  zero-point correction zw*sumA  x13  activation row stride
    x14  zw                             x15  requant rounding constant
    x16  row pointer                    x17  requant multiplier m0
    x18-x20 lane indices 1..3           x21/x22 loop counters
    x23  activation word                x24  weight word
    x25  scratch base                   x26  0x00FF00FF byte mask
    x27  running sumA                   x1   folded sumA total
    x3/x4 pixel and row advance         x5-x7, x28-x31 temporaries
"""
from __future__ import annotations

import math
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .asm import Program, assemble
from .macunit import Mode, pack_weights
from .qnn import LayerSpec, QTensor, QuantParams, wrap32
from .sim import CLASSES, CostTable, Machine, SimReport, load_image

DATA_ALIGN = 64
DATA_BASE = 0x0100_0000  # code always sits below this
SUM_CHUNK_WORDS = 128  # SWAR byte sums stay below 2**16 per half for this many words
LANE_REG = {0: "x0", 1: "x18", 2: "x19", 3: "x20"}
ROW_POOL = ("x8", "x16", "x2", "x4", "x30", "x31", "x1")  # depthwise row pointers
V, SIGN, LO, HI, C = "x5", "x6", "x7", "x28", "x29"


class KernelGenError(ValueError):
    pass


def _align(n: int, a: int = DATA_ALIGN) -> int:
    return (n + a - 1) // a * a


def _fits12(v: int) -> bool:
    return -2048 <= v <= 2047


# -- emitter -----------------------------------------------------------------

_CLASS = {"mul": "mul", "mulh": "mul", "mulhu": "mul", "mulhsu": "mul",
          "lb": "load", "lh": "load", "lw": "load", "lbu": "load", "lhu": "load",
          "sb": "store", "sh": "store", "sw": "store",
          "nn_mac_8b": "nn_mac", "nn_mac_4b": "nn_mac", "nn_mac_2b": "nn_mac",
          "nn_acc_set": "nn_acc", "nn_acc_get": "nn_acc", "jal": "jump", "jalr": "jump"}


class Emitter:
    """Collects assembly lines and the dynamic count of each one."""

    def __init__(self):
        self.lines: list[str] = []
        self.mult = 1
        self.hist: Counter = Counter()
        self.loads: Counter = Counter()
        self.stores: Counter = Counter()
        self.mac = 0
        self.row_skip_reg = "x4"
        self._labels = 0

    def emit(self, text: str, region: Optional[str] = None) -> None:
        mnem = text.split(None, 1)[0]
        cls = _CLASS.get(mnem, "alu")
        self.lines.append("    " + text)
        self.hist[cls] += self.mult
        if cls == "load":
            self.loads[region or "other"] += self.mult
        elif cls == "store":
            self.stores[region or "other"] += self.mult
        elif cls == "nn_mac":
            self.mac += self.mult

    def comment(self, text: str) -> None:
        self.lines.append(f"    # {text}")

    def li(self, rd: str, value: int) -> None:
        value = wrap32(value)
        if _fits12(value):
            self.emit(f"addi {rd}, x0, {value}")
            return
        hi = ((value + 0x800) >> 12) & 0xFFFFF
        lo = value - wrap32(hi << 12)
        self.emit(f"lui {rd}, {hi}")
        if lo:
            self.emit(f"addi {rd}, {rd}, {lo}")

    def add_imm(self, rd: str, rs: str, value: int, tmp: str = "x31") -> None:
        if value == 0 and rd == rs:
            return
        if _fits12(value):
            self.emit(f"addi {rd}, {rs}, {value}")
        else:
            self.li(tmp, value)
            self.emit(f"add {rd}, {rs}, {tmp}")

    def fresh(self, stem: str) -> str:
        self._labels += 1
        return f"{stem}{self._labels}"

    @contextmanager
    def loop(self, trips: int, counter: str):
        """Counted loop around the body emitted inside the ``with`` block."""
        if trips < 1:
            raise KernelGenError("loop needs at least one trip")
        if trips == 1:
            yield
            return
        self.li(counter, trips)
        top = self.fresh("loop")
        self.lines.append(f"{top}:")
        start = len(self.lines)
        outer = self.mult
        self.mult = outer * trips
        yield
        self.emit(f"addi {counter}, {counter}, -1")
        self.mult = outer
        body = sum(1 for l in self.lines[start:] if not l.endswith(":") and not l.lstrip().startswith("#"))
        if (body + 1) * 4 < 4000:
            self.lines.append(f"    bne {counter}, x0, {top}")
            self.hist["branch_taken"] += (trips - 1) * outer
            self.hist["branch_not_taken"] += outer
        else:  # body too long for a conditional branch: hop over a jal
            out = self.fresh("done")
            self.lines.append(f"    beq {counter}, x0, {out}")
            self.lines.append(f"    jal x0, {top}")
            self.lines.append(f"{out}:")
            self.hist["branch_not_taken"] += (trips - 1) * outer
            self.hist["jump"] += (trips - 1) * outer
            self.hist["branch_taken"] += outer

    @contextmanager
    def ptr_loop(self, trips: int, ptr: str, end: str, step: int):
        """Loop that bumps ``ptr`` by ``step`` until it equals register ``end``."""
        if trips < 1:
            raise KernelGenError("loop needs at least one trip")
        top = self.fresh("walk")
        self.lines.append(f"{top}:")
        outer = self.mult
        self.mult = outer * trips
        yield
        self.emit(f"addi {ptr}, {ptr}, {step}")
        self.mult = outer
        self.lines.append(f"    bne {ptr}, {end}, {top}")
        self.hist["branch_taken"] += (trips - 1) * outer
        self.hist["branch_not_taken"] += outer

    @property
    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


class Pointer:
    """A register addressing a region at a statically tracked offset."""

    def __init__(self, em: Emitter, reg: str, base: int, region: str):
        self.em, self.reg, self.base, self.region = em, reg, base, region
        self.cur = 0
        em.li(reg, base)

    def seek(self, off: int) -> None:
        d = off - self.cur
        if d == 0:
            return
        if _fits12(d):
            self.em.emit(f"addi {self.reg}, {self.reg}, {d}")
        else:
            self.em.li(self.reg, self.base + off)
        self.cur = off

    def at(self, off: int) -> str:
        """Operand text ``imm(reg)`` for byte offset ``off``; rebases if needed."""
        if not _fits12(off - self.cur):
            self.seek(off)
        return f"{off - self.cur}({self.reg})"

    def load(self, op: str, rd: str, off: int) -> None:
        self.em.emit(f"{op} {rd}, {self.at(off)}", self.region)

    def store(self, op: str, rs: str, off: int) -> None:
        self.em.emit(f"{op} {rs}, {self.at(off)}", self.region)


# -- layouts and bundles -------------------------------------------------------

@dataclass
class MemoryLayout:
    regions: dict[str, tuple[int, int]] = field(default_factory=dict)

    def base(self, name: str) -> int:
        return self.regions[name][0]

    def size(self, name: str) -> int:
        return self.regions[name][1]

    @classmethod
    def build(cls, sizes: dict[str, int], start: int = DATA_BASE) -> "MemoryLayout":
        lay, addr = cls(), _align(start, 0x1000)
        for name, size in sizes.items():
            lay.regions[name] = (addr, size)
            addr = _align(addr + max(size, 1))
        return lay


@dataclass
class Prediction:
    """Dynamic counts the generated code will produce when run to its halt."""

    histogram: dict
    loads_by_region: dict
    stores_by_region: dict
    mac_instr: int

    @property
    def retired(self) -> int:
        return sum(self.histogram.values())

    @property
    def loads(self) -> int:
        return sum(self.loads_by_region.values())

    @property
    def stores(self) -> int:
        return sum(self.stores_by_region.values())

    @property
    def mem_accesses(self) -> int:
        return self.loads + self.stores

    @property
    def weight_loads(self) -> int:
        return self.loads_by_region.get("weights", 0)

    @property
    def act_loads(self) -> int:
        return self.loads_by_region.get("act", 0) + self.loads_by_region.get("scratch", 0)

    def cycles(self, cost_table: Optional[CostTable] = None) -> int:
        return (cost_table or CostTable()).cycles(self.histogram)


@dataclass
class WeightImage:
    data: bytes
    groups: int
    words_per_group: int


@dataclass
class KernelBundle:
    name: str
    layer: LayerSpec
    mode: Optional[Mode]  # None for the scalar baseline
    asm: str
    layout: MemoryLayout
    images: list[tuple[int, bytes]]
    predicted: Prediction
    in_params: QuantParams
    in_shape: tuple
    out_shape: tuple

    @cached_property
    def program(self) -> Program:
        return assemble(self.asm)

    def input_image(self, x: QTensor | np.ndarray) -> bytes:
        """Activation bytes as the kernel expects them (spatially pre-padded)."""
        data = np.asarray(x.data if isinstance(x, QTensor) else x, dtype=np.int64)
        if data.size != int(np.prod(self.in_shape)):
            raise KernelGenError(f"input has {data.size} values, kernel expects shape {self.in_shape}")
        if self.layer.kind == "dense":
            flat = data.reshape(-1)
            return bytes(flat.astype(np.uint8)) + bytes(self.layout.size("act") - flat.size)
        p = self.layer.padding
        img = data.reshape(self.in_shape)
        if p:
            img = np.pad(img, ((p, p), (p, p), (0, 0)), constant_values=self.in_params.zero_point)
        return bytes(img.astype(np.uint8).reshape(-1))

    def read_output(self, machine: Machine) -> QTensor:
        n = int(np.prod(self.out_shape))
        raw = np.frombuffer(machine.read_bytes(self.layout.base("out"), n), dtype=np.uint8)
        return QTensor(raw.astype(np.int64).reshape(self.out_shape), self.layer.out_params)

    def machine(self, x, cost_table: Optional[CostTable] = None) -> Machine:
        m = Machine(cost_table)
        m.load_program(self.program)
        for name, (base, size) in self.layout.regions.items():
            m.add_region(name, base, size)
        for base, data in self.images:
            load_image(m, base, data)
        load_image(m, self.layout.base("act"), self.input_image(x))
        return m


def simulate(bundle: KernelBundle, x, cost_table: Optional[CostTable] = None,
             max_instructions: int = 200_000_000, trace=None) -> tuple[QTensor, SimReport]:
    """Run a kernel on the simulator and return (output tensor, report)."""
    m = bundle.machine(x, cost_table)
    rep = m.run(0, max_instructions, trace)
    return bundle.read_output(m), rep


# -- weight layout ---------------------------------------------------------------

def _check_mode(layer: LayerSpec, mode: Optional[Mode]) -> Mode:
    bits = layer.weight_bits
    mode = mode or Mode.from_bits(bits)
    if bits > mode.bits:
        raise KernelGenError(f"{bits}-bit weights do not fit {mode.name} ({mode.bits}-bit fields)")
    return mode


def layout_weights(mode: Mode, weights: QTensor | np.ndarray) -> WeightImage:
    """Pack a (F, N) weight matrix into ``ceil(F/G)`` groups of ``ceil(N/4)`` words.

    Group ``g`` holds filters ``g*G .. g*G+G-1``; missing filters and the tail
    of the reduction are zero-filled.
    """
    w = np.asarray(weights.data if isinstance(weights, QTensor) else weights, dtype=np.int64)
    if w.ndim != 2 or w.size == 0:
        raise KernelGenError(f"weight matrix must be non-empty 2-D, got shape {w.shape}")
    if w.max() >= 1 << mode.bits or w.min() < 0:
        raise KernelGenError(f"weight codes do not fit {mode.bits} bits")
    f, n = w.shape
    g_size = mode.filters
    groups, words = math.ceil(f / g_size), math.ceil(n / 4)
    padded = np.zeros((groups * g_size, words * 4), dtype=np.int64)
    padded[:f, :n] = w
    out = bytearray()
    for g in range(groups):
        blk = padded[g * g_size:(g + 1) * g_size]
        for k in range(words):
            vals = blk[:, 4 * k:4 * k + 4].reshape(-1)  # filter-major
            out += pack_weights(mode, vals.tolist()).value.to_bytes(4, "little")
    return WeightImage(bytes(out), groups, words)


def layout_depthwise_weights(mode: Mode, weights: QTensor | np.ndarray) -> WeightImage:
    """(C, K, K) taps -> per channel ``ceil(K*K/4)`` words using filter group 0 only."""
    w = np.asarray(weights.data if isinstance(weights, QTensor) else weights, dtype=np.int64)
    if w.ndim != 3 or w.size == 0:
        raise KernelGenError(f"depthwise weights must be (C, K, K), got {w.shape}")
    c = w.shape[0]
    taps = w.reshape(c, -1)
    img = layout_weights(mode, np.zeros((1, taps.shape[1]), dtype=np.int64))
    words = img.words_per_group
    out = bytearray()
    zeros = [0] * (mode.macs - 4)
    for ch in range(c):
        t = np.zeros(words * 4, dtype=np.int64)
        t[:taps.shape[1]] = taps[ch]
        for k in range(words):
            out += pack_weights(mode, t[4 * k:4 * k + 4].tolist() + zeros).value.to_bytes(4, "little")
    return WeightImage(bytes(out), c, words)


# -- shared code fragments -------------------------------------------------------

def _requant_setup(em: Emitter, layer: LayerSpec, in_params: QuantParams) -> tuple[int, int]:
    m0, shift = layer.multiplier(in_params)
    t = 31 + shift
    em.li("x17", m0)
    em.li("x15", 1 << (t - 33) if t - 1 >= 32 else 1 << (t - 1))
    return t, layer.out_params.zero_point


def _requant(em: Emitter, t: int, zp: int) -> None:
    """x5 (signed 32-bit accumulator) -> output code in x5, branch-free."""
    em.emit(f"srai {SIGN}, {V}, 31")
    em.emit(f"xor {V}, {V}, {SIGN}")
    em.emit(f"sub {V}, {V}, {SIGN}")
    em.emit(f"mul {LO}, {V}, x17")
    em.emit(f"mulhu {HI}, {V}, x17")
    if t - 1 >= 32:
        em.emit(f"add {HI}, {HI}, x15")
    else:
        em.emit(f"add {LO}, {LO}, x15")
        em.emit(f"sltu {C}, {LO}, x15")
        em.emit(f"add {HI}, {HI}, {C}")
    if t >= 32:
        em.emit(f"srli {V}, {HI}, {t - 32}")
    else:
        em.emit(f"srli {V}, {LO}, {t}")
        em.emit(f"slli {C}, {HI}, {32 - t}")
        em.emit(f"or {V}, {V}, {C}")
        em.emit(f"srli {C}, {HI}, {t}")  # nonzero -> magnitude needs more than 32 bits
        em.emit(f"sltu {C}, x0, {C}")
        em.emit(f"sub {C}, x0, {C}")
        em.emit(f"or {V}, {V}, {C}")
    # magnitude = min(magnitude, 1024): enough headroom for the final clamp
    em.emit(f"sltiu {C}, {V}, 1024")
    em.emit(f"sub {C}, x0, {C}")
    em.emit(f"and {V}, {V}, {C}")
    em.emit(f"xori {C}, {C}, -1")
    em.emit(f"andi {C}, {C}, 1024")
    em.emit(f"or {V}, {V}, {C}")
    em.emit(f"xor {V}, {V}, {SIGN}")
    em.emit(f"sub {V}, {V}, {SIGN}")
    if zp:
        em.emit(f"addi {V}, {V}, {zp}")
    em.emit(f"srai {C}, {V}, 31")  # clamp below at 0
    em.emit(f"xori {C}, {C}, -1")
    em.emit(f"and {V}, {V}, {C}")
    em.emit(f"sltiu {C}, {V}, 256")  # clamp above at 255
    em.emit(f"sub {C}, x0, {C}")
    em.emit(f"and {V}, {V}, {C}")
    em.emit(f"xori {C}, {C}, -1")
    em.emit(f"andi {C}, {C}, 255")
    em.emit(f"or {V}, {V}, {C}")


def _swar_sum(em: Emitter, nwords: int, load_word) -> None:
    """Sum all bytes of ``nwords`` activation words into x1.

    ``load_word(k)`` emits the load of word ``k`` into x23. Two byte lanes per
    halfword are summed in x27 and folded into x1 every chunk.
    """
    em.emit("addi x1, x0, 0")
    for start in range(0, nwords, SUM_CHUNK_WORDS):
        em.emit("addi x27, x0, 0")
        for k in range(start, min(nwords, start + SUM_CHUNK_WORDS)):
            load_word(k)
            em.emit("and x6, x23, x26")
            em.emit("srli x23, x23, 8")
            em.emit("and x23, x23, x26")
            em.emit("add x27, x27, x6")
            em.emit("add x27, x27, x23")
        em.emit("srli x6, x27, 16")
        em.emit("slli x27, x27, 16")
        em.emit("srli x27, x27, 16")
        em.emit("add x1, x1, x27")
        em.emit("add x1, x1, x6")


def _lane_setup(em: Emitter, mode: Mode) -> None:
    for lane in mode.lanes[1:]:
        em.emit(f"addi {LANE_REG[lane]}, x0, {lane}")


def _init_lanes(em: Emitter, bias: Pointer, mode: Mode, g: int, f: int) -> list[tuple[int, int]]:
    """Load bias' into each live lane of group ``g``; returns (lane, filter) pairs."""
    live = [(j, g * mode.filters + j) for j in mode.lanes if g * mode.filters + j < f]
    for j, o in live:
        bias.load("lw", V, 4 * o)
        em.emit(f"nn_acc_set {LANE_REG[j]}, {V}")
    return live


def _tails(em: Emitter, live, t: int, zp: int, correct: bool, store) -> None:
    """Read each live lane, apply the zero-point correction, requantize, store."""
    for j, o in live:
        if j:
            em.emit(f"nn_acc_get {V}, {LANE_REG[j]}")
        if correct:
            em.emit(f"sub {V}, {V}, x12")
        _requant(em, t, zp)
        store(o)


def _bias_image(layer: LayerSpec, in_params: QuantParams) -> bytes:
    b = wrap32(layer.folded_bias(in_params.zero_point)).astype(np.int64) & 0xFFFFFFFF
    return b.astype("<u4").tobytes()


def _finish(em: Emitter, name, layer, mode, layout, images, in_params, in_shape, out_shape) -> KernelBundle:
    em.hist["jump"] += 1  # the halt appended by the loader retires once
    hist = {c: int(em.hist.get(c, 0)) for c in CLASSES}
    pred = Prediction(hist, {k: int(v) for k, v in em.loads.items() if v},
                      {k: int(v) for k, v in em.stores.items() if v}, int(em.mac))
    return KernelBundle(name, layer, mode, em.text, layout, images, pred, in_params,
                        tuple(in_shape), tuple(out_shape))


# -- dense -------------------------------------------------------------------------

def gen_dense_kernel(layer: LayerSpec, in_params: QuantParams, mode: Optional[Mode] = None) -> KernelBundle:
    """Fully unrolled dense kernel: one nn_mac per activation word per filter group."""
    if layer.kind != "dense":
        raise KernelGenError(f"expected dense layer, got {layer.kind}")
    mode = _check_mode(layer, mode)
    f, n = layer.out_channels, layer.in_channels
    wimg = layout_weights(mode, layer.flat_weights())
    words = wimg.words_per_group
    zw = layer.weights.params.zero_point
    layout = MemoryLayout.build({
        "act": 4 * words, "weights": len(wimg.data), "bias": 4 * f, "out": f})

    em = Emitter()
    em.comment(f"dense {n}->{f}, {mode.name}, {wimg.groups} groups x {words} words")
    act = Pointer(em, "x8", layout.base("act"), "act")
    wp = Pointer(em, "x9", layout.base("weights"), "weights")
    bias = Pointer(em, "x10", layout.base("bias"), "bias")
    out = Pointer(em, "x11", layout.base("out"), "out")
    t, zp = _requant_setup(em, layer, in_params)
    _lane_setup(em, mode)
    if zw:
        em.li("x26", 0x00FF00FF)
        em.emit(f"addi x14, x0, {zw}")
        _swar_sum(em, words, lambda k: act.load("lw", "x23", 4 * k))
        em.emit("mul x12, x1, x14")
    for g in range(wimg.groups):
        live = _init_lanes(em, bias, mode, g, f)
        for k in range(words):
            act.load("lw", "x23", 4 * k)
            wp.load("lw", "x24", 4 * (g * words + k))
            rd = V if k == words - 1 else "x0"
            em.emit(f"{mode.mnemonic} {rd}, x23, x24")
        _tails(em, live, t, zp, bool(zw), lambda o: out.store("sb", V, o))
    images = [(layout.base("weights"), wimg.data), (layout.base("bias"), _bias_image(layer, in_params))]
    return _finish(em, f"dense_{mode.name.lower()}", layer, mode, layout, images, in_params,
                   (n,), (f,))


def gen_baseline_dense(layer: LayerSpec, in_params: QuantParams) -> KernelBundle:
    """Scalar dense kernel: byte loads, mul, add in compiled-C style loops."""
    if layer.kind != "dense":
        raise KernelGenError(f"expected dense layer, got {layer.kind}")
    f, n = layer.out_channels, layer.in_channels
    zw = layer.weights.params.zero_point
    w = layer.flat_weights().astype(np.uint8).tobytes()
    layout = MemoryLayout.build({"act": _align(n, 4), "weights": len(w), "bias": 4 * f, "out": f})
    em = Emitter()
    em.comment(f"baseline dense {n}->{f}")
    em.li("x8", layout.base("act"))
    em.li("x9", layout.base("weights"))
    em.li("x10", layout.base("bias"))
    em.li("x11", layout.base("out"))
    em.li("x30", layout.base("act") + n)  # end of activations
    t, zp = _requant_setup(em, layer, in_params)
    if zw:
        em.emit(f"addi x14, x0, {zw}")
        em.emit("addi x27, x0, 0")
        em.emit("addi x16, x8, 0")
        with em.ptr_loop(n, "x16", "x30", 1):
            em.emit("lbu x6, 0(x16)", "act")
            em.emit("add x27, x27, x6")
        em.emit("mul x12, x27, x14")
    with em.loop(f, "x22"):
        em.emit("lw x5, 0(x10)", "bias")
        em.emit("addi x16, x8, 0")
        with em.ptr_loop(n, "x16", "x30", 1):
            _scalar_mac(em, "x16")
        if zw:
            em.emit("sub x5, x5, x12")
        _requant(em, t, zp)
        em.emit("sb x5, 0(x11)", "out")
        em.emit("addi x10, x10, 4")
        em.emit("addi x11, x11, 1")
    images = [(layout.base("weights"), w), (layout.base("bias"), _bias_image(layer, in_params))]
    return _finish(em, "dense_baseline", layer, None, layout, images, in_params, (n,), (f,))


def _scalar_mac(em: Emitter, act_ptr: str) -> None:
    """x5 += byte(act_ptr) * byte(x9); x9 advances (the caller bumps act_ptr)."""
    em.emit(f"lbu x6, 0({act_ptr})", "act")
    em.emit("lbu x7, 0(x9)", "weights")
    em.emit("mul x6, x6, x7")
    em.emit("add x5, x5, x6")
    em.emit("addi x9, x9, 1")


# -- convolution ---------------------------------------------------------------------

@dataclass(frozen=True)
class ConvGeometry:
    h: int
    w: int
    c: int
    k: int
    s: int
    p: int

    @property
    def hp(self) -> int:
        return self.h + 2 * self.p

    @property
    def wp(self) -> int:
        return self.w + 2 * self.p

    @property
    def ho(self) -> int:
        return (self.hp - self.k) // self.s + 1

    @property
    def wo(self) -> int:
        return (self.wp - self.k) // self.s + 1

    @property
    def row_stride(self) -> int:
        return self.wp * self.c

    @property
    def pixel_advance(self) -> int:
        return self.s * self.c

    @property
    def row_skip(self) -> int:
        """Extra bytes from the last pixel of one output row to the next row start."""
        return self.s * self.wp * self.c - self.wo * self.s * self.c


def _geometry(layer: LayerSpec, in_shape) -> ConvGeometry:
    if len(in_shape) != 3:
        raise KernelGenError(f"{layer.kind} needs an (H, W, C) input, got {in_shape}")
    h, w, c = (int(v) for v in in_shape)
    if c != layer.in_channels:
        raise KernelGenError(f"input has {c} channels, layer expects {layer.in_channels}")
    g = ConvGeometry(h, w, c, layer.kernel, layer.stride, layer.padding)
    if g.ho < 1 or g.wo < 1:
        raise KernelGenError("kernel window does not fit the padded input")
    if g.k * g.c > 2047:
        raise KernelGenError(f"window row of {g.k * g.c} bytes exceeds the addressing range")
    return g


def _pixel_loops(em: Emitter, g: ConvGeometry, out_step: int, body) -> None:
    """Emit the output-pixel double loop around ``body``."""
    if not _fits12(g.pixel_advance):
        em.li("x3", g.pixel_advance)
    if g.row_skip and not _fits12(g.row_skip):
        em.li(em.row_skip_reg, g.row_skip)
    with em.loop(g.ho, "x22"):
        with em.loop(g.wo, "x21"):
            body()
            if out_step:
                em.emit(f"addi x11, x11, {out_step}")
            if _fits12(g.pixel_advance):
                em.emit(f"addi x8, x8, {g.pixel_advance}")
            else:
                em.emit("add x8, x8, x3")
        if g.row_skip:
            if _fits12(g.row_skip):
                em.emit(f"addi x8, x8, {g.row_skip}")
            else:
                em.emit(f"add x8, x8, {em.row_skip_reg}")


def _row_regs(em: Emitter, ky: int) -> str:
    """Row pointer for window row ``ky`` (rows are visited in order)."""
    if ky == 0:
        return "x8"
    em.emit(f"add x16, {'x8' if ky == 1 else 'x16'}, x13")
    return "x16"


def gen_conv_kernel(layer: LayerSpec, in_params: QuantParams, in_shape,
                    mode: Optional[Mode] = None) -> KernelBundle:
    """Extended conv2d kernel over a pre-padded HWC input.

    With C a multiple of 4 each window row is a run of whole activation words
    loaded straight from the input; otherwise the window is gathered byte by
    byte into a scratch buffer of packed words first.
    """
    if layer.kind != "conv2d":
        raise KernelGenError(f"expected conv2d layer, got {layer.kind}")
    mode = _check_mode(layer, mode)
    g = _geometry(layer, in_shape)
    f = layer.out_channels
    if f > 2047:
        raise KernelGenError("too many filters for one kernel")
    n = g.k * g.k * g.c
    wimg = layout_weights(mode, layer.flat_weights())
    words = wimg.words_per_group
    contiguous = g.c % 4 == 0
    rw = g.k * g.c // 4  # words per window row (contiguous path)
    zw = layer.weights.params.zero_point
    sizes = {"act": g.hp * g.wp * g.c, "weights": len(wimg.data), "bias": 4 * f,
             "out": g.ho * g.wo * f}
    if not contiguous:
        sizes["scratch"] = 4 * words
    layout = MemoryLayout.build(sizes)

    em = Emitter()
    em.comment(f"conv2d {g.k}x{g.k}/{g.s} {g.c}->{f} on {g.h}x{g.w}, {mode.name}, "
               f"{'contiguous' if contiguous else 'gather'} path")
    em.li("x8", layout.base("act"))
    wp = Pointer(em, "x9", layout.base("weights"), "weights")
    bias = Pointer(em, "x10", layout.base("bias"), "bias")
    em.li("x11", layout.base("out"))
    scratch = None if contiguous else Pointer(em, "x25", layout.base("scratch"), "scratch")
    em.li("x13", g.row_stride)
    t, zp = _requant_setup(em, layer, in_params)
    _lane_setup(em, mode)
    if zw:
        em.emit(f"addi x14, x0, {zw}")
        if contiguous:
            em.li("x26", 0x00FF00FF)

    def act_word(k: int) -> None:
        if scratch is not None:
            scratch.load("lw", "x23", 4 * k)
            return
        ky, j = divmod(k, rw)
        row = "x8" if ky == 0 else "x16"
        if j == 0 and ky:
            _row_regs(em, ky)
        em.emit(f"lw x23, {4 * j}({row})", "act")

    def gather() -> None:
        row = "x8"
        if zw:
            em.emit("addi x27, x0, 0")
        for e in range(n):
            ky, off = divmod(e, g.k * g.c)
            if off == 0 and ky:
                row = _row_regs(em, ky)
            em.emit(f"lbu x6, {off}({row})", "act")
            if zw:
                em.emit("add x27, x27, x6")
            slot = e % 4
            if slot == 0:
                em.emit("addi x23, x6, 0")
            else:
                em.emit(f"slli x6, x6, {8 * slot}")
                em.emit("or x23, x23, x6")
            if slot == 3 or e == n - 1:
                scratch.store("sw", "x23", 4 * (e // 4))
        if zw:
            em.emit("mul x12, x27, x14")

    def body() -> None:
        if contiguous and zw:
            _swar_sum(em, words, act_word)
            em.emit("mul x12, x1, x14")
        elif not contiguous:
            gather()
        for grp in range(wimg.groups):
            live = _init_lanes(em, bias, mode, grp, f)
            for k in range(words):
                act_word(k)
                wp.load("lw", "x24", 4 * (grp * words + k))
                em.emit(f"{mode.mnemonic} {V if k == words - 1 else 'x0'}, x23, x24")
            _tails(em, live, t, zp, bool(zw), lambda o: em.emit(f"sb {V}, {o}(x11)", "out"))
        # pointers must be back at their loop-entry offsets
        wp.seek(0)
        bias.seek(0)
        if scratch is not None:
            scratch.seek(0)

    _pixel_loops(em, g, f, body)
    images = [(layout.base("weights"), wimg.data), (layout.base("bias"), _bias_image(layer, in_params))]
    return _finish(em, f"conv2d_{mode.name.lower()}", layer, mode, layout, images, in_params,
                   (g.h, g.w, g.c), (g.ho, g.wo, f))


def gen_depthwise_kernel(layer: LayerSpec, in_params: QuantParams, in_shape,
                         mode: Optional[Mode] = None) -> KernelBundle:
    """Depthwise conv (channel multiplier 1).

    Each channel's K*K taps are gathered into activation words and multiplied
    against words that populate filter group 0 only, so the instruction count
    is the same in every mode.
    """
    if layer.kind != "depthwise":
        raise KernelGenError(f"expected depthwise layer, got {layer.kind}")
    mode = _check_mode(layer, mode)
    g = _geometry(layer, in_shape)
    if g.k > len(ROW_POOL):
        raise KernelGenError(f"depthwise kernel size {g.k} exceeds {len(ROW_POOL)}")
    c, n = g.c, g.k * g.k
    wimg = layout_depthwise_weights(mode, layer.weights)
    words = wimg.words_per_group
    zw = layer.weights.params.zero_point
    layout = MemoryLayout.build({"act": g.hp * g.wp * c, "weights": len(wimg.data), "bias": 4 * c,
                                 "out": g.ho * g.wo * c})
    em = Emitter()
    em.row_skip_reg = "x26"  # x4 holds a row pointer here
    em.comment(f"depthwise {g.k}x{g.k}/{g.s} x{c} on {g.h}x{g.w}, {mode.name}")
    em.li("x8", layout.base("act"))
    wp = Pointer(em, "x9", layout.base("weights"), "weights")
    bias = Pointer(em, "x10", layout.base("bias"), "bias")
    em.li("x11", layout.base("out"))
    em.li("x13", g.row_stride)
    t, zp = _requant_setup(em, layer, in_params)
    if zw:
        em.emit(f"addi x14, x0, {zw}")

    def body() -> None:
        for r in range(1, g.k):
            em.emit(f"add {ROW_POOL[r]}, {ROW_POOL[r - 1]}, x13")
        for ch in range(c):
            bias.load("lw", V, 4 * ch)
            em.emit(f"nn_acc_set x0, {V}")
            for wi in range(words):
                for slot in range(4):
                    e = 4 * wi + slot
                    if e >= n:
                        break
                    ky, kx = divmod(e, g.k)
                    em.emit(f"lbu x6, {kx * c + ch}({ROW_POOL[ky]})", "act")
                    if zw:
                        em.emit("addi x25, x6, 0" if e == 0 else "add x25, x25, x6")
                    if slot == 0:
                        em.emit("addi x23, x6, 0")
                    else:
                        em.emit(f"slli x6, x6, {8 * slot}")
                        em.emit("or x23, x23, x6")
                wp.load("lw", "x24", 4 * (ch * words + wi))
                em.emit(f"{mode.mnemonic} {V if wi == words - 1 else 'x0'}, x23, x24")
            if zw:
                em.emit("mul x12, x25, x14")
                em.emit(f"sub {V}, {V}, x12")
            _requant(em, t, zp)
            em.emit(f"sb {V}, {ch}(x11)", "out")
        wp.seek(0)
        bias.seek(0)

    _pixel_loops(em, g, c, body)
    images = [(layout.base("weights"), wimg.data), (layout.base("bias"), _bias_image(layer, in_params))]
    return _finish(em, f"depthwise_{mode.name.lower()}", layer, mode, layout, images, in_params,
                   (g.h, g.w, c), (g.ho, g.wo, c))


def gen_baseline_conv(layer: LayerSpec, in_params: QuantParams, in_shape) -> KernelBundle:
    """Scalar conv2d: per output value, a byte-wise MAC loop over each window row."""
    if layer.kind != "conv2d":
        raise KernelGenError(f"expected conv2d layer, got {layer.kind}")
    g = _geometry(layer, in_shape)
    f = layer.out_channels
    zw = layer.weights.params.zero_point
    w = layer.flat_weights().astype(np.uint8).tobytes()
    layout = MemoryLayout.build({"act": g.hp * g.wp * g.c, "weights": len(w), "bias": 4 * f,
                                 "out": g.ho * g.wo * f})
    row = g.k * g.c
    em = Emitter()
    em.comment(f"baseline conv2d {g.k}x{g.k}/{g.s} {g.c}->{f} on {g.h}x{g.w}")
    em.li("x8", layout.base("act"))
    em.li("x11", layout.base("out"))
    em.li("x13", g.row_stride)
    t, zp = _requant_setup(em, layer, in_params)
    if zw:
        em.emit(f"addi x14, x0, {zw}")

    def window_rows(inner) -> None:
        em.emit("addi x16, x8, 0")
        with em.loop(g.k, "x19"):
            em.emit("addi x2, x16, 0")
            em.emit(f"addi x30, x16, {row}")
            with em.ptr_loop(row, "x2", "x30", 1):
                inner()
            em.emit("add x16, x16, x13")

    def body() -> None:
        if zw:
            em.emit("addi x27, x0, 0")

            def acc_byte():
                em.emit("lbu x6, 0(x2)", "act")
                em.emit("add x27, x27, x6")
            window_rows(acc_byte)
            em.emit("mul x12, x27, x14")
        em.li("x9", layout.base("weights"))
        em.li("x10", layout.base("bias"))
        with em.loop(f, "x20"):
            em.emit(f"lw {V}, 0(x10)", "bias")
            window_rows(lambda: _scalar_mac(em, "x2"))
            if zw:
                em.emit(f"sub {V}, {V}, x12")
            _requant(em, t, zp)
            em.emit(f"sb {V}, 0(x11)", "out")
            em.emit("addi x11, x11, 1")
            em.emit("addi x10, x10, 4")

    _pixel_loops(em, g, 0, body)  # x11 already advances inside the filter loop
    images = [(layout.base("weights"), w), (layout.base("bias"), _bias_image(layer, in_params))]
    return _finish(em, "conv2d_baseline", layer, None, layout, images, in_params,
                   (g.h, g.w, g.c), (g.ho, g.wo, f))


# -- dispatch and closed forms ----------------------------------------------------------

def gen_kernel(layer: LayerSpec, in_params: QuantParams, in_shape, mode: Optional[Mode] = None,
               baseline: bool = False) -> KernelBundle:
    """Kernel for any weight layer; ``baseline`` selects the scalar version."""
    if layer.kind == "dense":
        return gen_baseline_dense(layer, in_params) if baseline else gen_dense_kernel(layer, in_params, mode)
    if layer.kind == "conv2d":
        if baseline:
            return gen_baseline_conv(layer, in_params, in_shape)
        return gen_conv_kernel(layer, in_params, in_shape, mode)
    if layer.kind == "depthwise":
        if baseline:
            raise KernelGenError("no scalar baseline for depthwise layers")
        return gen_depthwise_kernel(layer, in_params, in_shape, mode)
    raise KernelGenError(f"{layer.kind} layers run on the host, not as kernels")


def mac_instr_formula(kind: str, mode: Mode, *, n: int = 0, f: int = 0, c: int = 0, k: int = 1,
                      pixels: int = 1) -> int:
    """nn_mac instructions retired by the extended kernel.

    dense: ceil(F/G) * ceil(N/4); conv2d: pixels * ceil(F/G) * ceil(K*K*C/4);
    depthwise: pixels * C * ceil(K*K/4).
    """
    groups = math.ceil(f / mode.filters)
    if kind == "dense":
        return groups * math.ceil(n / 4)
    if kind == "conv2d":
        return pixels * groups * math.ceil(k * k * c / 4)
    if kind == "depthwise":
        return pixels * c * math.ceil(k * k / 4)
    raise ValueError(kind)


def scalar_macs(layer: LayerSpec, out_shape) -> int:
    """Multiply-accumulates in a layer: one scalar mul each in the baseline."""
    return layer.reduction * int(np.prod(out_shape))


def act_load_formula(kind: str, mode: Mode, *, n: int = 0, f: int = 0, c: int = 0, k: int = 1,
                     pixels: int = 1, zero_point_correction: bool = True) -> int:
    """Activation-side loads of the extended kernel (input plus scratch)."""
    groups = math.ceil(f / mode.filters)
    if kind == "dense":
        words = math.ceil(n / 4)
        return words * (groups + zero_point_correction)
    if kind == "conv2d":
        words = math.ceil(k * k * c / 4)
        if c % 4 == 0:
            return pixels * words * (groups + zero_point_correction)
        return pixels * (k * k * c + groups * words)
    if kind == "depthwise":
        return pixels * c * k * k
    raise ValueError(kind)
