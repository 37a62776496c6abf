"""Instruction-level RV32IM simulator with the mixed-precision MAC unit attached.

Timing is a per-class cost table; there is no pipeline model. Every retired
instruction adds exactly the cost of its class, so
``total_cycles == sum(hist[c] * cost[c])`` always holds.

Halt convention: ``jal x0, 0`` (a jump to itself) retires once and stops.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, TextIO

from .asm import Program
from .isa import IllegalInstruction, Instruction, decode, encode, format_instruction
from .macunit import MASK32, MacUnitState, mac_step_raw

PAGE_BITS = 12
PAGE_SIZE = 1 << PAGE_BITS

HALT_WORD = encode(Instruction("jal", imm=0))

CLASSES = (
    "alu", "mul", "load", "store", "branch_taken", "branch_not_taken",
    "jump", "nn_mac", "nn_acc",
)


class SimulationFault(RuntimeError):
    """Illegal instruction, misaligned access or similar; the machine halts."""

    def __init__(self, pc: int, message: str):
        self.pc = pc
        super().__init__(f"pc=0x{pc:08x}: {message}")


@dataclass(frozen=True)
class CostTable:
    alu: int = 1
    mul: int = 1
    load: int = 2
    store: int = 2
    branch_taken: int = 2
    branch_not_taken: int = 1
    jump: int = 2
    nn_mac: int = 1
    nn_acc: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"cost {f.name}={v!r} must be an integer >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "CostTable":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        missing = names - set(d)
        if unknown or missing:
            raise ValueError(f"cost table keys: unknown {sorted(unknown)}, missing {sorted(missing)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "CostTable":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def cycles(self, histogram: dict) -> int:
        return sum(getattr(self, c) * n for c, n in histogram.items())


@dataclass
class SimReport:
    total_cycles: int = 0
    loads: int = 0
    stores: int = 0
    retired: int = 0
    mac_instr_count: int = 0
    instr_histogram: dict = field(default_factory=lambda: dict.fromkeys(CLASSES, 0))
    loads_by_region: dict = field(default_factory=dict)
    stores_by_region: dict = field(default_factory=dict)
    status: str = "running"  # running | halt | budget

    @property
    def mem_accesses(self) -> int:
        return self.loads + self.stores

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mem_accesses"] = self.mem_accesses
        return d


@dataclass(frozen=True)
class TraceEvent:
    pc: int
    text: str
    cycles: int

    def __str__(self) -> str:
        return f"{self.pc:08x}  {self.text:<32}  {self.cycles}"


class SparseMemory:
    """Byte-addressable 32-bit address space backed by 4 KiB pages."""

    def __init__(self):
        self.pages: dict[int, bytearray] = {}

    def _page(self, addr: int) -> bytearray:
        p = self.pages.get(addr >> PAGE_BITS)
        if p is None:
            p = self.pages[addr >> PAGE_BITS] = bytearray(PAGE_SIZE)
        return p

    def write(self, addr: int, data: bytes) -> None:
        if addr < 0 or addr + len(data) > (1 << 32):
            raise ValueError(f"write of {len(data)} bytes at 0x{addr:x} leaves the address space")
        off = 0
        while off < len(data):
            a = addr + off
            p = self._page(a)
            start = a & (PAGE_SIZE - 1)
            n = min(PAGE_SIZE - start, len(data) - off)
            p[start:start + n] = data[off:off + n]
            off += n

    def read(self, addr: int, n: int) -> bytes:
        out = bytearray()
        while n > 0:
            p = self.pages.get(addr >> PAGE_BITS)
            start = addr & (PAGE_SIZE - 1)
            k = min(PAGE_SIZE - start, n)
            out += p[start:start + k] if p is not None else bytes(k)
            addr += k
            n -= k
        return bytes(out)

    def load(self, addr: int, size: int) -> int:
        p = self.pages.get(addr >> PAGE_BITS)
        if p is None:
            return 0
        o = addr & (PAGE_SIZE - 1)
        if size == 1:
            return p[o]
        if o + size <= PAGE_SIZE:
            return int.from_bytes(p[o:o + size], "little")
        return int.from_bytes(self.read(addr, size), "little")

    def store(self, addr: int, size: int, value: int) -> None:
        p = self._page(addr)
        o = addr & (PAGE_SIZE - 1)
        if size == 1:
            p[o] = value & 0xFF
        elif o + size <= PAGE_SIZE:
            p[o:o + size] = (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
        else:
            self.write(addr, (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little"))


def _s32(v: int) -> int:
    return v - (1 << 32) if v & 0x80000000 else v


_CLASS_OF = {}
for _m in ("lui", "auipc", "addi", "slti", "sltiu", "xori", "ori", "andi", "slli", "srli",
           "srai", "add", "sub", "sll", "slt", "sltu", "xor", "srl", "sra", "or", "and"):
    _CLASS_OF[_m] = "alu"
for _m in ("mul", "mulh", "mulhsu", "mulhu", "div", "divu", "rem", "remu"):
    _CLASS_OF[_m] = "mul"
for _m in ("lb", "lh", "lw", "lbu", "lhu"):
    _CLASS_OF[_m] = "load"
for _m in ("sb", "sh", "sw"):
    _CLASS_OF[_m] = "store"
for _m in ("beq", "bne", "blt", "bge", "bltu", "bgeu"):
    _CLASS_OF[_m] = "branch"
_CLASS_OF.update(jal="jump", jalr="jump", nn_mac_8b="nn_mac", nn_mac_4b="nn_mac",
                 nn_mac_2b="nn_mac", nn_acc_get="nn_acc", nn_acc_set="nn_acc")

_LOAD_SPEC = {"lb": (1, True), "lh": (2, True), "lw": (4, False), "lbu": (1, False),
              "lhu": (2, False)}
_STORE_SIZE = {"sb": 1, "sh": 2, "sw": 4}
_MAC_BITS = {"nn_mac_8b": 8, "nn_mac_4b": 4, "nn_mac_2b": 2}


def _alu(m: str, a: int, b: int) -> int:
    """Register-register / register-immediate ALU and M-extension ops on u32 values."""
    if m == "add":
        return (a + b) & MASK32
    if m == "sub":
        return (a - b) & MASK32
    if m == "sll":
        return (a << (b & 31)) & MASK32
    if m == "slt":
        return int(_s32(a) < _s32(b))
    if m == "sltu":
        return int(a < b)
    if m == "xor":
        return a ^ b
    if m == "srl":
        return a >> (b & 31)
    if m == "sra":
        return (_s32(a) >> (b & 31)) & MASK32
    if m == "or":
        return a | b
    if m == "and":
        return a & b
    if m == "mul":
        return (a * b) & MASK32
    if m == "mulh":
        return ((_s32(a) * _s32(b)) >> 32) & MASK32
    if m == "mulhsu":
        return ((_s32(a) * b) >> 32) & MASK32
    if m == "mulhu":
        return (a * b) >> 32
    if m in ("div", "rem"):
        sa, sb = _s32(a), _s32(b)
        if sb == 0:
            return MASK32 if m == "div" else a
        if sa == -(1 << 31) and sb == -1:
            return a if m == "div" else 0
        q = abs(sa) // abs(sb)
        if (sa < 0) != (sb < 0):
            q = -q
        return (q if m == "div" else sa - q * sb) & MASK32
    if m == "divu":
        return MASK32 if b == 0 else a // b
    if m == "remu":
        return a if b == 0 else a % b
    raise AssertionError(m)


_IMM_ALU = {"addi": "add", "slti": "slt", "sltiu": "sltu", "xori": "xor", "ori": "or",
            "andi": "and", "slli": "sll", "srli": "srl", "srai": "sra"}


class Machine:
    def __init__(self, cost_table: Optional[CostTable] = None):
        self.pc = 0
        self.regs = [0] * 32
        self.mem = SparseMemory()
        self.acc = [0, 0, 0, 0]
        self.cost = cost_table or CostTable()
        self.regions: list[tuple[str, int, int]] = []
        self.report = SimReport()
        self._decoded: dict[int, tuple] = {}

    # -- state access ------------------------------------------------------
    @property
    def mac(self) -> MacUnitState:
        return MacUnitState(tuple(self.acc))

    @mac.setter
    def mac(self, state: MacUnitState) -> None:
        self.acc = [v & MASK32 for v in state.acc]

    def add_region(self, name: str, base: int, size: int) -> None:
        """Attribute loads/stores in [base, base+size) to ``name`` in the report."""
        self.regions.append((name, base, base + size))

    def region_of(self, addr: int) -> str:
        for name, lo, hi in self.regions:
            if lo <= addr < hi:
                return name
        return "other"

    def load_program(self, program: Program, base: int = 0) -> int:
        """Write the program plus a trailing halt; returns the entry address."""
        end = base
        for addr, instr in program.instructions:
            self.mem.store(addr, 4, encode(instr))
            end = addr + 4
        self.mem.store(end, 4, HALT_WORD)
        self._decoded.clear()
        return program.instructions[0][0] if program.instructions else base

    def read_bytes(self, addr: int, n: int) -> bytes:
        return self.mem.read(addr, n)

    def read_word(self, addr: int) -> int:
        return self.mem.load(addr, 4)

    # -- execution ---------------------------------------------------------
    def _fetch(self, pc: int):
        entry = self._decoded.get(pc)
        if entry is None:
            if pc & 3:
                raise SimulationFault(pc, "misaligned pc")
            word = self.mem.load(pc, 4)
            instr = decode(word)
            if isinstance(instr, IllegalInstruction):
                raise SimulationFault(pc, str(instr))
            cls = _CLASS_OF[instr.mnemonic]
            entry = (instr, instr.mnemonic, cls, instr.rd, instr.rs1, instr.rs2, instr.imm)
            self._decoded[pc] = entry
        return entry

    def _count_mem(self, kind: str, addr: int) -> None:
        rep = self.report
        name = self.region_of(addr) if self.regions else "other"
        book = rep.loads_by_region if kind == "load" else rep.stores_by_region
        book[name] = book.get(name, 0) + 1

    def _exec(self, pc: int, entry) -> tuple[int, str]:
        """Execute one decoded instruction; returns (next_pc, cost class)."""
        instr, m, cls, rd, rs1, rs2, imm = entry
        regs = self.regs
        npc = pc + 4
        if cls == "alu":
            if m == "lui":
                val = (imm << 12) & MASK32
            elif m == "auipc":
                val = (pc + (imm << 12)) & MASK32
            elif imm is None:
                val = _alu(m, regs[rs1], regs[rs2])
            else:
                val = _alu(_IMM_ALU[m], regs[rs1], imm & MASK32)
            if rd:
                regs[rd] = val
        elif cls == "mul":
            if rd:
                regs[rd] = _alu(m, regs[rs1], regs[rs2])
        elif cls == "load":
            size, signed = _LOAD_SPEC[m]
            addr = (regs[rs1] + imm) & MASK32
            if addr % size:
                raise SimulationFault(pc, f"misaligned {m} at 0x{addr:08x}")
            val = self.mem.load(addr, size)
            if signed and val >> (8 * size - 1):
                val = (val - (1 << (8 * size))) & MASK32
            if rd:
                regs[rd] = val
            self.report.loads += 1
            self._count_mem("load", addr)
        elif cls == "store":
            size = _STORE_SIZE[m]
            addr = (regs[rs1] + imm) & MASK32
            if addr % size:
                raise SimulationFault(pc, f"misaligned {m} at 0x{addr:08x}")
            self.mem.store(addr, size, regs[rs2])
            if self._decoded and (addr & ~3) in self._decoded:
                self._decoded.clear()
            self.report.stores += 1
            self._count_mem("store", addr)
        elif cls == "branch":
            a, b = regs[rs1], regs[rs2]
            if m == "beq":
                taken = a == b
            elif m == "bne":
                taken = a != b
            elif m == "blt":
                taken = _s32(a) < _s32(b)
            elif m == "bge":
                taken = _s32(a) >= _s32(b)
            elif m == "bltu":
                taken = a < b
            else:
                taken = a >= b
            if taken:
                npc = (pc + imm) & MASK32
                cls = "branch_taken"
            else:
                cls = "branch_not_taken"
        elif cls == "jump":
            if m == "jal":
                npc = (pc + imm) & MASK32
            else:
                npc = (regs[rs1] + imm) & MASK32 & ~1
            if rd:
                regs[rd] = (pc + 4) & MASK32
        elif cls == "nn_mac":
            mac_step_raw(_MAC_BITS[m], regs[rs1], regs[rs2], self.acc)
            self.report.mac_instr_count += 1
            if rd:
                regs[rd] = self.acc[0]
        else:  # nn_acc
            lane = regs[rs1]
            if lane > 3:
                raise SimulationFault(pc, f"{m}: accumulator lane {lane} out of range")
            if m == "nn_acc_get":
                if rd:
                    regs[rd] = self.acc[lane]
            else:
                self.acc[lane] = regs[rs2]
        if npc & 3:
            raise SimulationFault(pc, f"misaligned jump target 0x{npc:08x}")
        return npc, cls

    def step(self) -> TraceEvent:
        pc = self.pc
        entry = self._fetch(pc)
        npc, cls = self._exec(pc, entry)
        cost = getattr(self.cost, cls)
        rep = self.report
        rep.instr_histogram[cls] += 1
        rep.total_cycles += cost
        rep.retired += 1
        self.pc = npc
        return TraceEvent(pc, format_instruction(entry[0]), cost)

    def run(self, entry: Optional[int] = None, max_instructions: int = 10_000_000,
            trace: Optional[Callable[[TraceEvent], None]] = None) -> SimReport:
        """Run until the halt self-jump or until the budget is spent."""
        if entry is not None:
            self.pc = entry
        rep = self.report
        hist = rep.instr_histogram
        costs = self.cost.to_dict()
        fetch, execute = self._fetch, self._exec
        budget = max_instructions
        while budget > 0:
            pc = self.pc
            e = fetch(pc)
            npc, cls = execute(pc, e)
            hist[cls] += 1
            c = costs[cls]
            rep.total_cycles += c
            rep.retired += 1
            budget -= 1
            if trace is not None:
                trace(TraceEvent(pc, format_instruction(e[0]), c))
            self.pc = npc
            if npc == pc and cls == "jump":
                rep.status = "halt"
                return rep
        rep.status = "budget"
        return rep


def load_image(machine: Machine, base: int, data: bytes) -> Machine:
    """Copy raw bytes into machine memory at ``base``."""
    if base < 0 or base + len(data) > (1 << 32):
        raise ValueError(f"image of {len(data)} bytes at 0x{base:x} overflows the address space")
    machine.mem.write(base, bytes(data))
    for pc in [p for p in machine._decoded if base <= p < base + len(data)]:
        del machine._decoded[pc]
    return machine


def step(machine: Machine) -> tuple[Machine, TraceEvent]:
    ev = machine.step()
    return machine, ev


def run(machine: Machine, entry: int = 0, max_instructions: int = 10_000_000,
        trace: Optional[Callable[[TraceEvent], None]] = None) -> SimReport:
    return machine.run(entry, max_instructions, trace)


def trace_writer(stream: TextIO) -> Callable[[TraceEvent], None]:
    def emit(ev: TraceEvent) -> None:
        stream.write(str(ev) + "\n")
    return emit


def run_program(program: Program, images: Iterable[tuple[int, bytes]] = (),
                cost_table: Optional[CostTable] = None, max_instructions: int = 50_000_000,
                regions: Iterable[tuple[str, int, int]] = ()) -> Machine:
    m = Machine(cost_table)
    entry = m.load_program(program)
    for base, data in images:
        load_image(m, base, data)
    for name, base, size in regions:
        m.add_region(name, base, size)
    m.run(entry, max_instructions)
    return m
