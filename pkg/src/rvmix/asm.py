"""Two-pass assembler and disassembler for the rvmix instruction set.

Grammar, one statement per line:

    [label:] [mnemonic operand, operand, ...] [# comment]

Registers are ``x0``..``x31``; immediates are decimal or ``0x`` hex (either
may be negated). Branch and jump targets are a label or a numeric byte
offset. Loads, stores and ``jalr`` use ``imm(xN)``. ``nop`` is the only
pseudo-instruction.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .isa import (
    OPCODES,
    EncodingError,
    Instruction,
    decode,
    encode,
    format_instruction,
    used_fields,
)


class AsmError(ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


@dataclass
class Program:
    instructions: list[tuple[int, Instruction]] = field(default_factory=list)
    labels: dict[str, int] = field(default_factory=dict)

    def words(self) -> list[int]:
        return [encode(i) for _, i in self.instructions]

    def to_bytes(self) -> bytes:
        return b"".join(w.to_bytes(4, "little") for w in self.words())

    def __len__(self) -> int:
        return len(self.instructions)


_LABEL_RE = re.compile(r"^([A-Za-z_.][\w.]*)\s*:")
_MEM_RE = re.compile(r"^(-?\w+)\s*\(\s*(\w+)\s*\)$")
_NAME_RE = re.compile(r"^[A-Za-z_.][\w.]*$")


def _reg(tok: str, lineno: int) -> int:
    tok = tok.strip()
    if len(tok) >= 2 and tok[0] == "x" and tok[1:].isdigit():
        n = int(tok[1:])
        if 0 <= n <= 31:
            return n
    raise AsmError(lineno, f"bad register {tok!r}")


def _int(tok: str, lineno: int) -> int:
    tok = tok.strip()
    try:
        neg = tok.startswith("-")
        body = tok[1:] if neg else tok
        if body.lower().startswith("0x"):
            v = int(body[2:], 16)
        elif body.isdigit():
            v = int(body, 10)
        else:
            raise ValueError
    except ValueError:
        raise AsmError(lineno, f"bad immediate {tok!r}") from None
    return -v if neg else v


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def assemble(text: str, base: int = 0) -> Program:
    """Assemble source text into a Program placed at ``base``."""
    if base % 4:
        raise ValueError("program base must be word aligned")
    # pass 1: labels and statement list
    stmts: list[tuple[int, int, str, list[str]]] = []
    labels: dict[str, int] = {}
    addr = base
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip(raw)
        while True:
            m = _LABEL_RE.match(line)
            if not m:
                break
            name = m.group(1)
            if name in labels:
                raise AsmError(lineno, f"duplicate label {name!r}")
            labels[name] = addr
            line = line[m.end():].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        mnemonic = parts[0].lower()
        ops = [o.strip() for o in parts[1].split(",")] if len(parts) > 1 else []
        if mnemonic != "nop" and mnemonic not in OPCODES:
            raise AsmError(lineno, f"unknown mnemonic {mnemonic!r}")
        stmts.append((lineno, addr, mnemonic, ops))
        addr += 4

    prog = Program(labels=labels)
    for lineno, pc, mnemonic, ops in stmts:
        instr = _build(lineno, pc, mnemonic, ops, labels)
        try:
            encode(instr)
        except EncodingError as exc:
            if exc.field == "imm" and OPCODES[instr.mnemonic][0] in "BJ":
                raise AsmError(lineno, f"branch offset out of range: {exc}") from None
            raise AsmError(lineno, str(exc)) from None
        prog.instructions.append((pc, instr))
    return prog


def _target(tok: str, pc: int, labels: dict[str, int], lineno: int) -> int:
    if _NAME_RE.match(tok) and not tok.lower().startswith("0x"):
        if tok not in labels:
            raise AsmError(lineno, f"undefined label {tok!r}")
        return labels[tok] - pc
    return _int(tok, lineno)


def _build(lineno, pc, mnemonic, ops, labels) -> Instruction:
    def want(n):
        if len(ops) != n:
            raise AsmError(lineno, f"{mnemonic} expects {n} operands, got {len(ops)}")

    if mnemonic == "nop":
        want(0)
        return Instruction("addi", imm=0)
    fmt = OPCODES[mnemonic][0]
    if fmt == "R":
        names = used_fields(mnemonic)
        want(len(names))
        return Instruction(mnemonic, **{n: _reg(o, lineno) for n, o in zip(names, ops)})
    if mnemonic in ("lb", "lh", "lw", "lbu", "lhu", "jalr") or fmt == "S":
        if mnemonic == "jalr" and len(ops) == 3:
            return Instruction("jalr", rd=_reg(ops[0], lineno), rs1=_reg(ops[1], lineno),
                               imm=_int(ops[2], lineno))
        want(2)
        m = _MEM_RE.match(ops[1].replace(" ", ""))
        if not m:
            raise AsmError(lineno, f"expected imm(xN), got {ops[1]!r}")
        imm, base = _int(m.group(1), lineno), _reg(m.group(2), lineno)
        if fmt == "S":
            return Instruction(mnemonic, rs1=base, rs2=_reg(ops[0], lineno), imm=imm)
        return Instruction(mnemonic, rd=_reg(ops[0], lineno), rs1=base, imm=imm)
    if fmt == "I":
        want(3)
        return Instruction(mnemonic, rd=_reg(ops[0], lineno), rs1=_reg(ops[1], lineno),
                           imm=_int(ops[2], lineno))
    if fmt == "B":
        want(3)
        return Instruction(mnemonic, rs1=_reg(ops[0], lineno), rs2=_reg(ops[1], lineno),
                           imm=_target(ops[2], pc, labels, lineno))
    if fmt == "U":
        want(2)
        return Instruction(mnemonic, rd=_reg(ops[0], lineno), imm=_int(ops[1], lineno))
    want(2)
    return Instruction(mnemonic, rd=_reg(ops[0], lineno),
                       imm=_target(ops[1], pc, labels, lineno))


def disassemble(program: Program) -> str:
    """Render a Program as assembly text, one instruction per line."""
    return "\n".join(format_instruction(i) for _, i in program.instructions)


def disassemble_words(words, base: int = 0) -> str:
    lines = []
    for k, w in enumerate(words):
        d = decode(w)
        text = format_instruction(d) if isinstance(d, Instruction) else f"# {d}"
        lines.append(f"{base + 4 * k:08x}:  {w:08x}  {text}")
    return "\n".join(lines)
