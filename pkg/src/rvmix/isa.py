"""RV32IM + mixed-precision MAC extension: instruction model, encoder, decoder.

Custom instructions live in the custom-0 major opcode (0b0001011), R-type,
func3 = 0b010:

    nn_mac_8b   func7 0001000   4 x 8-bit weights   (Mode-1)
    nn_mac_4b   func7 0000100   8 x 4-bit weights   (Mode-2)
    nn_mac_2b   func7 0000010   16 x 2-bit weights  (Mode-3)
    nn_acc_set  func7 0000001   lane(rs1) := rs2
    nn_acc_get  func7 0000011   rd := lane(rs1)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

OP_LUI = 0b0110111
OP_AUIPC = 0b0010111
OP_JAL = 0b1101111
OP_JALR = 0b1100111
OP_BRANCH = 0b1100011
OP_LOAD = 0b0000011
OP_STORE = 0b0100011
OP_IMM = 0b0010011
OP_REG = 0b0110011
OP_CUSTOM0 = 0b0001011

CUSTOM_FUNC3 = 0b010

FUNC7_NN_MAC_8B = 0b0001000
FUNC7_NN_MAC_4B = 0b0000100
FUNC7_NN_MAC_2B = 0b0000010
FUNC7_NN_ACC_SET = 0b0000001
FUNC7_NN_ACC_GET = 0b0000011

MAC_MNEMONICS = ("nn_mac_8b", "nn_mac_4b", "nn_mac_2b")


class EncodingError(ValueError):
    """A field does not fit the instruction format."""

    def __init__(self, field: str, value, message: str = ""):
        self.field = field
        self.value = value
        super().__init__(f"{field}={value!r}: {message or 'out of range'}")


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: Optional[int] = None

    @property
    def fmt(self) -> str:
        return OPCODES[self.mnemonic][0]

    @property
    def is_mac(self) -> bool:
        return self.mnemonic in MAC_MNEMONICS


@dataclass(frozen=True)
class IllegalInstruction:
    """Decode result for a word that maps to no supported instruction."""

    word: int

    mnemonic = "illegal"

    def __str__(self) -> str:
        return f"illegal instruction 0x{self.word:08x}"


# mnemonic -> (format, opcode, func3, func7); func7 doubles as imm[11:5] for shifts
OPCODES: dict[str, tuple[str, int, Optional[int], Optional[int]]] = {
    "lui": ("U", OP_LUI, None, None),
    "auipc": ("U", OP_AUIPC, None, None),
    "jal": ("J", OP_JAL, None, None),
    "jalr": ("I", OP_JALR, 0b000, None),
    "beq": ("B", OP_BRANCH, 0b000, None),
    "bne": ("B", OP_BRANCH, 0b001, None),
    "blt": ("B", OP_BRANCH, 0b100, None),
    "bge": ("B", OP_BRANCH, 0b101, None),
    "bltu": ("B", OP_BRANCH, 0b110, None),
    "bgeu": ("B", OP_BRANCH, 0b111, None),
    "lb": ("I", OP_LOAD, 0b000, None),
    "lh": ("I", OP_LOAD, 0b001, None),
    "lw": ("I", OP_LOAD, 0b010, None),
    "lbu": ("I", OP_LOAD, 0b100, None),
    "lhu": ("I", OP_LOAD, 0b101, None),
    "sb": ("S", OP_STORE, 0b000, None),
    "sh": ("S", OP_STORE, 0b001, None),
    "sw": ("S", OP_STORE, 0b010, None),
    "addi": ("I", OP_IMM, 0b000, None),
    "slti": ("I", OP_IMM, 0b010, None),
    "sltiu": ("I", OP_IMM, 0b011, None),
    "xori": ("I", OP_IMM, 0b100, None),
    "ori": ("I", OP_IMM, 0b110, None),
    "andi": ("I", OP_IMM, 0b111, None),
    "slli": ("I", OP_IMM, 0b001, 0b0000000),
    "srli": ("I", OP_IMM, 0b101, 0b0000000),
    "srai": ("I", OP_IMM, 0b101, 0b0100000),
    "add": ("R", OP_REG, 0b000, 0b0000000),
    "sub": ("R", OP_REG, 0b000, 0b0100000),
    "sll": ("R", OP_REG, 0b001, 0b0000000),
    "slt": ("R", OP_REG, 0b010, 0b0000000),
    "sltu": ("R", OP_REG, 0b011, 0b0000000),
    "xor": ("R", OP_REG, 0b100, 0b0000000),
    "srl": ("R", OP_REG, 0b101, 0b0000000),
    "sra": ("R", OP_REG, 0b101, 0b0100000),
    "or": ("R", OP_REG, 0b110, 0b0000000),
    "and": ("R", OP_REG, 0b111, 0b0000000),
    "mul": ("R", OP_REG, 0b000, 0b0000001),
    "mulh": ("R", OP_REG, 0b001, 0b0000001),
    "mulhsu": ("R", OP_REG, 0b010, 0b0000001),
    "mulhu": ("R", OP_REG, 0b011, 0b0000001),
    "div": ("R", OP_REG, 0b100, 0b0000001),
    "divu": ("R", OP_REG, 0b101, 0b0000001),
    "rem": ("R", OP_REG, 0b110, 0b0000001),
    "remu": ("R", OP_REG, 0b111, 0b0000001),
    "nn_mac_8b": ("R", OP_CUSTOM0, CUSTOM_FUNC3, FUNC7_NN_MAC_8B),
    "nn_mac_4b": ("R", OP_CUSTOM0, CUSTOM_FUNC3, FUNC7_NN_MAC_4B),
    "nn_mac_2b": ("R", OP_CUSTOM0, CUSTOM_FUNC3, FUNC7_NN_MAC_2B),
    "nn_acc_set": ("R", OP_CUSTOM0, CUSTOM_FUNC3, FUNC7_NN_ACC_SET),
    "nn_acc_get": ("R", OP_CUSTOM0, CUSTOM_FUNC3, FUNC7_NN_ACC_GET),
}

SHIFT_IMM = frozenset({"slli", "srli", "srai"})

# register fields each mnemonic actually uses; the rest must be zero
_R_FIELDS = {
    "nn_acc_set": ("rs1", "rs2"),
    "nn_acc_get": ("rd", "rs1"),
}

_DECODE_R: dict[tuple[int, int, int], str] = {}
_DECODE_F3: dict[tuple[int, int], str] = {}
for _m, (_fmt, _op, _f3, _f7) in OPCODES.items():
    if _fmt == "R":
        _DECODE_R[(_op, _f3, _f7)] = _m
    elif _fmt in ("I", "S", "B") and _m not in SHIFT_IMM:
        _DECODE_F3[(_op, _f3)] = _m
_DECODE_SHIFT = {(OPCODES[m][2], OPCODES[m][3]): m for m in SHIFT_IMM}


def used_fields(mnemonic: str) -> tuple[str, ...]:
    """Register fields (in assembly operand order) that carry meaning."""
    fmt = OPCODES[mnemonic][0]
    if mnemonic in _R_FIELDS:
        return _R_FIELDS[mnemonic]
    return {
        "R": ("rd", "rs1", "rs2"),
        "I": ("rd", "rs1"),
        "S": ("rs1", "rs2"),
        "B": ("rs1", "rs2"),
        "U": ("rd",),
        "J": ("rd",),
    }[fmt]


def imm_range(mnemonic: str) -> Optional[tuple[int, int, int]]:
    """(lo, hi, alignment) accepted for the immediate, or None for R-type."""
    fmt = OPCODES[mnemonic][0]
    if fmt == "R":
        return None
    if mnemonic in SHIFT_IMM:
        return (0, 31, 1)
    return {
        "I": (-2048, 2047, 1),
        "S": (-2048, 2047, 1),
        "B": (-4096, 4094, 2),
        "U": (0, 0xFFFFF, 1),
        "J": (-(1 << 20), (1 << 20) - 2, 2),
    }[fmt]


def _check_reg(name: str, value) -> None:
    if not isinstance(value, int) or not 0 <= value <= 31:
        raise EncodingError(name, value, "register index must be in [0, 31]")


def validate(instr: Instruction) -> None:
    """Raise EncodingError unless every field fits the mnemonic's format."""
    if instr.mnemonic not in OPCODES:
        raise EncodingError("mnemonic", instr.mnemonic, "unknown mnemonic")
    used = used_fields(instr.mnemonic)
    for name in ("rd", "rs1", "rs2"):
        value = getattr(instr, name)
        _check_reg(name, value)
        if name not in used and value != 0:
            raise EncodingError(name, value, f"unused by {instr.mnemonic}, must be 0")
    rng = imm_range(instr.mnemonic)
    if rng is None:
        if instr.imm is not None:
            raise EncodingError("imm", instr.imm, f"{instr.mnemonic} takes no immediate")
        return
    lo, hi, align = rng
    if not isinstance(instr.imm, int) or not lo <= instr.imm <= hi:
        raise EncodingError("imm", instr.imm, f"must be in [{lo}, {hi}]")
    if instr.imm % align:
        raise EncodingError("imm", instr.imm, f"must be a multiple of {align}")


def encode(instr: Instruction) -> int:
    """Pack an instruction into its 32-bit word."""
    validate(instr)
    fmt, opcode, f3, f7 = OPCODES[instr.mnemonic]
    rd, rs1, rs2 = instr.rd, instr.rs1, instr.rs2
    if fmt == "R":
        return (f7 << 25) | (rs2 << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | opcode
    imm = instr.imm & 0xFFFFFFFF
    if fmt == "I":
        if instr.mnemonic in SHIFT_IMM:
            imm = (f7 << 5) | instr.imm
        return ((imm & 0xFFF) << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | opcode
    if fmt == "S":
        return (
            (((imm >> 5) & 0x7F) << 25) | (rs2 << 20) | (rs1 << 15) | (f3 << 12)
            | ((imm & 0x1F) << 7) | opcode
        )
    if fmt == "B":
        return (
            (((imm >> 12) & 1) << 31) | (((imm >> 5) & 0x3F) << 25) | (rs2 << 20)
            | (rs1 << 15) | (f3 << 12) | (((imm >> 1) & 0xF) << 8)
            | (((imm >> 11) & 1) << 7) | opcode
        )
    if fmt == "U":
        return (instr.imm << 12) | (rd << 7) | opcode
    # J
    return (
        (((imm >> 20) & 1) << 31) | (((imm >> 1) & 0x3FF) << 21)
        | (((imm >> 11) & 1) << 20) | (((imm >> 12) & 0xFF) << 12) | (rd << 7) | opcode
    )


def sign_extend(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


def decode(word: int) -> Union[Instruction, IllegalInstruction]:
    """Decode a 32-bit word. Total: unmapped encodings yield IllegalInstruction."""
    word &= 0xFFFFFFFF
    opcode = word & 0x7F
    rd = (word >> 7) & 0x1F
    f3 = (word >> 12) & 0x7
    rs1 = (word >> 15) & 0x1F
    rs2 = (word >> 20) & 0x1F
    f7 = word >> 25

    if opcode in (OP_REG, OP_CUSTOM0):
        m = _DECODE_R.get((opcode, f3, f7))
        if m is None:
            return IllegalInstruction(word)
        fields = {"rd": rd, "rs1": rs1, "rs2": rs2}
        used = used_fields(m)
        if any(fields[n] for n in fields if n not in used):
            return IllegalInstruction(word)
        return Instruction(m, rd, rs1, rs2)
    if opcode == OP_LUI or opcode == OP_AUIPC:
        return Instruction("lui" if opcode == OP_LUI else "auipc", rd=rd, imm=word >> 12)
    if opcode == OP_JAL:
        imm = (
            ((word >> 31) & 1) << 20 | ((word >> 12) & 0xFF) << 12
            | ((word >> 20) & 1) << 11 | ((word >> 21) & 0x3FF) << 1
        )
        return Instruction("jal", rd=rd, imm=sign_extend(imm, 21))
    if opcode == OP_IMM and f3 in (0b001, 0b101):
        m = _DECODE_SHIFT.get((f3, f7))
        if m is None:
            return IllegalInstruction(word)
        return Instruction(m, rd=rd, rs1=rs1, imm=rs2)
    if opcode in (OP_IMM, OP_LOAD, OP_JALR):
        m = _DECODE_F3.get((opcode, f3))
        if m is None:
            return IllegalInstruction(word)
        return Instruction(m, rd=rd, rs1=rs1, imm=sign_extend(word >> 20, 12))
    if opcode == OP_STORE:
        m = _DECODE_F3.get((opcode, f3))
        if m is None:
            return IllegalInstruction(word)
        imm = (f7 << 5) | rd
        return Instruction(m, rs1=rs1, rs2=rs2, imm=sign_extend(imm, 12))
    if opcode == OP_BRANCH:
        m = _DECODE_F3.get((opcode, f3))
        if m is None:
            return IllegalInstruction(word)
        imm = (
            ((word >> 31) & 1) << 12 | ((word >> 7) & 1) << 11
            | ((word >> 25) & 0x3F) << 5 | ((word >> 8) & 0xF) << 1
        )
        return Instruction(m, rs1=rs1, rs2=rs2, imm=sign_extend(imm, 13))
    return IllegalInstruction(word)


def format_instruction(instr: Instruction) -> str:
    """Render one instruction in the assembler's syntax (numeric branch offsets)."""
    m = instr.mnemonic
    fmt = OPCODES[m][0]
    if fmt == "R":
        regs = ", ".join(f"x{getattr(instr, f)}" for f in used_fields(m))
        return f"{m} {regs}"
    if m in ("lb", "lh", "lw", "lbu", "lhu", "jalr"):
        return f"{m} x{instr.rd}, {instr.imm}(x{instr.rs1})"
    if fmt == "S":
        return f"{m} x{instr.rs2}, {instr.imm}(x{instr.rs1})"
    if fmt == "I":
        return f"{m} x{instr.rd}, x{instr.rs1}, {instr.imm}"
    if fmt == "B":
        return f"{m} x{instr.rs1}, x{instr.rs2}, {instr.imm}"
    if fmt == "U":
        return f"{m} x{instr.rd}, 0x{instr.imm:x}"
    return f"{m} x{instr.rd}, {instr.imm}"
