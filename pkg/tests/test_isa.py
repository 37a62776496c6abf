import random

import pytest
from hypothesis import given, settings, strategies as st

from rvmix.isa import (
    FUNC7_NN_ACC_GET,
    FUNC7_NN_ACC_SET,
    FUNC7_NN_MAC_2B,
    FUNC7_NN_MAC_4B,
    FUNC7_NN_MAC_8B,
    OP_CUSTOM0,
    OPCODES,
    EncodingError,
    IllegalInstruction,
    Instruction,
    decode,
    encode,
    format_instruction,
    sign_extend,
)

from conftest import instructions


def fields(word):
    return {
        "opcode": word & 0x7F, "rd": (word >> 7) & 31, "func3": (word >> 12) & 7,
        "rs1": (word >> 15) & 31, "rs2": (word >> 20) & 31, "func7": word >> 25,
    }


class TestCustomEncoding:
    def test_func7_table(self):
        assert format(FUNC7_NN_MAC_8B, "07b") == "0001000"
        assert format(FUNC7_NN_MAC_4B, "07b") == "0000100"
        assert format(FUNC7_NN_MAC_2B, "07b") == "0000010"
        assert format(FUNC7_NN_ACC_SET, "07b") == "0000001"
        assert format(FUNC7_NN_ACC_GET, "07b") == "0000011"

    @pytest.mark.parametrize("m", ["nn_mac_8b", "nn_mac_4b", "nn_mac_2b", "nn_acc_set", "nn_acc_get"])
    def test_custom0_func3(self, m):
        fmt, opcode, f3, _ = OPCODES[m]
        assert (fmt, opcode, format(f3, "03b")) == ("R", 0b0001011, "010")

    def test_known_word(self):
        # assembled by hand from the field layout
        word = encode(Instruction("nn_mac_8b", rd=12, rs1=10, rs2=11))
        assert word == 0x10B5260B
        f = fields(word)
        assert f == {"opcode": OP_CUSTOM0, "rd": 12, "func3": 2, "rs1": 10, "rs2": 11, "func7": 8}

    def test_acc_set_fields(self):
        word = encode(Instruction("nn_acc_set", rs1=3, rs2=7))
        assert fields(word)["rd"] == 0 and fields(word)["func7"] == 1

    def test_acc_get_fields(self):
        word = encode(Instruction("nn_acc_get", rd=5, rs1=2))
        assert fields(word)["rs2"] == 0 and fields(word)["func7"] == 3

    def test_unused_field_rejected(self):
        with pytest.raises(EncodingError):
            encode(Instruction("nn_acc_get", rd=5, rs1=2, rs2=1))

    def test_unmapped_func7_is_illegal(self):
        word = (0b1111111 << 25) | (2 << 12) | OP_CUSTOM0
        assert isinstance(decode(word), IllegalInstruction)

    def test_custom_with_stray_field_is_illegal(self):
        word = encode(Instruction("nn_acc_set", rs1=1, rs2=2)) | (5 << 7)
        assert isinstance(decode(word), IllegalInstruction)


class TestBaseEncoding:
    def test_nop(self):
        assert decode(0x00000013) == Instruction("addi", 0, 0, 0, 0)

    def test_addi_negative(self):
        # addi x1, x2, -1 -> imm all ones
        assert encode(Instruction("addi", rd=1, rs1=2, imm=-1)) == 0xFFF10093

    def test_branch_offset(self):
        i = Instruction("bne", rs1=1, rs2=2, imm=-4)
        assert decode(encode(i)) == i

    def test_jal_halt(self):
        assert encode(Instruction("jal", rd=0, imm=0)) == 0x0000006F

    @pytest.mark.parametrize("instr", [
        Instruction("addi", rd=1, rs1=1, imm=2048),
        Instruction("beq", rs1=0, rs2=0, imm=3),
        Instruction("slli", rd=1, rs1=1, imm=32),
        Instruction("add", rd=32, rs1=0, rs2=0),
        Instruction("lui", rd=1, imm=1 << 20),
        Instruction("frobnicate"),
    ])
    def test_out_of_range(self, instr):
        with pytest.raises(EncodingError):
            encode(instr)

    def test_sign_extend(self):
        assert sign_extend(0xFFF, 12) == -1
        assert sign_extend(0x7FF, 12) == 2047

    def test_format(self):
        assert format_instruction(Instruction("lw", rd=5, rs1=8, imm=-4)) == "lw x5, -4(x8)"


class TestRoundtrip:
    @settings(max_examples=2000)
    @given(instructions())
    def test_encode_decode(self, instr):
        assert decode(encode(instr)) == instr

    @given(st.integers(0, 2**32 - 1))
    def test_decode_is_total(self, word):
        d = decode(word)
        if not isinstance(d, IllegalInstruction):
            assert encode(d) == word

    def test_bulk_roundtrip(self):
        # 10^5 random instructions without hypothesis overhead
        rng = random.Random(7)
        names = sorted(OPCODES)
        from rvmix.isa import imm_range, used_fields
        for _ in range(100_000):
            m = rng.choice(names)
            fmt = OPCODES[m][0]
            if fmt == "R":
                instr = Instruction(m, **{f: rng.randrange(32) for f in used_fields(m)})
            else:
                lo, hi, al = imm_range(m)
                kw = {"imm": rng.randint(lo // al, hi // al) * al}
                if fmt in "IUJ":
                    kw["rd"] = rng.randrange(32)
                if fmt in "ISB":
                    kw["rs1"] = rng.randrange(32)
                if fmt in "SB":
                    kw["rs2"] = rng.randrange(32)
                instr = Instruction(m, **kw)
            assert decode(encode(instr)) == instr
