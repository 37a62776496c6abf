import pytest
from hypothesis import given, settings, strategies as st

from rvmix.asm import AsmError, Program, assemble, disassemble, disassemble_words
from rvmix.isa import Instruction, format_instruction

from conftest import instructions

NON_CONTROL = sorted(set(__import__("rvmix.isa", fromlist=["OPCODES"]).OPCODES)
                     - {"jal", "jalr", "beq", "bne", "blt", "bge", "bltu", "bgeu"})


class TestAssemble:
    def test_empty(self):
        prog = assemble("")
        assert len(prog) == 0 and disassemble(prog) == ""

    def test_loop_label(self):
        prog = assemble("""
            addi x1, x0, 3
        top:
            addi x1, x1, -1   # count down
            bne x1, x0, top
        """)
        assert prog.labels["top"] == 4
        assert prog.instructions[2][1] == Instruction("bne", rs1=1, rs2=0, imm=-4)

    def test_forward_label_and_hex(self):
        prog = assemble("beq x0, x0, end\naddi x2, x0, 0x7f\nend: nop")
        assert prog.instructions[0][1].imm == 8
        assert prog.instructions[1][1].imm == 127

    def test_custom_operands(self):
        prog = assemble("nn_acc_set x18, x5\nnn_acc_get x5, x18\nnn_mac_2b x5, x23, x24")
        assert [i for _, i in prog.instructions] == [
            Instruction("nn_acc_set", rs1=18, rs2=5),
            Instruction("nn_acc_get", rd=5, rs1=18),
            Instruction("nn_mac_2b", rd=5, rs1=23, rs2=24),
        ]

    def test_memory_operands(self):
        prog = assemble("lw x5, -8(x2)\nsb x6, 3(x7)\njalr x1, 0(x5)")
        assert prog.instructions[1][1] == Instruction("sb", rs1=7, rs2=6, imm=3)

    @pytest.mark.parametrize("src, msg", [
        ("bne x1, x0, nowhere", "undefined label"),
        ("frob x1", "unknown mnemonic"),
        ("addi x1, x99, 0", "bad register"),
        ("a: nop\na: nop", "duplicate label"),
        ("addi x1, x1, 5000", "imm"),
    ])
    def test_errors(self, src, msg):
        with pytest.raises(AsmError, match=msg):
            assemble(src)

    def test_branch_out_of_range(self):
        src = "beq x0, x0, far\n" + "nop\n" * 1100 + "far: nop"
        with pytest.raises(AsmError, match="branch offset out of range"):
            assemble(src)

    def test_error_reports_line(self):
        with pytest.raises(AsmError) as exc:
            assemble("nop\nnop\nbogus")
        assert exc.value.lineno == 3

    def test_bytes(self):
        assert assemble("jal x0, 0").to_bytes() == bytes.fromhex("6f000000")


class TestDisassemble:
    @settings(max_examples=300)
    @given(st.lists(instructions(NON_CONTROL), max_size=20))
    def test_roundtrip(self, instrs):
        text = "\n".join(format_instruction(i) for i in instrs)
        prog = assemble(text)
        assert [i for _, i in prog.instructions] == instrs
        assert disassemble(prog) == text

    def test_thousand_instruction_program(self):
        import random
        rng = random.Random(11)
        names = NON_CONTROL
        from rvmix.isa import OPCODES, imm_range, used_fields
        instrs = []
        for _ in range(1000):
            m = rng.choice(names)
            fmt = OPCODES[m][0]
            if fmt == "R":
                instrs.append(Instruction(m, **{f: rng.randrange(32) for f in used_fields(m)}))
                continue
            lo, hi, al = imm_range(m)
            kw = {"imm": rng.randint(lo // al, hi // al) * al, "rd": rng.randrange(32), "rs1": rng.randrange(32)}
            if fmt == "S":
                kw["rs2"] = kw.pop("rd")
            if fmt == "U":
                kw.pop("rs1")
            instrs.append(Instruction(m, **kw))
        prog = assemble("\n".join(format_instruction(i) for i in instrs))
        again = assemble(disassemble(prog))
        assert again.words() == prog.words() and len(prog) == 1000

    def test_single_custom_rendering(self):
        assert disassemble(assemble("nn_mac_8b x12, x10, x11")) == "nn_mac_8b x12, x10, x11"

    def test_words_listing(self):
        listing = disassemble_words([0x13, 0xFFFFFFFF], base=0x100)
        assert "addi x0, x0, 0" in listing and "illegal" in listing
