import io
import json

import pytest
from hypothesis import given, settings, strategies as st

from rvmix.asm import assemble
from rvmix.sim import (
    CLASSES,
    HALT_WORD,
    CostTable,
    Machine,
    SimulationFault,
    load_image,
    run_program,
    trace_writer,
)

u32 = st.integers(0, 2**32 - 1)


def s32(v):
    return v - 2**32 if v & 0x80000000 else v


def oracle(op, a, b):
    """Reference RV32IM semantics written independently of the simulator."""
    sa, sb = s32(a), s32(b)
    if op == "add": r = a + b
    elif op == "sub": r = a - b
    elif op == "xor": r = a ^ b
    elif op == "or": r = a | b
    elif op == "and": r = a & b
    elif op == "sll": r = a << (b % 32)
    elif op == "srl": r = a >> (b % 32)
    elif op == "sra": r = sa >> (b % 32)
    elif op == "slt": r = int(sa < sb)
    elif op == "sltu": r = int(a < b)
    elif op == "mul": r = a * b
    elif op == "mulh": r = (sa * sb) >> 32
    elif op == "mulhu": r = (a * b) >> 32
    elif op == "mulhsu": r = (sa * b) >> 32
    elif op == "div":
        if b == 0: r = -1
        elif sa == -2**31 and sb == -1: r = sa
        else: r = abs(sa) // abs(sb) * (1 if (sa < 0) == (sb < 0) else -1)
    elif op == "divu": r = 2**32 - 1 if b == 0 else a // b
    elif op == "rem":
        if b == 0: r = sa
        elif sa == -2**31 and sb == -1: r = 0
        else: r = sa - sb * (abs(sa) // abs(sb) * (1 if (sa < 0) == (sb < 0) else -1))
    elif op == "remu": r = a if b == 0 else a % b
    return r % 2**32


R_OPS = ["add", "sub", "xor", "or", "and", "sll", "srl", "sra", "slt", "sltu",
         "mul", "mulh", "mulhu", "mulhsu", "div", "divu", "rem", "remu"]


def run_asm(text, **kw):
    m = Machine(kw.pop("cost", None))
    m.run(m.load_program(assemble(text)), **kw)
    return m


def load_regs(values):
    lines = []
    for r, v in values.items():
        hi, lo = (v + 0x800) >> 12 & 0xFFFFF, s32(v) - (((v + 0x800) >> 12 & 0xFFFFF) << 12)
        lines += [f"lui x{r}, {hi}", f"addi x{r}, x{r}, {s32((lo) % 2**32)}"]
    return "\n".join(lines)


class TestAlu:
    @settings(max_examples=400)
    @given(st.sampled_from(R_OPS), u32, u32)
    def test_r_type_matches_oracle(self, op, a, b):
        m = run_asm(load_regs({1: a, 2: b}) + f"\n{op} x3, x1, x2")
        assert (m.regs[1], m.regs[2]) == (a, b)
        assert m.regs[3] == oracle(op, a, b)

    @pytest.mark.parametrize("op, a, b, want", [
        ("div", -7, 2, -3), ("rem", -7, 2, -1), ("div", 5, 0, -1), ("divu", 5, 0, 2**32 - 1),
        ("div", -2**31, -1, -2**31), ("rem", -2**31, -1, 0), ("remu", 9, 0, 9),
    ])
    def test_division_corners(self, op, a, b, want):
        m = run_asm(load_regs({1: a % 2**32, 2: b % 2**32}) + f"\n{op} x3, x1, x2")
        assert m.regs[3] == want % 2**32

    def test_x0_hardwired(self):
        m = run_asm("addi x0, x0, 5\nadd x1, x0, x0")
        assert m.regs[0] == 0 and m.regs[1] == 0

    def test_lui_auipc(self):
        m = run_asm("lui x1, 0xfffff\nauipc x2, 1")
        assert m.regs[1] == 0xFFFFF000 and m.regs[2] == 0x1004

    def test_shift_immediates(self):
        m = run_asm("addi x1, x0, -16\nsrai x2, x1, 2\nsrli x3, x1, 28\nslli x4, x1, 31")
        assert m.regs[2:5] == [2**32 - 4, 15, 0]


class TestMemory:
    def test_load_store_widths(self):
        m = Machine()
        load_image(m, 0x1000, bytes([0x80, 0xFF, 0x34, 0x12]))
        entry = m.load_program(assemble("""
            lui x1, 1
            lb x2, 0(x1)
            lbu x3, 0(x1)
            lh x4, 0(x1)
            lhu x5, 2(x1)
            lw x6, 0(x1)
            sw x6, 8(x1)
            sh x6, 12(x1)
            sb x6, 14(x1)
        """))
        m.add_region("data", 0x1000, 16)
        rep = m.run(entry)
        assert m.regs[2:7] == [2**32 - 128, 0x80, 0xFFFFFF80, 0x1234, 0x1234FF80]
        assert m.read_word(0x1008) == 0x1234FF80
        assert m.read_bytes(0x100C, 3) == bytes([0x80, 0xFF, 0x80])
        assert (rep.loads, rep.stores) == (5, 3)
        assert rep.loads_by_region == {"data": 5} and rep.stores_by_region == {"data": 3}

    def test_image_word(self):
        m = Machine()
        load_image(m, 0x1000, bytes([1, 0, 0, 0]))
        assert m.read_word(0x1000) == 1

    def test_overlapping_images(self):
        m = Machine()
        load_image(m, 0x1000, b"\x11\x22\x33\x44")
        load_image(m, 0x1002, b"\xAA\xBB")
        assert m.read_bytes(0x1000, 4) == b"\x11\x22\xAA\xBB"

    def test_misaligned_word(self):
        with pytest.raises(SimulationFault, match="misaligned"):
            run_asm("addi x1, x0, 2\nlw x2, 0(x1)")

    def test_unmapped_reads_zero(self):
        assert run_asm("lui x1, 0x80000\nlw x2, 0(x1)").regs[2] == 0

    def test_image_overflow(self):
        with pytest.raises(ValueError):
            load_image(Machine(), 2**32 - 2, b"abcd")


class TestControl:
    def test_empty_program(self):
        m = run_asm("")
        assert m.report.retired == 1 and m.report.status == "halt"

    def test_deterministic(self):
        src = load_regs({1: 123456789}) + "\nmul x2, x1, x1\nsw x2, 0(x0)\nlw x3, 0(x0)"
        a, b = run_asm(src), run_asm(src)
        assert a.report == b.report and a.regs == b.regs

    def test_countdown_loop_histogram(self):
        m = run_asm("""
            addi x1, x0, 5
        loop:
            addi x1, x1, -1
            bne x1, x0, loop
        """)
        h = m.report.instr_histogram
        assert h["alu"] == 6 and h["branch_taken"] == 4 and h["branch_not_taken"] == 1
        assert h["jump"] == 1  # the appended halt
        assert m.report.status == "halt"
        assert m.report.total_cycles == 6 + 4 * 2 + 1 + 2

    def test_jal_link_and_jalr(self):
        m = run_asm("""
            jal x1, sub
            addi x5, x0, 7
            jal x0, end
        sub:
            addi x6, x0, 9
            jalr x0, 0(x1)
        end:
            nop
        """)
        assert m.regs[1] == 4 and m.regs[5] == 7 and m.regs[6] == 9

    def test_signed_branches(self):
        m = run_asm("""
            addi x1, x0, -1
            addi x2, x0, 1
            blt x1, x2, a
            addi x10, x0, 1
        a:  bltu x1, x2, b
            addi x11, x0, 1
        b:  bge x2, x1, c
            addi x12, x0, 1
        c:  bgeu x2, x1, d
            addi x13, x0, 1
        d:  nop
        """)
        assert m.regs[10:14] == [0, 1, 0, 1]

    def test_budget(self):
        m = run_asm("loop: jal x0, loop2\nloop2: jal x0, loop", max_instructions=100)
        assert m.report.status == "budget" and m.report.retired == 100

    def test_illegal_instruction_faults(self):
        m = Machine()
        load_image(m, 0, (0xFFFFFFFF).to_bytes(4, "little"))
        with pytest.raises(SimulationFault):
            m.run(0)

    def test_halt_word(self):
        assert HALT_WORD == 0x6F


class TestCustomInstructions:
    def test_mac_program(self):
        # acts 1,2,3,4 ; mode2 weights: filter0 all 1, filter1 = 2,0,0,1
        m = run_asm(load_regs({1: 0x04030201, 2: 0x10021111, 3: 1}) + """
            nn_acc_set x0, x0
            nn_acc_set x3, x0
            nn_mac_4b x0, x1, x2
            nn_mac_4b x0, x1, x2
            nn_acc_get x5, x0
            nn_acc_get x6, x3
        """)
        assert m.regs[5] == 2 * 10 and m.regs[6] == 2 * (2 + 4)
        assert m.report.mac_instr_count == 2
        assert m.report.instr_histogram["nn_acc"] == 4

    def test_mac_writes_lane0_to_rd(self):
        m = run_asm(load_regs({10: 0x01010101, 11: 0x04030201}) + "\nnn_mac_8b x12, x10, x11")
        assert m.acc[0] == 10 and m.regs[12] == 10
        assert m.report.mac_instr_count == 1 and m.report.instr_histogram["nn_mac"] == 1

    def test_bad_lane_faults(self):
        with pytest.raises(SimulationFault, match="lane"):
            run_asm("addi x1, x0, 4\nnn_acc_get x2, x1")

    def test_mac_state_property(self):
        m = run_asm("addi x1, x0, 2\naddi x2, x0, 42\nnn_acc_set x1, x2")
        assert m.mac.acc == (0, 0, 42, 0)


class TestCostTable:
    def test_defaults(self):
        assert CostTable().to_dict() == {"alu": 1, "mul": 1, "load": 2, "store": 2, "branch_taken": 2,
                                         "branch_not_taken": 1, "jump": 2, "nn_mac": 1, "nn_acc": 1}

    def test_from_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(dict(CostTable().to_dict(), mul=3)))
        assert CostTable.from_json(p).mul == 3

    @pytest.mark.parametrize("bad", [{"alu": 1}, dict(CostTable().to_dict(), extra=1),
                                     dict(CostTable().to_dict(), load=0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            CostTable.from_dict(bad)

    @settings(max_examples=30)
    @given(st.fixed_dictionaries({c: st.integers(1, 9) for c in CLASSES}))
    def test_cycles_equal_weighted_histogram(self, costs):
        table = CostTable.from_dict(costs)
        m = run_asm("""
            addi x1, x0, 3
            lui x2, 0x100
        l:  sw x1, 0(x2)
            lw x3, 0(x2)
            mul x4, x3, x3
            nn_mac_8b x0, x3, x3
            nn_acc_get x5, x0
            addi x1, x1, -1
            bne x1, x0, l
        """, cost=table)
        rep = m.report
        assert rep.total_cycles == table.cycles(rep.instr_histogram)
        assert sum(rep.instr_histogram.values()) == rep.retired


class TestTrace:
    def test_trace_lines(self):
        buf = io.StringIO()
        m = Machine()
        m.run(m.load_program(assemble("addi x1, x0, 1")), trace=trace_writer(buf))
        lines = buf.getvalue().splitlines()
        assert len(lines) == 2 and "addi x1, x0, 1" in lines[0] and lines[1].startswith("00000004")

    def test_run_program_regions(self):
        m = run_program(assemble("lui x1, 2\nlw x2, 0(x1)"), [(0x2000, b"\x07\0\0\0")],
                        regions=[("w", 0x2000, 4)])
        assert m.regs[2] == 7 and m.report.loads_by_region == {"w": 1}
