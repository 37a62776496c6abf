from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings, strategies as st

from rvmix.isa import OPCODES, Instruction, imm_range, used_fields

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


@st.composite
def instructions(draw, mnemonics=None):
    """Any encodable instruction."""
    m = draw(st.sampled_from(sorted(mnemonics or OPCODES)))
    regs = st.integers(0, 31)
    fields = {}
    fmt = OPCODES[m][0]
    if fmt == "R":
        for name in used_fields(m):
            fields[name] = draw(regs)
        return Instruction(m, **fields)
    lo, hi, align = imm_range(m)
    imm = draw(st.integers(lo // align, hi // align)) * align
    if fmt in ("I", "U", "J"):
        fields["rd"] = draw(regs)
    if fmt in ("I", "S", "B"):
        fields["rs1"] = draw(regs)
    if fmt in ("S", "B"):
        fields["rs2"] = draw(regs)
    return Instruction(m, imm=imm, **fields)


@pytest.fixture(scope="session")
def fixture_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def mnist_eval():
    from rvmix.io import load_idx
    return load_idx(FIXTURES / "eval-images-idx3-ubyte.gz", FIXTURES / "eval-labels-idx1-ubyte.gz")


@pytest.fixture(scope="session")
def mnist_model():
    from rvmix.io import load_idx_images, load_model
    model = load_model(FIXTURES / "mnist_cnn.json")
    model.calibrate(load_idx_images(FIXTURES / "train-images-idx3-ubyte.gz")[:400])
    return model


@pytest.fixture(scope="session")
def explorer(mnist_model):
    from rvmix.dse import Explorer
    return Explorer(mnist_model)


# -- random quantized layers ---------------------------------------------------

def _params(rng, bits=8):
    import numpy as np
    from rvmix.qnn import QuantParams
    return QuantParams(float(rng.uniform(0.002, 0.05)), int(rng.integers(0, 1 << bits)), bits)


def random_layer(rng, kind, bits, n=None, f=None, c=None, k=None, stride=1, padding=0):
    """A random LayerSpec with plausible scales; weights use the full code range."""
    import numpy as np
    from rvmix.qnn import LayerSpec, QTensor
    wp = _params(rng, bits)
    if kind == "dense":
        shape = (f, n)
    elif kind == "conv2d":
        shape = (f, k, k, c)
    else:
        shape = (c, k, k)
    w = QTensor(rng.integers(0, 1 << bits, size=shape), wp)
    bias = rng.integers(-5000, 5000, size=shape[0])
    return LayerSpec(kind, _params(rng), w, bias, stride=stride, padding=padding, kernel=k or 1)


def random_input(rng, shape):
    import numpy as np
    from rvmix.qnn import QTensor
    return QTensor(rng.integers(0, 256, size=shape), _params(rng))


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Remember one acceptance line; printed in the terminal summary."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
