"""rvmix: a mixed-precision multiply-accumulate extension for a RISC-V core.

Modules:
    isa       encoding/decoding of RV32IM plus the custom nn_* instructions
    asm       assembler and disassembler
    macunit   bit-exact model of the packed multiplier block
    sim       instruction-set simulator with a per-class cycle model
    qnn       affine quantization and the integer reference for each layer kind
    model     float models, calibration and post-training quantization
    kernelgen assembly kernels (extended and scalar baseline) with predicted counts
    dse       bit-width configuration sweeps and Pareto analysis
    io        manifests, IDX datasets and reports
    cli       command-line entry point
"""
__version__ = "0.1.0"
