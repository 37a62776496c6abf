"""Bit-exact model of the mixed-precision multiplier block.

Four 17x17 unsigned multipliers sit behind a partial-product adder (PPA)
feeding four 32-bit accumulator lanes. Activations always arrive as four
unsigned bytes; the weight word is interpreted per mode:

    Mode1  4 x 8-bit, one filter              1 pump,  lane 0
    Mode2  2 filters x 4 x 4-bit (halfwords)  2 pumps, lanes 0,1
    Mode3  4 filters x 4 x 2-bit (bytes)      2 pumps, lanes 0..3, soft SIMD

In Mode3 each multiplier receives the composite weight ``w_hi << 11 | w_lo``
so one product carries two 10-bit lane products with a zero guard bit at
position 10.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

MASK32 = 0xFFFFFFFF
LANE_STRIDE = 11
LANE_MASK = (1 << 10) - 1
PORT_BITS = 17


class PackingError(ValueError):
    pass


class Mode(Enum):
    MODE1 = 8
    MODE2 = 4
    MODE3 = 2

    @property
    def bits(self) -> int:
        return self.value

    @property
    def filters(self) -> int:
        """Filter groups carried by one weight word."""
        return 8 // self.value

    @property
    def macs(self) -> int:
        return 4 * self.filters

    @property
    def pumps(self) -> int:
        return 1 if self is Mode.MODE1 else 2

    @property
    def lanes(self) -> tuple[int, ...]:
        return tuple(range(self.filters))

    @property
    def mnemonic(self) -> str:
        return f"nn_mac_{self.value}b"

    @classmethod
    def from_bits(cls, bits: int) -> "Mode":
        try:
            return cls(bits)
        except ValueError:
            raise PackingError(f"no mode for {bits}-bit weights") from None

    @classmethod
    def from_mnemonic(cls, mnemonic: str) -> "Mode":
        return {"nn_mac_8b": cls.MODE1, "nn_mac_4b": cls.MODE2, "nn_mac_2b": cls.MODE3}[mnemonic]


@dataclass(frozen=True)
class PackedWord:
    value: int
    mode: Mode | None  # None for activations
    kind: str = "weights"


def _field_bits(mode: Mode) -> int:
    return mode.bits


def pack_weights(mode: Mode, weights: Sequence[int]) -> PackedWord:
    """Pack ``mode.macs`` unsigned weights, filter-major, into one word.

    Weight ``i`` of filter ``g`` starts at bit ``(4*g + i) * b`` for field
    width ``b``, so filter ``g`` occupies byte ``g`` in Mode3 and halfword
    ``g`` in Mode2.
    """
    b = _field_bits(mode)
    if len(weights) != mode.macs:
        raise PackingError(f"{mode.name} packs {mode.macs} weights, got {len(weights)}")
    word = 0
    for k, w in enumerate(weights):
        w = int(w)
        if not 0 <= w < (1 << b):
            raise PackingError(f"weight {k}={w} does not fit {b} bits")
        word |= w << (k * b)
    return PackedWord(word, mode, "weights")


def unpack_weights(mode: Mode, word) -> list[int]:
    value = word.value if isinstance(word, PackedWord) else int(word)
    b = _field_bits(mode)
    mask = (1 << b) - 1
    return [(value >> (k * b)) & mask for k in range(mode.macs)]


def pack_activations(acts: Sequence[int]) -> PackedWord:
    if len(acts) != 4:
        raise PackingError(f"an activation word holds 4 bytes, got {len(acts)}")
    word = 0
    for i, a in enumerate(acts):
        a = int(a)
        if not 0 <= a < 256:
            raise PackingError(f"activation {i}={a} is not an unsigned byte")
        word |= a << (8 * i)
    return PackedWord(word, None, "activations")


def unpack_activations(word) -> list[int]:
    value = word.value if isinstance(word, PackedWord) else int(word)
    return [(value >> (8 * i)) & 0xFF for i in range(4)]


def mul17(a: int, b: int) -> int:
    """One unsigned 17x17 multiplier port."""
    assert 0 <= a < (1 << PORT_BITS) and 0 <= b < (1 << PORT_BITS)
    return a * b


def softsimd_mul17(act: int, w_lo: int, w_hi: int) -> tuple[int, int]:
    """Two 8x2-bit products from a single multiply.

    Returns (act*w_lo, act*w_hi) read from product bits [9:0] and [20:11].
    """
    composite = (w_hi << LANE_STRIDE) | w_lo
    p = mul17(act, composite)
    return p & LANE_MASK, (p >> LANE_STRIDE) & LANE_MASK


@dataclass(frozen=True)
class MacUnitState:
    acc: tuple[int, int, int, int] = (0, 0, 0, 0)

    def lane(self, i: int) -> int:
        return self.acc[i]


@dataclass(frozen=True)
class PumpSlot:
    """What one multiplier does during one pump."""

    multiplier: int
    activation: int  # activation byte index
    filters: tuple[int, ...]  # weight groups multiplied (2 under soft SIMD)
    lanes: tuple[int, ...]


def pump_schedule(mode: Mode) -> list[list[PumpSlot]]:
    """Per-pump multiplier assignments for a mode."""
    if mode is Mode.MODE1:
        return [[PumpSlot(m, m, (0,), (0,)) for m in range(4)]]
    if mode is Mode.MODE2:
        return [[PumpSlot(m, m, (g,), (g,)) for m in range(4)] for g in (0, 1)]
    return [[PumpSlot(m, m, (2 * p, 2 * p + 1), (2 * p, 2 * p + 1)) for m in range(4)]
            for p in (0, 1)]


_SCHEDULES = {m: pump_schedule(m) for m in Mode}


def _check_lane(lane: int) -> None:
    if not isinstance(lane, int) or not 0 <= lane <= 3:
        raise IndexError(f"accumulator lane {lane!r} out of range [0, 3]")


def acc_get(state: MacUnitState, lane: int) -> int:
    _check_lane(lane)
    return state.acc[lane]


def acc_set(state: MacUnitState, lane: int, value: int) -> MacUnitState:
    _check_lane(lane)
    acc = list(state.acc)
    acc[lane] = value & MASK32
    return MacUnitState(tuple(acc))


def mac_step(mode: Mode, acts, weights, state: MacUnitState) -> MacUnitState:
    """Execute one nn_mac_* on the unit; lanes wrap modulo 2**32."""
    if isinstance(weights, PackedWord):
        if weights.kind != "weights" or (weights.mode is not None and weights.mode is not mode):
            raise PackingError(f"weight word packed for {weights.mode} used in {mode}")
    if isinstance(acts, PackedWord) and acts.kind != "activations":
        raise PackingError("rs1 operand must be an activation word")
    a = unpack_activations(acts)
    w = unpack_weights(mode, weights)
    acc = list(state.acc)
    for pump in _SCHEDULES[mode]:
        sums = {}
        for slot in pump:
            act = a[slot.activation]
            if len(slot.filters) == 2:
                g0, g1 = slot.filters
                p_lo, p_hi = softsimd_mul17(act, w[4 * g0 + slot.multiplier],
                                            w[4 * g1 + slot.multiplier])
                products = (p_lo, p_hi)
            else:
                (g,) = slot.filters
                products = (mul17(act, w[4 * g + slot.multiplier]),)
            for lane, p in zip(slot.lanes, products):
                sums[lane] = sums.get(lane, 0) + p
        # partial-product addition, then accumulate
        for lane, s in sums.items():
            acc[lane] = (acc[lane] + s) & MASK32
    return MacUnitState(tuple(acc))


def mac_step_raw(mode_bits: int, act_word: int, weight_word: int, acc: list[int]) -> None:
    """In-place fast path used by the simulator. Same arithmetic as mac_step."""
    a0 = act_word & 0xFF
    a1 = (act_word >> 8) & 0xFF
    a2 = (act_word >> 16) & 0xFF
    a3 = act_word >> 24
    if mode_bits == 8:
        w = weight_word
        acc[0] = (acc[0] + a0 * (w & 0xFF) + a1 * ((w >> 8) & 0xFF)
                  + a2 * ((w >> 16) & 0xFF) + a3 * (w >> 24)) & MASK32
    elif mode_bits == 4:
        for g in (0, 1):
            w = weight_word >> (16 * g)
            acc[g] = (acc[g] + a0 * (w & 0xF) + a1 * ((w >> 4) & 0xF)
                      + a2 * ((w >> 8) & 0xF) + a3 * ((w >> 12) & 0xF)) & MASK32
    else:
        for pump in (0, 1):
            lo = weight_word >> (16 * pump)
            hi = lo >> 8
            s_lo = s_hi = 0
            for i, act in enumerate((a0, a1, a2, a3)):
                p = act * ((((hi >> (2 * i)) & 3) << LANE_STRIDE) | ((lo >> (2 * i)) & 3))
                s_lo += p & LANE_MASK
                s_hi += (p >> LANE_STRIDE) & LANE_MASK
            acc[2 * pump] = (acc[2 * pump] + s_lo) & MASK32
            acc[2 * pump + 1] = (acc[2 * pump + 1] + s_hi) & MASK32
