import itertools
import time

import numpy as np

import pytest
from hypothesis import given, strategies as st

from rvmix.macunit import (
    MacUnitState,
    Mode,
    PackingError,
    acc_get,
    acc_set,
    mac_step,
    mac_step_raw,
    pack_activations,
    pack_weights,
    pump_schedule,
    softsimd_mul17,
    unpack_activations,
    unpack_weights,
)

bytes4 = st.lists(st.integers(0, 255), min_size=4, max_size=4)


def weights_for(mode):
    return st.lists(st.integers(0, (1 << mode.bits) - 1), min_size=mode.macs, max_size=mode.macs)


def step(mode, acts, weights, state):
    return mac_step(mode, pack_activations(acts), pack_weights(mode, weights), state)


def scalar_oracle(mode, acts, weights, acc):
    """Reference: plain per-filter dot products, wrapped to 32 bits."""
    out = list(acc)
    for g in range(mode.filters):
        dot = sum(acts[i] * weights[4 * g + i] for i in range(4))
        out[g] = (out[g] + dot) % 2**32
    return tuple(out)


class TestModes:
    @pytest.mark.parametrize("mode, bits, filters, macs, pumps, lanes", [
        (Mode.MODE1, 8, 1, 4, 1, (0,)),
        (Mode.MODE2, 4, 2, 8, 2, (0, 1)),
        (Mode.MODE3, 2, 4, 16, 2, (0, 1, 2, 3)),
    ])
    def test_properties(self, mode, bits, filters, macs, pumps, lanes):
        assert (mode.bits, mode.filters, mode.macs, mode.pumps, mode.lanes) == (bits, filters, macs, pumps, lanes)
        assert len(pump_schedule(mode)) == pumps

    def test_from_bits(self):
        assert Mode.from_bits(4) is Mode.MODE2
        with pytest.raises(PackingError):
            Mode.from_bits(3)


class TestPacking:
    def test_mode1_bytes(self):
        assert pack_weights(Mode.MODE1, [1, 2, 3, 4]).value == 0x04030201

    def test_mode3_filter_major(self):
        w = [0] * 16
        w[4 * 2 + 1] = 3  # filter 2, weight 1 -> bits 18..19
        assert pack_weights(Mode.MODE3, w).value == 3 << 18

    def test_mode2_halfwords(self):
        assert pack_weights(Mode.MODE2, [0xF, 0, 0, 1, 0, 0, 0, 0]).value == 0x100F

    def test_overflow(self):
        with pytest.raises(PackingError):
            pack_weights(Mode.MODE3, [4] + [0] * 15)
        with pytest.raises(PackingError):
            pack_weights(Mode.MODE1, [1, 2, 3])
        with pytest.raises(PackingError):
            pack_activations([256, 0, 0, 0])

    @given(st.sampled_from(list(Mode)).flatmap(lambda m: st.tuples(st.just(m), weights_for(m))))
    def test_weight_roundtrip(self, mw):
        mode, w = mw
        assert unpack_weights(mode, pack_weights(mode, w)) == w

    @given(bytes4)
    def test_activation_roundtrip(self, a):
        assert unpack_activations(pack_activations(a)) == a


class TestSoftSimd:
    def test_exhaustive(self):
        # every (act, w_lo, w_hi): lanes equal the scalar products, guard bit clear
        t0 = time.perf_counter()
        for act, lo, hi in itertools.product(range(256), range(4), range(4)):
            p_lo, p_hi = softsimd_mul17(act, lo, hi)
            assert (p_lo, p_hi) == (act * lo, act * hi)
            full = act * ((hi << 11) | lo)
            assert (full >> 10) & 1 == 0
        assert time.perf_counter() - t0 < 1.0

    def test_worst_case_fits_lane(self):
        assert softsimd_mul17(255, 3, 3) == (765, 765)


class TestMacStep:
    def test_mode1_example(self):
        s = step(Mode.MODE1, [1, 2, 3, 4], [1, 1, 1, 1], MacUnitState())
        assert s.acc == (10, 0, 0, 0)

    def test_mode2_example(self):
        s = step(Mode.MODE2, [1, 2, 3, 4], [15] * 4 + [1, 2, 0, 1], MacUnitState())
        assert s.acc[:2] == (150, 9)

    def test_mode3_lanes(self):
        w = [1, 0, 0, 0] + [0, 1, 0, 0] + [0] * 8
        s = step(Mode.MODE3, [10, 2, 0, 0], w, MacUnitState())
        assert s.acc == (10, 2, 0, 0)

    def test_mode3_two_filters(self):
        w = [1, 1, 1, 1] + [2, 0, 0, 0] + [0] * 8
        assert step(Mode.MODE3, [1, 2, 3, 4], w, MacUnitState()).acc == (10, 2, 0, 0)

    def test_mode2_onto_existing(self):
        w = [15, 0, 0, 0] + [1, 0, 0, 0]
        s = step(Mode.MODE2, [10, 0, 0, 0], w, MacUnitState((5, 5, 9, 9)))
        assert s.acc == (155, 15, 9, 9)

    def test_bias_then_dot(self):
        s = step(Mode.MODE1, [3, 1, 4, 1], [5, 9, 2, 6], acc_set(MacUnitState(), 0, -7))
        assert acc_get(s, 0) == -7 + 15 + 9 + 8 + 6

    def test_wraps(self):
        s = step(Mode.MODE1, [255] * 4, [255] * 4, MacUnitState((2**32 - 1, 0, 0, 0)))
        assert s.acc[0] == (2**32 - 1 + 4 * 255 * 255) % 2**32

    def test_wrong_mode_word(self):
        word = pack_weights(Mode.MODE2, [0] * 8)
        with pytest.raises(PackingError):
            mac_step(Mode.MODE3, pack_activations([0] * 4), word, MacUnitState())

    @given(st.sampled_from(list(Mode)).flatmap(lambda m: st.tuples(st.just(m), weights_for(m))),
           bytes4, st.lists(st.integers(0, 2**32 - 1), min_size=4, max_size=4))
    def test_matches_oracle(self, mw, acts, acc):
        mode, w = mw
        expect = scalar_oracle(mode, acts, w, acc)
        assert step(mode, acts, w, MacUnitState(tuple(acc))).acc[:mode.filters] == expect[:mode.filters]
        raw = list(acc)
        mac_step_raw(mode.bits, pack_activations(acts).value, pack_weights(mode, w).value, raw)
        assert tuple(raw) == step(mode, acts, w, MacUnitState(tuple(acc))).acc

    def test_bulk_against_oracle(self):
        # 10^5 random operand sets across the three modes, including lane wrap
        rng = np.random.default_rng(99)
        modes = list(Mode)
        for k in range(100_000):
            mode = modes[k % 3]
            acts = rng.integers(0, 256, 4).tolist()
            w = rng.integers(0, 1 << mode.bits, mode.macs).tolist()
            acc = tuple(rng.integers(0, 2**32, 4, dtype=np.uint64).tolist())
            got = step(mode, acts, w, MacUnitState(acc)).acc
            want = scalar_oracle(mode, acts, w, acc)
            assert got[:mode.filters] == want[:mode.filters] and got[mode.filters:] == acc[mode.filters:]

    def test_untouched_lanes(self):
        s = step(Mode.MODE1, [1] * 4, [1] * 4, MacUnitState((0, 7, 8, 9)))
        assert s.acc[1:] == (7, 8, 9)


class TestAccAccess:
    def test_fresh_zero(self):
        assert [acc_get(MacUnitState(), i) for i in range(4)] == [0, 0, 0, 0]

    def test_set_get(self):
        s = acc_set(MacUnitState(), 2, -1)
        assert acc_get(s, 2) == 2**32 - 1

    @pytest.mark.parametrize("lane", [-1, 4, 17])
    def test_bad_lane(self, lane):
        with pytest.raises(IndexError):
            acc_get(MacUnitState(), lane)
        with pytest.raises(IndexError):
            acc_set(MacUnitState(), lane, 0)
