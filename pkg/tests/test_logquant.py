from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qmoevit.logquant import (
    SQRT2,
    DyadicRoot2,
    LogQTensor,
    fused_softmax_av,
    log_sqrt2_dequant_float,
    log_sqrt2_quantize,
    max_code,
    shift_av_row,
    shift_dequant,
)
from qmoevit.quant import PER_LAYER, QTensor, QuantParams


class TestLogQuantize:
    def test_one_maps_to_zero(self):
        assert log_sqrt2_quantize(np.array([[1.0]])).codes[0, 0] == 0

    def test_half_maps_to_two(self):
        assert log_sqrt2_quantize(np.array([[0.5]])).codes[0, 0] == 2

    def test_point_seven(self):
        # -2*log2(0.7) = 1.029..., rounds to 1
        assert log_sqrt2_quantize(np.array([[0.7]])).codes[0, 0] == 1

    def test_small_value_clips_to_max(self):
        assert log_sqrt2_quantize(np.array([[2.0**-8]]), bits=4).codes[0, 0] == 15

    def test_exact_zero_takes_max_code(self):
        assert log_sqrt2_quantize(np.array([[0.0]]), bits=4).codes[0, 0] == 15

    def test_rejects_out_of_domain(self):
        with pytest.raises(ValueError):
            log_sqrt2_quantize(np.array([[1.2]]))
        with pytest.raises(ValueError):
            log_sqrt2_quantize(np.array([[-0.1]]))

    @given(st.floats(1e-30, 1.0), st.floats(1e-30, 1.0))
    @settings(deadline=None)
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        codes = log_sqrt2_quantize(np.array([[lo, hi]])).codes[0]
        assert codes[0] >= codes[1]  # larger numerator, smaller-or-equal code

    def test_code_range_validation(self):
        with pytest.raises(ValueError):
            LogQTensor(np.array([[16]]), 4)


class TestShiftDequant:
    def test_code_zero_is_one(self):
        d = shift_dequant(0)
        assert d.to_float() == 1.0
        assert d.squared() == Fraction(1)

    def test_code_two_is_half(self):
        assert shift_dequant(2).to_float() == 0.5

    def test_code_one_is_root_half(self):
        d = shift_dequant(1)
        assert d.squared() == Fraction(1, 2)
        assert abs(d.to_float() - SQRT2 / 2) < 1e-15

    def test_code_three(self):
        d = shift_dequant(3)
        assert d.squared() == Fraction(1, 8)
        assert abs(d.to_float() - SQRT2 / 4) < 1e-15

    def test_every_code_squares_to_exact_power(self):
        for bits in (2, 3, 4):
            for c in range(max_code(bits) + 1):
                assert shift_dequant(c, bits).squared() == Fraction(1, 2**c)

    def test_matches_float_dequant(self):
        q = log_sqrt2_quantize(np.array([[0.9, 0.4, 0.11, 0.01]]), bits=4)
        floats = log_sqrt2_dequant_float(q)[0]
        for c, f in zip(q.codes[0], floats):
            assert abs(shift_dequant(int(c)).to_float() - f) < 1e-15

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            shift_dequant(16, 4)
        with pytest.raises(ValueError):
            shift_dequant(-1, 4)

    def test_mixed_parity_square_is_rejected(self):
        v = DyadicRoot2(3, 5, 4)
        with pytest.raises(ValueError):
            v.squared()


class TestShiftAvRow:
    def test_all_zero_codes(self):
        out = shift_av_row(np.array([0, 0]), np.array([7, -3]))
        assert out.to_float() == 4.0

    def test_single_even_shift(self):
        assert shift_av_row(np.array([2]), np.array([8])).to_float() == 4.0

    def test_single_odd_shift(self):
        # code 1 shifts by 1 and lands in the odd accumulator: 8 * 2^(8-1).
        out = shift_av_row(np.array([1]), np.array([8]))
        assert out == DyadicRoot2(0, 1024, 8)
        assert abs(out.to_float() - 4 * SQRT2) < 1e-12
        assert abs(out.to_float() - 5.656854249492381) < 1e-12

    def test_equals_sum_of_single_dequants(self):
        rng = np.random.default_rng(21)
        codes = rng.integers(0, 16, 16)
        v = rng.integers(-128, 128, 16)
        got = shift_av_row(codes, v)
        even = Fraction(0)
        odd = Fraction(0)
        for c, x in zip(codes, v):
            a, b = shift_dequant(int(c)).fractions()
            even += int(x) * a
            odd += int(x) * b
        assert got.fractions() == (even, odd)

    def test_matches_float_oracle_random(self):
        rng = np.random.default_rng(22)
        for _ in range(300):
            codes = rng.integers(0, 16, 16)
            v = rng.integers(-128, 128, 16)
            got = shift_av_row(codes, v).to_float()
            want = float(np.sum(v * np.exp2(-codes / 2.0)))
            assert abs(got - want) <= 1e-12 * max(abs(want), 1.0)

    def test_wide_codes_slow_path(self):
        rng = np.random.default_rng(23)
        codes = rng.integers(0, 2**16, 16)
        v = rng.integers(-128, 128, 16)
        got = shift_av_row(codes, v, bits=16).to_float()
        want = float(np.sum(v * np.exp2(-codes / 2.0)))
        assert abs(got - want) <= 1e-12 * max(abs(want), 1.0)

    def test_b4_accumulators_fit_hardware_width(self):
        # With b=4 the fractional width is 8, so even a long row of max
        # magnitude int8 values stays far inside a 64-bit accumulator.
        codes = np.zeros(4096, dtype=int)
        v = np.full(4096, 127)
        out = shift_av_row(codes, v)
        assert out.frac_bits == 8
        assert abs(out.even) < 2**63 and abs(out.odd) < 2**63

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            shift_av_row(np.array([0, 1]), np.array([1]))


def _vq(v_codes, scale=0.05, bits=8):
    p = QuantParams(bits, True, PER_LAYER, np.array([scale]))
    return QTensor(np.asarray(v_codes, dtype=np.int32), p)


class TestFusedSoftmaxAv:
    def test_uniform_two_scores(self):
        v = _vq([[3], [5]], scale=0.25)
        out, trace = fused_softmax_av(np.array([1.0, 1.0]), v, bits=4)
        assert np.allclose(out, (3 + 5) * 0.25 / 2.0)
        assert list(trace.codes) == [0, 0]

    def test_single_score(self):
        v = _vq([[7, -2]], scale=0.5)
        out, trace = fused_softmax_av(np.array([3.2]), v, bits=4)
        assert np.allclose(out, [3.5, -1.0])
        assert trace.denom == 1.0

    def test_argmax_gets_code_zero(self):
        rng = np.random.default_rng(24)
        for _ in range(100):
            scores = rng.standard_normal(12) * 4
            v = _vq(rng.integers(-128, 128, (12, 3)))
            _, trace = fused_softmax_av(scores, v, bits=4)
            assert trace.codes[int(np.argmax(scores))] == 0

    def test_matches_fake_quant_oracle(self):
        rng = np.random.default_rng(25)
        for _ in range(200):
            scores = rng.standard_normal(8) * 3
            v_codes = rng.integers(-128, 128, (8, 4))
            s_v = float(rng.uniform(0.01, 0.5))
            v = _vq(v_codes, scale=s_v)
            out, _ = fused_softmax_av(scores, v, bits=4)
            # Oracle: softmax numerators, fake log-sqrt2 quantization, then a
            # float matmul with the dequantized values.
            f = np.exp(scores - scores.max())
            codes = log_sqrt2_quantize(f, bits=4).codes
            f_hat = np.exp2(-codes / 2.0)
            want = (f_hat @ (v_codes * s_v)) / f.sum()
            denom = max(np.max(np.abs(want)), 1e-30)
            assert np.max(np.abs(out - want)) / denom < 1e-9

    def test_trace_counts(self):
        v = _vq(np.ones((6, 5), dtype=int))
        _, trace = fused_softmax_av(np.linspace(0, 1, 6), v, bits=4)
        assert trace.shift_adds == 30
        assert trace.scale_multiplies == 5

    def test_per_channel_value_scales(self):
        from qmoevit.quant import PER_CHANNEL

        rng = np.random.default_rng(26)
        scores = rng.standard_normal(6)
        v_codes = rng.integers(-128, 128, (6, 3))
        s_v = np.array([0.1, 0.02, 0.4])
        p = QuantParams(8, True, PER_CHANNEL, s_v)
        out, _ = fused_softmax_av(scores, QTensor(v_codes.astype(np.int32), p), bits=4)
        f = np.exp(scores - scores.max())
        codes = log_sqrt2_quantize(f, bits=4).codes
        want = (np.exp2(-codes / 2.0) @ (v_codes * s_v)) / f.sum()
        assert np.max(np.abs(out - want)) <= 1e-12 * np.max(np.abs(want))

    def test_empty_scores(self):
        with pytest.raises(ValueError):
            fused_softmax_av(np.array([]), _vq([[1]]), bits=4)

    def test_row_count_mismatch(self):
        with pytest.raises(ValueError):
            fused_softmax_av(np.array([0.0, 1.0]), _vq([[1]]), bits=4)

    def test_rejects_asymmetric_values(self):
        p = QuantParams(8, False, PER_LAYER, np.array([0.1]), np.array([3]))
        v = QTensor(np.array([[1], [2]]), p)
        with pytest.raises(ValueError):
            fused_softmax_av(np.array([0.0, 1.0]), v, bits=4)
