"""Log-base-sqrt(2) quantization of softmax numerators and the shift-only
attention-value product built on it.

Softmax numerators live in (0, 1], so the quantizer needs no scale:
codes are c = clip(round(-2 * log2(a)), 0, 2^b - 1) and the represented
value is 2^(-c/2). The half-power grid splits by parity:

    even c = 2k     ->  2^(-k)            (a pure right-shift)
    odd  c = 2k+1   ->  2^(-(k+1)) * sqrt(2)

so a dot product sum(v_i * 2^(-c_i/2)) needs only shifts and adds, kept
in two integer accumulators (even-parity and odd-parity terms); a single
multiply by sqrt(2) at read-out folds together with the softmax
denominator and the value scale. The shift count is ceil(c/2), i.e. the
odd case shifts one bit further and carries the sqrt(2) factor; that is
what makes the decomposition exact rather than a power-of-two
approximation.

DyadicRoot2 holds the accumulator pair exactly (arbitrary-precision
ints), so the decomposition identities can be tested as rationals, not
just to float tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .quant import QTensor, _axis_view

SQRT2 = float(np.sqrt(2.0))

# Largest fractional width that still runs through the vectorized int64
# accumulation path; beyond it we fall back to exact Python integers.
_FAST_FRAC_BITS = 45


def max_code(bits: int) -> int:
    if bits < 2 or bits > 24:
        raise ValueError(f"unsupported attention bit width {bits}")
    return (1 << bits) - 1


def _frac_bits(bits: int, shifts: np.ndarray) -> int:
    """Fractional width covering every shift in this accumulation.

    The nominal width ceil((2^b - 1)/2) is used as long as it is small
    enough to stay practical (b = 4 gives the hardware-shaped 8); for
    wide codes the width adapts to the largest shift actually present,
    which represents the same rational values with far smaller integers.
    """
    full = ((1 << bits)) // 2  # ceil((2^b - 1)/2)
    if full <= 62:
        return full
    return max(int(shifts.max(initial=1)), 1)


@dataclass(frozen=True)
class LogQTensor:
    """Attention-map codes under the log-sqrt2 quantizer (scale fixed at 1)."""

    codes: np.ndarray
    bit_width: int = 4

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if not np.issubdtype(codes.dtype, np.integer):
            raise ValueError("codes must be integers")
        hi = max_code(self.bit_width)
        if codes.size and (codes.min() < 0 or codes.max() > hi):
            raise ValueError(f"codes outside [0, {hi}]")
        object.__setattr__(self, "codes", codes.astype(np.int32))

    @property
    def base_scale(self) -> float:
        return 1.0


@dataclass(frozen=True)
class DyadicRoot2:
    """Exact value (even + sqrt(2) * odd) / 2^frac_bits.

    even/odd are arbitrary-precision integers; frac_bits is large enough
    that every shift folded in was exact, so the value is an exact element
    of Z[sqrt(2)] scaled by a power of two.
    """

    even: int
    odd: int
    frac_bits: int

    def fractions(self) -> tuple[Fraction, Fraction]:
        """(rational part, coefficient of sqrt(2)) as exact fractions."""
        d = 1 << self.frac_bits
        return Fraction(self.even, d), Fraction(self.odd, d)

    def squared(self) -> Fraction:
        """Exact square, defined when only one accumulator is populated.

        A mixed value (a + sqrt2 b)^2 has an irrational cross term, so the
        exact rational square exists only for pure-parity values, which is
        what single-code dequantization produces.
        """
        a, b = self.fractions()
        if a != 0 and b != 0:
            raise ValueError("square of a mixed-parity value is irrational")
        return a * a + 2 * b * b

    def to_float(self) -> float:
        a, b = self.fractions()
        return float(a) + SQRT2 * float(b)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DyadicRoot2):
            return NotImplemented
        # sqrt(2) is irrational, so values match iff both components do.
        return self.fractions() == other.fractions()

    def __hash__(self):
        return hash(self.fractions())


def log_sqrt2_quantize(a, bits: int = 4) -> LogQTensor:
    """codes = clip(round(-2 * log2(a)), 0, 2^b - 1) for a in [0, 1].

    Exact zeros (possible after max-subtraction underflow) take the max
    code, the clip limit for infinitely small values.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValueError("nothing to quantize")
    if np.any(a < 0) or np.any(a > 1) or not np.all(np.isfinite(a)):
        raise ValueError("log quantizer input must lie in [0, 1]")
    hi = max_code(bits)
    with np.errstate(divide="ignore"):
        raw = np.round(-2.0 * np.log2(a))
    codes = np.where(a == 0.0, hi, np.clip(raw, 0, hi)).astype(np.int64)
    return LogQTensor(codes, bits)


def log_sqrt2_dequant_float(q: LogQTensor) -> np.ndarray:
    """Float reference dequantization 2^(-c/2) (oracle path, not shifts)."""
    return np.exp2(-q.codes.astype(np.float64) / 2.0)


def shift_dequant(code: int, bits: int = 4) -> DyadicRoot2:
    """Exact value of one code: right-shift by ceil(c/2), sqrt(2) on odd c."""
    code = int(code)
    if not 0 <= code <= max_code(bits):
        raise ValueError(f"code {code} out of range for {bits} bits")
    shift = (code + 1) // 2
    frac = _frac_bits(bits, np.array([shift]))
    mag = 1 << (frac - shift)
    if code % 2 == 0:
        return DyadicRoot2(mag, 0, frac)
    return DyadicRoot2(0, mag, frac)


def _shift_av_block(codes: np.ndarray, v: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Accumulate sum_i v[i, :] * 2^(-codes[i]/2) into per-parity integer columns.

    Returns (even, odd, frac_bits) with object-dtype arrays of Python ints
    when the exact values exceed the int64 fast path.
    """
    codes = np.asarray(codes)
    v = np.asarray(v)
    if codes.ndim != 1 or v.ndim != 2 or v.shape[0] != codes.size:
        raise ValueError("codes must be 1-D and match the value row count")
    hi = max_code(bits)
    if codes.size and (codes.min() < 0 or codes.max() > hi):
        raise ValueError(f"codes outside [0, {hi}]")
    shifts = (codes.astype(np.int64) + 1) // 2
    frac = _frac_bits(bits, shifts)
    if np.any(shifts > frac):
        raise ValueError("shift exceeds the fractional width")
    odd_mask = (codes % 2).astype(bool)
    peak = int(np.abs(v).max(initial=0))
    if frac <= _FAST_FRAC_BITS and peak * codes.size < 1 << (62 - frac):
        weights = (np.int64(1) << (frac - shifts)).astype(np.int64)
        even = v.T.astype(np.int64) @ np.where(odd_mask, 0, weights)
        odd = v.T.astype(np.int64) @ np.where(odd_mask, weights, 0)
        return even, odd, frac
    even = np.zeros(v.shape[1], dtype=object)
    odd = np.zeros(v.shape[1], dtype=object)
    for i in range(codes.size):
        term = [int(x) << int(frac - shifts[i]) for x in v[i]]
        if odd_mask[i]:
            odd += np.array(term, dtype=object)
        else:
            even += np.array(term, dtype=object)
    return even, odd, frac


def shift_av_row(a_codes, v_q, bits: int = 4) -> DyadicRoot2:
    """Shift-only dot product sum_i v_q[i] * 2^(-a_codes[i]/2), exact.

    One shifted add per element: even codes land in the even accumulator,
    odd codes in the odd accumulator (which implicitly carries sqrt(2)).
    """
    a_codes = np.asarray(a_codes)
    v = np.asarray(v_q).reshape(-1, 1)
    if v.shape[0] != a_codes.size:
        raise ValueError("code and value vectors must be equally long")
    even, odd, frac = _shift_av_block(a_codes, v, bits)
    return DyadicRoot2(int(even[0]), int(odd[0]), frac)


@dataclass(frozen=True)
class SoftmaxPipelineTrace:
    """Pass boundaries of one fused softmax/AV row, for the simulator."""

    max_score: float
    denom: float
    codes: np.ndarray
    shift_adds: int
    scale_multiplies: int


def fused_softmax_av(
    scores, v_q: QTensor, bits: int = 4
) -> tuple[np.ndarray, SoftmaxPipelineTrace]:
    """Three-pass softmax fused with the shift-only value product.

    Pass 1 finds the running max; pass 2 forms the numerators
    f = exp(s - max), accumulates the denominator l = sum(f) in full
    precision, and log-quantizes f; pass 3 multiplies the quantized
    numerators into V using shifts only, then applies the single
    recip(l) * s_v multiply per output channel (the sqrt(2) parity factor
    rides along in that same multiply).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores must be a non-empty 1-D row")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not v_q.params.symmetric:
        raise ValueError("value tensor must be symmetric-quantized")
    if v_q.shape[0] != scores.size:
        raise ValueError("value row count must match the score length")

    m = float(scores.max())
    f = np.exp(scores - m)
    denom = float(f.sum())
    codes = log_sqrt2_quantize(f, bits).codes

    even, odd, frac = _shift_av_block(codes, v_q.codes, bits)
    if even.dtype == object:
        ladder = np.array([float(Fraction(int(e), 1 << frac)) for e in even])
        ladder_odd = np.array([float(Fraction(int(o), 1 << frac)) for o in odd])
    else:
        ladder = even.astype(np.float64) / (1 << frac)
        ladder_odd = odd.astype(np.float64) / (1 << frac)
    shifted = ladder + SQRT2 * ladder_odd

    s_v = _axis_view(v_q.params.scales, v_q.channel_axis).reshape(-1)
    out = shifted * (s_v / denom)
    trace = SoftmaxPipelineTrace(
        max_score=m,
        denom=denom,
        codes=codes,
        shift_adds=int(codes.size * v_q.shape[1]),
        scale_multiplies=int(v_q.shape[1]),
    )
    return out, trace
