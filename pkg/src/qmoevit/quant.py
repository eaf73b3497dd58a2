"""Uniform symmetric/asymmetric quantizers and exact integer matmul.

Conventions used throughout the package:

* rounding is always round-half-to-even (numpy's default), so results can
  be cross-checked against other stacks that use banker's rounding;
* asymmetric codes are unsigned in [0, 2^b - 1], symmetric codes are
  signed in [-2^(b-1), 2^(b-1) - 1];
* "per-channel" means one (scale, zero-point) per column of the tensor
  being calibrated (feature channels for activations, output channels for
  weights stored input-major);
* a constant channel gets the scale floor 1e-8 instead of zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Matrix, as_matrix

PER_LAYER = "per_layer"
PER_CHANNEL = "per_channel"

SCALE_FLOOR = 1e-8

# Symmetric 8-bit codes with inner dims up to 2^15 stay exact in a 32-bit
# accumulator; wider codes are still checked against the int64 budget below.
MAX_INNER_DIM = 1 << 15


def code_range(bits: int, symmetric: bool) -> tuple[int, int]:
    if bits < 2 or bits > 32:
        raise ValueError(f"unsupported bit width {bits}")
    if symmetric:
        return -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


@dataclass(frozen=True)
class QuantParams:
    """Scale/zero-point bundle governing one quantized tensor."""

    bit_width: int
    symmetric: bool
    granularity: str
    scales: np.ndarray
    zero_points: np.ndarray | None = None

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.scales, dtype=np.float64))
        object.__setattr__(self, "scales", s)
        if self.granularity not in (PER_LAYER, PER_CHANNEL):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == PER_LAYER and s.size != 1:
            raise ValueError("per_layer params must hold a single scale")
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise ValueError("scales must be positive and finite")
        code_range(self.bit_width, self.symmetric)
        if self.symmetric:
            if self.zero_points is not None:
                raise ValueError("symmetric params carry no zero points")
        else:
            z = np.atleast_1d(np.asarray(self.zero_points, dtype=np.int64))
            if z.shape != s.shape:
                raise ValueError("zero_points must match scales in length")
            lo, hi = code_range(self.bit_width, symmetric=False)
            if np.any(z < lo) or np.any(z > hi):
                raise ValueError("zero points outside the code range")
            object.__setattr__(self, "zero_points", z)

    @property
    def n_channels(self) -> int:
        return int(self.scales.size)


@dataclass(frozen=True)
class QTensor:
    """Integer codes plus the params that map them back to reals.

    channel_axis says which axis of `codes` the per-channel params run
    along ("col" for activations and input-major weights).
    """

    codes: np.ndarray
    params: QuantParams
    channel_axis: str = "col"

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 2:
            raise ValueError("codes must be 2-D")
        if not np.issubdtype(codes.dtype, np.integer):
            raise ValueError("codes must be an integer array")
        object.__setattr__(self, "codes", codes.astype(np.int32))
        if self.channel_axis not in ("row", "col"):
            raise ValueError("channel_axis must be 'row' or 'col'")
        p = self.params
        lo, hi = code_range(p.bit_width, p.symmetric)
        if codes.size and (codes.min() < lo or codes.max() > hi):
            raise ValueError(f"codes outside [{lo}, {hi}]")
        if p.granularity == PER_CHANNEL:
            n = codes.shape[0] if self.channel_axis == "row" else codes.shape[1]
            if p.n_channels != n:
                raise ValueError(
                    f"params cover {p.n_channels} channels, tensor has {n}"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def _broadcast(self, v: np.ndarray) -> np.ndarray:
        return _axis_view(v, self.channel_axis)


def _axis_view(v: np.ndarray, channel_axis: str) -> np.ndarray:
    if v.size == 1:
        return v.reshape(1, 1)
    return v.reshape(-1, 1) if channel_axis == "row" else v.reshape(1, -1)


def calibrate(
    samples: list[Matrix],
    bits: int,
    symmetric: bool,
    granularity: str = PER_LAYER,
) -> QuantParams:
    """Min-max calibration over a batch of equally wide sample matrices.

    Asymmetric: s = (max - min) / (2^b - 1), z = clip(round(-min / s)).
    Symmetric:  s = max|x| / (2^(b-1) - 1).
    """
    if not samples:
        raise ValueError("calibration needs at least one sample")
    mats = [as_matrix(s, "calibration sample") for s in samples]
    width = mats[0].shape[1]
    if any(m.shape[1] != width for m in mats):
        raise ValueError("calibration samples must share the column count")
    stacked = np.vstack(mats)
    axis = 0 if granularity == PER_CHANNEL else None

    if symmetric:
        peak = np.abs(stacked).max(axis=axis)
        s = np.maximum(np.atleast_1d(peak) / (2 ** (bits - 1) - 1), SCALE_FLOOR)
        return QuantParams(bits, True, granularity, s)

    # The range is nudged to include zero so the zero-point stays inside
    # the code range; a one-sided channel would otherwise clip wholesale.
    lo = np.minimum(np.atleast_1d(stacked.min(axis=axis)), 0.0)
    hi = np.maximum(np.atleast_1d(stacked.max(axis=axis)), 0.0)
    s = np.maximum((hi - lo) / (2**bits - 1), SCALE_FLOOR)
    z = np.clip(np.round(-lo / s), 0, 2**bits - 1).astype(np.int64)
    return QuantParams(bits, False, granularity, s, z)


def quantize(x: Matrix, p: QuantParams, channel_axis: str = "col") -> QTensor:
    """Map reals to integer codes: clip(round(x / s) + z, code range)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("quantize expects a 2-D input")
    if p.granularity == PER_CHANNEL:
        n = x.shape[0] if channel_axis == "row" else x.shape[1]
        if p.n_channels != n:
            raise ValueError(f"params cover {p.n_channels} channels, input has {n}")
    s = _axis_view(p.scales, channel_axis)
    lo, hi = code_range(p.bit_width, p.symmetric)
    codes = np.round(x / s)
    if not p.symmetric:
        codes = codes + _axis_view(p.zero_points, channel_axis)
    codes = np.clip(codes, lo, hi).astype(np.int32)
    return QTensor(codes, p, channel_axis)


def dequantize(q: QTensor) -> Matrix:
    """Elementwise affine inverse: s * (codes - z)."""
    p = q.params
    codes = q.codes.astype(np.float64)
    if not p.symmetric:
        codes = codes - q._broadcast(p.zero_points).astype(np.float64)
    return codes * q._broadcast(p.scales)


def fake_quant(x: Matrix, p: QuantParams, channel_axis: str = "col") -> Matrix:
    """quantize-then-dequantize in one step, for error measurement."""
    return dequantize(quantize(x, p, channel_axis))


def int_matmul(xq: QTensor, wq: QTensor) -> tuple[np.ndarray, np.ndarray | float]:
    """Exact integer product of two symmetric QTensors.

    Returns (acc, scale) where acc = Xq @ Wq in int64 and
    scale = s_x * s_w (a scalar, or a per-output-column vector when the
    weight is per-channel). scale * acc reproduces the dequantized float
    product exactly, up to the float representation of the scales.
    """
    if not (xq.params.symmetric and wq.params.symmetric):
        raise ValueError("int_matmul requires symmetric operands")
    if xq.params.granularity == PER_CHANNEL:
        raise ValueError("activation operand must be per-layer symmetric")
    if wq.params.granularity == PER_CHANNEL and wq.channel_axis != "col":
        raise ValueError("per-channel weights must be per output column")
    n_inner = xq.shape[1]
    if n_inner != wq.shape[0]:
        raise ValueError(f"inner dimensions differ: {xq.shape} x {wq.shape}")
    if n_inner > MAX_INNER_DIM:
        raise ValueError(f"inner dimension {n_inner} exceeds accumulator guard")
    bx, bw = xq.params.bit_width, wq.params.bit_width
    if (1 << (bx - 1)) * (1 << (bw - 1)) * n_inner >= 1 << 62:
        raise ValueError("accumulator may overflow 64 bits for these widths")
    acc = xq.codes.astype(np.int64) @ wq.codes.astype(np.int64)
    s_w = wq.params.scales
    scale = float(xq.params.scales[0]) * (float(s_w[0]) if s_w.size == 1 else s_w)
    return acc, scale


def asym_matmul_expansion(xq: QTensor, wq: QTensor) -> Matrix:
    """Four-term dequantized product for per-layer asymmetric operands.

    Evaluates s_x s_w (Xq Wq - z_x * colsum(Wq) - z_w * rowsum(Xq)
    + K z_x z_w) with exact integer partial terms. Exists to demonstrate
    the cost asymmetric quantization adds over the single-product
    symmetric path, and to validate the expansion against plain
    dequantize-then-multiply.
    """
    for q, role in ((xq, "left"), (wq, "right")):
        if q.params.symmetric or q.params.granularity != PER_LAYER:
            raise ValueError(f"{role} operand must be per-layer asymmetric")
    if xq.shape[1] != wq.shape[0]:
        raise ValueError(f"inner dimensions differ: {xq.shape} x {wq.shape}")
    x = xq.codes.astype(np.int64)
    w = wq.codes.astype(np.int64)
    z_x = int(xq.params.zero_points[0])
    z_w = int(wq.params.zero_points[0])
    n_inner = x.shape[1]
    acc = (
        x @ w
        - z_x * w.sum(axis=0, keepdims=True)
        - z_w * x.sum(axis=1, keepdims=True)
        + n_inner * z_x * z_w
    )
    return float(xq.params.scales[0]) * float(wq.params.scales[0]) * acc.astype(np.float64)


def requantize(acc: np.ndarray, factor, bits: int) -> np.ndarray:
    """Rescale an integer accumulator into symmetric b-bit codes.

    factor is s_in / s_out (scalar or per-column vector); rounding is
    half-to-even, then the codes clip to the symmetric range.
    """
    lo, hi = code_range(bits, symmetric=True)
    scaled = np.round(acc.astype(np.float64) * np.asarray(factor, dtype=np.float64))
    return np.clip(scaled, lo, hi).astype(np.int32)


def quantize_bias(bias: np.ndarray, scale) -> np.ndarray:
    """Integer bias codes at the accumulator scale s_x * s_w (per column)."""
    b = np.asarray(bias, dtype=np.float64)
    codes = np.round(b / np.asarray(scale, dtype=np.float64))
    if np.any(np.abs(codes) >= 2**62):
        raise ValueError("bias codes overflow the accumulator width")
    return codes.astype(np.int64)
