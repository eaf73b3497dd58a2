"""Fold per-channel asymmetric post-LayerNorm quantization into a
per-layer symmetric quantizer by rewriting LayerNorm and its consumers.

Given per-channel factors (s, z) for a LayerNorm output X, define

    r1 = s / s_tilde          (s_tilde = mean of the channel scales)
    r2 = z - 2^(b-1)          (exact integers)

and rewrite gamma' = gamma / r1, beta' = (beta + s*r2) / r1. The rewritten
LayerNorm emits X' = (X + s*r2) / r1, whose per-layer symmetric codes at
scale s_tilde equal the original per-channel asymmetric codes shifted by
2^(b-1) -- exactly, element for element, because r2 is integral so the
rounding commutes:

    clip(round(X'/s_tilde), -2^(b-1), 2^(b-1)-1)
        == clip(round(X/s) + z, 0, 2^b - 1) - 2^(b-1)

Every consumer of X is compensated with W' = diag(r1) W and
b' = b - W^T (s*r2) so X W + b == X' W' + b'. In an MoE block the same
factors rewrite every expert's first linear layer and the gate, which
keeps the top-k routing decisions bit-for-bit identical.

Note the division convention: r1 = s / s_tilde, so channels with large
scales are shrunk. Some formulations print the reciprocal; this one is
pinned by the code-equivalence property above (see tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BlockWeights, MlpWeights, MoeWeights, ModelConfig, ModelWeights
from .numerics import Matrix
from .quant import PER_CHANNEL, QuantParams

SITE_LN1 = "ln1"
SITE_LN2 = "ln2"

GEOMETRIC = "geometric"
ARITHMETIC = "arithmetic"


@dataclass(frozen=True)
class ReparamFactors:
    """Per-channel transformation factors for one LayerNorm site."""

    r1: np.ndarray
    r2: np.ndarray
    s_tilde: float
    source: QuantParams

    def __post_init__(self):
        r1 = np.asarray(self.r1, dtype=np.float64)
        r2 = np.asarray(self.r2, dtype=np.int64)
        object.__setattr__(self, "r1", r1)
        object.__setattr__(self, "r2", r2)
        if r1.shape != r2.shape or r1.ndim != 1:
            raise ValueError("r1 and r2 must be 1-D and equally long")
        if np.any(r1 <= 0) or not np.all(np.isfinite(r1)):
            raise ValueError("r1 must be positive and finite")
        if self.s_tilde <= 0:
            raise ValueError("s_tilde must be positive")

    @property
    def dim(self) -> int:
        return int(self.r1.size)

    @property
    def offset(self) -> np.ndarray:
        """The additive term s * r2 applied to the LayerNorm output."""
        return self.source.scales * self.r2.astype(np.float64)

    def is_identity(self) -> bool:
        return bool(np.all(self.r1 == 1.0) and np.all(self.r2 == 0))


def compute_factors(p: QuantParams, mean: str = ARITHMETIC) -> ReparamFactors:
    """Derive (r1, r2, s_tilde) from calibrated per-channel asymmetric params.

    s_tilde defaults to the arithmetic mean of the channel scales; a
    geometric mean is available behind the flag but is not the default.
    """
    if p.granularity != PER_CHANNEL or p.symmetric:
        raise ValueError("reparameterization expects per-channel asymmetric params")
    s = p.scales
    if mean == ARITHMETIC:
        s_tilde = float(np.mean(s))
    elif mean == GEOMETRIC:
        s_tilde = float(np.exp(np.mean(np.log(s))))
    else:
        raise ValueError(f"unknown mean {mean!r}")
    r1 = s / s_tilde
    r2 = p.zero_points - (1 << (p.bit_width - 1))
    return ReparamFactors(r1, r2, s_tilde, p)


def rewrite_layernorm(gamma, beta, f: ReparamFactors) -> tuple[np.ndarray, np.ndarray]:
    """beta' = (beta + s*r2) / r1, gamma' = gamma / r1."""
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != (f.dim,) or beta.shape != (f.dim,):
        raise ValueError("gamma/beta length must match the factor dimension")
    return gamma / f.r1, (beta + f.offset) / f.r1


def undo_layernorm_rewrite(gamma_p, beta_p, f: ReparamFactors):
    """Analytic inverse of rewrite_layernorm."""
    gamma_p = np.asarray(gamma_p, dtype=np.float64)
    beta_p = np.asarray(beta_p, dtype=np.float64)
    return gamma_p * f.r1, beta_p * f.r1 - f.offset


def rewrite_next_linear(w: Matrix, bias, f: ReparamFactors) -> tuple[Matrix, np.ndarray]:
    """W' = diag(r1) W (row c scaled by r1_c), b' = b - W^T (s*r2)."""
    w = np.asarray(w, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != f.dim:
        raise ValueError(f"weight must have {f.dim} rows, got {w.shape}")
    if bias.shape != (w.shape[1],):
        raise ValueError("bias length must equal the weight column count")
    return f.r1[:, None] * w, bias - w.T @ f.offset


def undo_linear_rewrite(w_p: Matrix, bias_p, f: ReparamFactors):
    """Analytic inverse of rewrite_next_linear."""
    w_p = np.asarray(w_p, dtype=np.float64)
    bias_p = np.asarray(bias_p, dtype=np.float64)
    w = w_p / f.r1[:, None]
    return w, bias_p + w.T @ f.offset


def rewrite_block(bw: BlockWeights, site: str, f: ReparamFactors) -> BlockWeights:
    """Rewrite one LayerNorm site of a block together with its consumers.

    ln1 feeds the qkv projection; ln2 feeds the MLP's first linear layer,
    or in an MoE block every expert's first linear layer plus the gate
    (all with the same factors, so routing is preserved).
    """
    if site == SITE_LN1:
        gamma, beta = rewrite_layernorm(bw.ln1_gamma, bw.ln1_beta, f)
        w_qkv, b_qkv = rewrite_next_linear(bw.w_qkv, bw.b_qkv, f)
        return BlockWeights(
            ln1_gamma=gamma, ln1_beta=beta, w_qkv=w_qkv, b_qkv=b_qkv,
            w_o=bw.w_o, b_o=bw.b_o,
            ln2_gamma=bw.ln2_gamma, ln2_beta=bw.ln2_beta, ffn=bw.ffn,
        )
    if site != SITE_LN2:
        raise ValueError(f"unknown reparam site {site!r}")
    gamma, beta = rewrite_layernorm(bw.ln2_gamma, bw.ln2_beta, f)
    if isinstance(bw.ffn, MoeWeights):
        w_gate, b_gate = rewrite_next_linear(bw.ffn.w_gate, bw.ffn.b_gate, f)
        experts = []
        for e in bw.ffn.experts:
            w1, b1 = rewrite_next_linear(e.w1, e.b1, f)
            experts.append(MlpWeights(w1, b1, e.w2, e.b2))
        ffn: MlpWeights | MoeWeights = MoeWeights(w_gate, b_gate, experts)
    elif isinstance(bw.ffn, MlpWeights):
        w1, b1 = rewrite_next_linear(bw.ffn.w1, bw.ffn.b1, f)
        ffn = MlpWeights(w1, b1, bw.ffn.w2, bw.ffn.b2)
    else:
        raise ValueError("block ffn is neither MLP nor MoE weights")
    return BlockWeights(
        ln1_gamma=bw.ln1_gamma, ln1_beta=bw.ln1_beta,
        w_qkv=bw.w_qkv, b_qkv=bw.b_qkv, w_o=bw.w_o, b_o=bw.b_o,
        ln2_gamma=gamma, ln2_beta=beta, ffn=ffn,
    )


def rewrite_model(
    weights: ModelWeights,
    cfg: ModelConfig,
    factors: dict[str, ReparamFactors],
) -> ModelWeights:
    """Apply per-site factors across the whole block stack.

    factors is keyed "b{i}.ln1" / "b{i}.ln2"; sites without an entry are
    left untouched. The rewritten model is functionally equivalent to the
    original in float arithmetic.
    """
    blocks = []
    for i, bw in enumerate(weights.blocks):
        for site in (SITE_LN1, SITE_LN2):
            f = factors.get(f"b{i}.{site}")
            if f is not None:
                bw = rewrite_block(bw, site, f)
        blocks.append(bw)
    return ModelWeights(blocks, weights.head_w, weights.head_b)


def reparam_codes(x: Matrix, f: ReparamFactors) -> np.ndarray:
    """Per-layer symmetric codes of the transformed activation X'.

    Provided for direct verification of the code-equivalence identity:
    these equal quantize(x, source_params) - 2^(b-1) exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    b = f.source.bit_width
    x_p = (x + f.offset) / f.r1
    half = 1 << (b - 1)
    return np.clip(np.round(x_p / f.s_tilde), -half, half - 1).astype(np.int32)
