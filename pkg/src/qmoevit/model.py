"""Float reference forward pass for a MoE vision transformer.

The model consumes a pre-embedded token matrix (N x D); there is no
patchifier and no CLS token (classification head mean-pools the tokens).
Selected blocks replace their MLP with a mixture-of-experts: a linear
gate picks the top-k experts per token and the block output is the
gate-weighted sum of the selected expert MLPs.

This module is the ground truth the quantized pipeline is measured
against, so everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Matrix, Rng, as_matrix, gelu, layernorm

BIAS_SCALE = 0.01


@dataclass(frozen=True)
class ModelConfig:
    n_tokens: int
    dim: int
    n_heads: int
    head_dim: int
    n_blocks: int
    mlp_ratio: int = 4
    n_experts: int = 4
    top_k: int = 2
    moe_blocks: tuple[int, ...] | None = None
    n_classes: int = 10

    def __post_init__(self):
        if self.moe_blocks is None:
            # Alternate MLP/MoE: odd-indexed blocks become MoE blocks.
            object.__setattr__(
                self, "moe_blocks", tuple(i for i in range(self.n_blocks) if i % 2 == 1)
            )
        else:
            object.__setattr__(self, "moe_blocks", tuple(sorted(set(self.moe_blocks))))
        if self.n_tokens < 1 or self.dim < 1 or self.n_blocks < 0:
            raise ValueError("n_tokens and dim must be >= 1")
        if self.n_heads * self.head_dim != self.dim:
            raise ValueError(
                f"n_heads * head_dim must equal dim "
                f"({self.n_heads} * {self.head_dim} != {self.dim})"
            )
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("need 1 <= top_k <= n_experts")
        if any(i < 0 or i >= self.n_blocks for i in self.moe_blocks):
            raise ValueError("moe_blocks indices out of range")
        if self.mlp_ratio < 1 or self.n_classes < 1:
            raise ValueError("mlp_ratio and n_classes must be >= 1")

    @property
    def hidden_dim(self) -> int:
        return self.mlp_ratio * self.dim

    def is_moe(self, block: int) -> bool:
        return block in self.moe_blocks


@dataclass
class MlpWeights:
    w1: Matrix  # D x H
    b1: np.ndarray
    w2: Matrix  # H x D
    b2: np.ndarray


@dataclass
class MoeWeights:
    w_gate: Matrix  # D x m
    b_gate: np.ndarray
    experts: list[MlpWeights]


@dataclass
class BlockWeights:
    """One transformer block.

    w_qkv is D x 3D laid out head-major: head i owns the column slab
    [3*Dh*i, 3*Dh*(i+1)) split as [Q_i | K_i | V_i].
    """

    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    w_qkv: Matrix
    b_qkv: np.ndarray
    w_o: Matrix
    b_o: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    ffn: MlpWeights | MoeWeights


@dataclass
class ModelWeights:
    blocks: list[BlockWeights]
    head_w: Matrix  # D x n_classes
    head_b: np.ndarray


@dataclass(frozen=True)
class GateDecision:
    """Routing choice for one token: selected experts and their weights.

    Experts are listed by descending gate logit (ties broken toward the
    lower index); weights are the softmax over the retained logits only,
    so they are positive and sum to 1.
    """

    experts: tuple[int, ...]
    weights: np.ndarray


@dataclass
class ForwardTrace:
    """Per-site activations plus routing decisions from one forward pass."""

    sites: dict[str, Matrix] = field(default_factory=dict)
    gates: dict[int, list[GateDecision]] = field(default_factory=dict)


def head_slices(cfg: ModelConfig, head: int) -> tuple[slice, slice, slice]:
    """Column slices of w_qkv holding (Q, K, V) for one head."""
    d = cfg.head_dim
    base = 3 * d * head
    return (
        slice(base, base + d),
        slice(base + d, base + 2 * d),
        slice(base + 2 * d, base + 3 * d),
    )


def softmax_rows(scores: Matrix) -> Matrix:
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def msa_forward(
    x_norm: Matrix,
    bw: BlockWeights,
    cfg: ModelConfig,
    sink: ForwardTrace | None = None,
    prefix: str = "",
) -> Matrix:
    """Multi-head self-attention on a normalized token matrix."""
    x_norm = np.asarray(x_norm, dtype=np.float64)
    if x_norm.shape != (cfg.n_tokens, cfg.dim):
        raise ValueError(f"expected {(cfg.n_tokens, cfg.dim)}, got {x_norm.shape}")
    if bw.w_qkv.shape != (cfg.dim, 3 * cfg.dim):
        raise ValueError("w_qkv shape inconsistent with config")
    qkv = x_norm @ bw.w_qkv + bw.b_qkv
    heads = []
    qs, ks, vs, probs = [], [], [], []
    for i in range(cfg.n_heads):
        sq, sk, sv = head_slices(cfg, i)
        q, k, v = qkv[:, sq], qkv[:, sk], qkv[:, sv]
        p = softmax_rows(q @ k.T / np.sqrt(cfg.head_dim))
        heads.append(p @ v)
        if sink is not None:
            qs.append(q)
            ks.append(k)
            vs.append(v)
            probs.append(p)
    attn = np.concatenate(heads, axis=1)
    if sink is not None:
        sink.sites[f"{prefix}q"] = np.concatenate(qs, axis=1)
        sink.sites[f"{prefix}k"] = np.concatenate(ks, axis=1)
        sink.sites[f"{prefix}v"] = np.concatenate(vs, axis=1)
        sink.sites[f"{prefix}attn_probs"] = np.concatenate(probs, axis=0)
        sink.sites[f"{prefix}attn_out"] = attn
    return attn @ bw.w_o + bw.b_o


def top_k_gate(y_row: np.ndarray, w_g: Matrix, b_g: np.ndarray, k: int) -> GateDecision:
    """Route one token: keep the k largest gate logits, softmax over them."""
    logits = np.asarray(y_row, dtype=np.float64) @ w_g + b_g
    if not 1 <= k <= logits.size:
        raise ValueError(f"k={k} out of range for {logits.size} experts")
    order = np.argsort(-logits, kind="stable")  # stable sort = lower index wins ties
    chosen = order[:k]
    kept = logits[chosen]
    e = np.exp(kept - kept.max())
    return GateDecision(tuple(int(j) for j in chosen), e / e.sum())


def mlp_forward(y_norm: Matrix, w: MlpWeights, sink: ForwardTrace | None = None,
                site: str = "") -> Matrix:
    hidden = gelu(y_norm @ w.w1 + w.b1)
    if sink is not None:
        sink.sites[site] = hidden
    return hidden @ w.w2 + w.b2


def moe_forward(
    y_norm: Matrix,
    weights: MoeWeights,
    k: int,
    sink: ForwardTrace | None = None,
    prefix: str = "",
) -> tuple[Matrix, list[GateDecision]]:
    """Gate-weighted sum of the selected expert MLPs, token by token.

    Returns the block output and the per-token routing decisions (the
    decisions also feed the accelerator simulator's expert load model).
    """
    y_norm = np.asarray(y_norm, dtype=np.float64)
    n = y_norm.shape[0]
    decisions = [top_k_gate(y_norm[t], weights.w_gate, weights.b_gate, k) for t in range(n)]
    out = np.zeros((n, weights.experts[0].w2.shape[1]))
    for j, expert in enumerate(weights.experts):
        rows = [t for t in range(n) if j in decisions[t].experts]
        if not rows:
            continue
        coef = np.array(
            [decisions[t].weights[decisions[t].experts.index(j)] for t in rows]
        )
        out[rows] += coef[:, None] * mlp_forward(y_norm[rows], expert)
    if sink is not None:
        sink.sites[f"{prefix}gate_logits"] = y_norm @ weights.w_gate + weights.b_gate
        # Experts are traced densely (all tokens) so every expert's hidden
        # site has calibration data even when routing starves it.
        for j, expert in enumerate(weights.experts):
            sink.sites[f"{prefix}e{j}.hidden"] = gelu(y_norm @ expert.w1 + expert.b1)
    return out, decisions


def forward(
    x: Matrix,
    weights: ModelWeights,
    cfg: ModelConfig,
    trace: ForwardTrace | None = None,
) -> np.ndarray:
    """Run the block stack and classification head.

    Per block: x += MSA(LN1(x)); x += FFN(LN2(x)). The head mean-pools
    tokens and maps to class logits. Pass a ForwardTrace to capture every
    post-LayerNorm / post-Softmax / linear-input activation plus the gate
    decisions (needed for calibration and the dataflow simulator).
    """
    x = as_matrix(x, "input")
    if x.shape != (cfg.n_tokens, cfg.dim):
        raise ValueError(f"expected input {(cfg.n_tokens, cfg.dim)}, got {x.shape}")
    if len(weights.blocks) != cfg.n_blocks:
        raise ValueError("weight stack depth inconsistent with config")
    for i, bw in enumerate(weights.blocks):
        pre = f"b{i}."
        xn = layernorm(x, bw.ln1_gamma, bw.ln1_beta)
        if trace is not None:
            trace.sites[pre + "ln1"] = xn
        x = x + msa_forward(xn, bw, cfg, sink=trace, prefix=pre)
        yn = layernorm(x, bw.ln2_gamma, bw.ln2_beta)
        if trace is not None:
            trace.sites[pre + "ln2"] = yn
        if cfg.is_moe(i):
            if not isinstance(bw.ffn, MoeWeights):
                raise ValueError(f"block {i} configured as MoE but holds MLP weights")
            out, decisions = moe_forward(yn, bw.ffn, cfg.top_k, sink=trace, prefix=pre)
            if trace is not None:
                trace.gates[i] = decisions
        else:
            if not isinstance(bw.ffn, MlpWeights):
                raise ValueError(f"block {i} configured as MLP but holds MoE weights")
            out = mlp_forward(yn, bw.ffn, sink=trace, site=pre + "mlp.hidden")
        x = x + out
    pooled = x.mean(axis=0)
    return pooled @ weights.head_w + weights.head_b


def random_weights(
    cfg: ModelConfig,
    rng: Rng,
    gamma_sigma: float = 0.5,
    beta_sigma: float = 0.25,
) -> ModelWeights:
    """Synthetic weights: Gaussians scaled by 1/sqrt(fan_in).

    LayerNorm gamma is drawn log-normal with the given sigma; cranking
    sigma up reproduces the strong inter-channel variance of post-LN
    activations that per-layer quantization handles badly. The linear
    layer consuming each LayerNorm has its rows compensated by 1/gamma,
    the way trained transformers adapt to their activation scales: the
    float function stays well-conditioned while every channel, small or
    large, carries equal information. Without that compensation the
    small channels a coarse quantizer destroys would be the ones that
    barely matter, and the model would not discriminate quantizer
    quality.
    """
    d, h = cfg.dim, cfg.hidden_dim

    def linear(r: Rng, fan_in: int, fan_out: int, row_scale=None):
        w = r.stream("w").normal(fan_in, fan_out, scale=1.0 / np.sqrt(fan_in))
        if row_scale is not None:
            w = w / row_scale[:, None]
        b = r.stream("b").normal(fan_out, scale=BIAS_SCALE)
        return w, b

    def mlp(r: Rng, gamma) -> MlpWeights:
        w1, b1 = linear(r.stream("fc1"), d, h, row_scale=gamma)
        w2, b2 = linear(r.stream("fc2"), h, d)
        return MlpWeights(w1, b1, w2, b2)

    blocks = []
    for i in range(cfg.n_blocks):
        r = rng.stream(f"block{i}")
        ln1_gamma = r.stream("ln1.gamma").lognormal(d, gamma_sigma)
        ln2_gamma = r.stream("ln2.gamma").lognormal(d, gamma_sigma)
        w_qkv, b_qkv = linear(r.stream("qkv"), d, 3 * d, row_scale=ln1_gamma)
        w_o, b_o = linear(r.stream("proj"), d, d)
        if cfg.is_moe(i):
            w_g, b_g = linear(r.stream("gate"), d, cfg.n_experts, row_scale=ln2_gamma)
            experts = [mlp(r.stream(f"expert{j}"), ln2_gamma) for j in range(cfg.n_experts)]
            ffn: MlpWeights | MoeWeights = MoeWeights(w_g, b_g, experts)
        else:
            ffn = mlp(r.stream("mlp"), ln2_gamma)
        blocks.append(
            BlockWeights(
                ln1_gamma=ln1_gamma,
                ln1_beta=r.stream("ln1.beta").normal(d, scale=beta_sigma),
                w_qkv=w_qkv,
                b_qkv=b_qkv,
                w_o=w_o,
                b_o=b_o,
                ln2_gamma=ln2_gamma,
                ln2_beta=r.stream("ln2.beta").normal(d, scale=beta_sigma),
                ffn=ffn,
            )
        )
    head_w, head_b = linear(rng.stream("head"), d, cfg.n_classes)
    return ModelWeights(blocks, head_w, head_b)


def random_inputs(cfg: ModelConfig, rng: Rng, count: int) -> list[Matrix]:
    """Seeded batch of pre-embedded token matrices.

    Entries are uniform with unit variance. Bounded support keeps min-max
    calibration ranges representative of unseen inputs, which an unbounded
    distribution would not.
    """
    r = rng.stream("inputs")
    lim = float(np.sqrt(3.0))
    return [
        r.stream(f"x{i}").uniform(-lim, lim, (cfg.n_tokens, cfg.dim))
        for i in range(count)
    ]
