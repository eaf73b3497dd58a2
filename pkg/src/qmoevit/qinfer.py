"""End-to-end integer inference for the MoE transformer.

The quantization scheme pairs two activation treatments:

* post-LayerNorm sites are calibrated per-channel asymmetric, then folded
  into per-layer symmetric quantizers via the LayerNorm/consumer rewrite
  (so execution sees only single-scale symmetric tensors);
* attention maps go through the log-sqrt2 quantizer and the shift-only
  value product;
* every other linear input is plain per-layer symmetric, weights are
  per-output-channel symmetric, biases ride in the integer accumulator at
  the s_in * s_w scale.

The residual stream stays in double precision and is re-quantized at each
module input, matching a design whose quantizers sit at module
boundaries. The gate of an MoE block is evaluated in double on the
dequantized LayerNorm output: routing is control flow, so it is kept
high-precision and its fidelity is tested as a property rather than
forced through the integer datapath.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as fmodel
from .logquant import fused_softmax_av
from .model import (
    ForwardTrace,
    MlpWeights,
    ModelConfig,
    ModelWeights,
    MoeWeights,
    top_k_gate,
)
from .numerics import Matrix, as_matrix, gelu, layernorm
from .quant import (
    PER_CHANNEL,
    PER_LAYER,
    QTensor,
    QuantParams,
    calibrate,
    dequantize,
    int_matmul,
    quantize,
    quantize_bias,
    requantize,
)
from .reparam import ReparamFactors, compute_factors, rewrite_model

ATTN_SHIFT = "shift"
ATTN_UNIFORM = "uniform"


@dataclass(frozen=True)
class QuantizeOptions:
    weight_bits: int = 8
    act_bits: int = 8
    attn_bits: int = 4
    reparam: bool = True
    attn_quantizer: str = ATTN_SHIFT
    per_channel_weights: bool = True
    scale_mean: str = "arithmetic"

    def __post_init__(self):
        for b in (self.weight_bits, self.act_bits, self.attn_bits):
            if not 2 <= b <= 16:
                raise ValueError(f"bit width {b} out of the supported 2..16 range")
        if self.attn_quantizer not in (ATTN_SHIFT, ATTN_UNIFORM):
            raise ValueError(f"unknown attention quantizer {self.attn_quantizer!r}")


@dataclass
class QLinear:
    """One integer linear layer: symmetric activation codes in,
    int64 accumulator (bias included) out."""

    in_params: QuantParams
    wq: QTensor
    bias_acc: np.ndarray

    @property
    def s_in(self) -> float:
        return float(self.in_params.scales[0])

    @property
    def out_scale(self):
        """s_in * s_w, scalar or per-output-column vector."""
        s_w = self.wq.params.scales
        return self.s_in * (float(s_w[0]) if s_w.size == 1 else s_w)

    def run(self, x_codes: np.ndarray) -> np.ndarray:
        xq = QTensor(x_codes, self.in_params)
        acc, _ = int_matmul(xq, self.wq)
        return acc + self.bias_acc


@dataclass
class QMlp:
    fc1: QLinear
    fc2: QLinear  # fc2.in_params is the post-GELU hidden site


@dataclass
class QMoe:
    w_gate: Matrix  # rewritten, evaluated in double
    b_gate: np.ndarray
    experts: list[QMlp]


@dataclass
class QBlock:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln1_params: QuantParams
    qkv: QLinear
    q_params: QuantParams
    k_params: QuantParams
    v_params: QuantParams
    proj: QLinear  # w_o; proj.in_params is the attention-output site
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    ln2_params: QuantParams
    ffn: QMlp | QMoe


@dataclass
class QuantizedModel:
    """Immutable-after-build quantized model plus its provenance.

    factors records the reparameterization applied at each rewritten
    LayerNorm site (empty when reparam was off); float_ref keeps the
    original float weights so per-site error can always be measured
    against the reference activations.
    """

    cfg: ModelConfig
    opts: QuantizeOptions
    blocks: list[QBlock]
    head_w: Matrix
    head_b: np.ndarray
    factors: dict[str, ReparamFactors]
    float_ref: ModelWeights


def _per_layer_sym(samples: list[Matrix], bits: int) -> QuantParams:
    return calibrate(samples, bits, symmetric=True, granularity=PER_LAYER)


def _collect_traces(
    weights: ModelWeights, cfg: ModelConfig, calib: list[Matrix]
) -> dict[str, list[Matrix]]:
    sites: dict[str, list[Matrix]] = {}
    for x in calib:
        t = ForwardTrace()
        fmodel.forward(x, weights, cfg, trace=t)
        for key, val in t.sites.items():
            sites.setdefault(key, []).append(val)
    return sites


def _quantize_linear(
    w: Matrix, bias: np.ndarray, in_params: QuantParams, opts: QuantizeOptions
) -> QLinear:
    granularity = PER_CHANNEL if opts.per_channel_weights else PER_LAYER
    wp = calibrate([w], opts.weight_bits, symmetric=True, granularity=granularity)
    wq = quantize(w, wp, channel_axis="col")
    s_in = float(in_params.scales[0])
    bias_acc = quantize_bias(bias, s_in * wp.scales)
    return QLinear(in_params, wq, bias_acc)


def build_quantized(
    weights: ModelWeights,
    cfg: ModelConfig,
    calib: list[Matrix],
    opts: QuantizeOptions = QuantizeOptions(),
) -> QuantizedModel:
    """Calibrate, reparameterize, and quantize a float model.

    Runs traced float forwards over the calibration set, derives
    per-channel asymmetric params at every post-LayerNorm site, folds them
    into per-layer symmetric quantizers by rewriting the LayerNorm and its
    consumers, then quantizes the (rewritten) weights per output channel.
    With opts.reparam off, post-LN sites fall back to plain per-layer
    symmetric min-max calibration, which is the baseline this scheme is
    measured against.
    """
    if not calib:
        raise ValueError("calibration set is empty")
    calib = [as_matrix(c, "calibration input") for c in calib]
    for c in calib:
        if c.shape != (cfg.n_tokens, cfg.dim):
            raise ValueError(f"calibration input shape {c.shape} != {(cfg.n_tokens, cfg.dim)}")
    if len(weights.blocks) != cfg.n_blocks:
        raise ValueError("weight stack depth inconsistent with config")

    sites = _collect_traces(weights, cfg, calib)

    factors: dict[str, ReparamFactors] = {}
    ln_params: dict[str, QuantParams] = {}
    for i in range(cfg.n_blocks):
        for ln in ("ln1", "ln2"):
            key = f"b{i}.{ln}"
            if opts.reparam:
                asym = calibrate(
                    sites[key], opts.act_bits, symmetric=False, granularity=PER_CHANNEL
                )
                f = compute_factors(asym, mean=opts.scale_mean)
                factors[key] = f
                ln_params[key] = QuantParams(
                    opts.act_bits, True, PER_LAYER, np.array([f.s_tilde])
                )
            else:
                ln_params[key] = _per_layer_sym(sites[key], opts.act_bits)

    rewritten = rewrite_model(weights, cfg, factors)

    blocks: list[QBlock] = []
    for i, bw in enumerate(rewritten.blocks):
        pre = f"b{i}."
        ln1 = ln_params[pre + "ln1"]
        ln2 = ln_params[pre + "ln2"]
        qkv = _quantize_linear(bw.w_qkv, bw.b_qkv, ln1, opts)
        attn_in = _per_layer_sym(sites[pre + "attn_out"], opts.act_bits)
        proj = _quantize_linear(bw.w_o, bw.b_o, attn_in, opts)

        def qmlp(m: MlpWeights, hidden_key: str) -> QMlp:
            hidden = _per_layer_sym(sites[hidden_key], opts.act_bits)
            return QMlp(
                fc1=_quantize_linear(m.w1, m.b1, ln2, opts),
                fc2=_quantize_linear(m.w2, m.b2, hidden, opts),
            )

        if isinstance(bw.ffn, MoeWeights):
            ffn: QMlp | QMoe = QMoe(
                w_gate=bw.ffn.w_gate,
                b_gate=bw.ffn.b_gate,
                experts=[
                    qmlp(e, f"{pre}e{j}.hidden") for j, e in enumerate(bw.ffn.experts)
                ],
            )
        else:
            ffn = qmlp(bw.ffn, pre + "mlp.hidden")

        blocks.append(
            QBlock(
                ln1_gamma=bw.ln1_gamma,
                ln1_beta=bw.ln1_beta,
                ln1_params=ln1,
                qkv=qkv,
                q_params=_per_layer_sym(sites[pre + "q"], opts.act_bits),
                k_params=_per_layer_sym(sites[pre + "k"], opts.act_bits),
                v_params=_per_layer_sym(sites[pre + "v"], opts.act_bits),
                proj=proj,
                ln2_gamma=bw.ln2_gamma,
                ln2_beta=bw.ln2_beta,
                ln2_params=ln2,
                ffn=ffn,
            )
        )
    return QuantizedModel(
        cfg=cfg,
        opts=opts,
        blocks=blocks,
        head_w=rewritten.head_w,
        head_b=rewritten.head_b,
        factors=factors,
        float_ref=weights,
    )


def _site_mse(site: str, approx: np.ndarray, ref_sites: dict, errors: dict,
              rows=None) -> None:
    ref = ref_sites.get(site)
    if ref is None:
        return
    if rows is not None:
        ref = ref[rows]
    errors[site] = float(np.mean((approx - ref) ** 2))


def _reconstruct_ln(deq: Matrix, f: ReparamFactors | None) -> Matrix:
    """Map a dequantized post-LN tensor back to original coordinates."""
    if f is None:
        return deq
    return deq * f.r1 - f.offset


def _requant_slice(acc: np.ndarray, out_scale, cols: slice, p: QuantParams) -> np.ndarray:
    scale = out_scale if np.isscalar(out_scale) else out_scale[cols]
    factor = scale / float(p.scales[0])
    return requantize(acc[:, cols], factor, p.bit_width)


def _attention(
    qb: QBlock, x_codes: np.ndarray, cfg: ModelConfig, opts: QuantizeOptions,
    errors: dict, ref_sites: dict, pre: str,
) -> Matrix:
    acc = qb.qkv.run(x_codes)
    out_scale = qb.qkv.out_scale
    s_q = float(qb.q_params.scales[0])
    s_k = float(qb.k_params.scales[0])
    s_v = float(qb.v_params.scales[0])
    heads = []
    q_deq, k_deq, v_deq = [], [], []
    for h in range(cfg.n_heads):
        sq, sk, sv = fmodel.head_slices(cfg, h)
        q_codes = _requant_slice(acc, out_scale, sq, qb.q_params)
        k_codes = _requant_slice(acc, out_scale, sk, qb.k_params)
        v_codes = _requant_slice(acc, out_scale, sv, qb.v_params)
        q_deq.append(q_codes * s_q)
        k_deq.append(k_codes * s_k)
        v_deq.append(v_codes * s_v)
        scores = (q_codes.astype(np.int64) @ k_codes.astype(np.int64).T).astype(
            np.float64
        ) * (s_q * s_k / np.sqrt(cfg.head_dim))
        v_q = QTensor(v_codes, qb.v_params)
        if opts.attn_quantizer == ATTN_UNIFORM:
            probs = fmodel.softmax_rows(scores)
            steps = (1 << opts.attn_bits) - 1
            p_hat = np.round(probs * steps) / steps
            heads.append(p_hat @ dequantize(v_q))
        else:
            rows = [
                fused_softmax_av(scores[r], v_q, opts.attn_bits)[0]
                for r in range(scores.shape[0])
            ]
            heads.append(np.vstack(rows))
    _site_mse(pre + "q", np.concatenate(q_deq, axis=1), ref_sites, errors)
    _site_mse(pre + "k", np.concatenate(k_deq, axis=1), ref_sites, errors)
    _site_mse(pre + "v", np.concatenate(v_deq, axis=1), ref_sites, errors)
    attn = np.concatenate(heads, axis=1)

    a_codes = quantize(attn, qb.proj.in_params).codes
    _site_mse(pre + "attn_out", a_codes * qb.proj.s_in, ref_sites, errors)
    proj_acc = qb.proj.run(a_codes)
    return proj_acc.astype(np.float64) * qb.proj.out_scale


def _expert_forward(
    e: QMlp, y_codes: np.ndarray, errors: dict, ref_sites: dict, site: str, rows=None
) -> Matrix:
    acc1 = e.fc1.run(y_codes)
    pre_act = acc1.astype(np.float64) * e.fc1.out_scale
    hidden = gelu(pre_act)
    h_codes = quantize(hidden, e.fc2.in_params).codes
    _site_mse(site, h_codes * e.fc2.s_in, ref_sites, errors, rows=rows)
    acc2 = e.fc2.run(h_codes)
    return acc2.astype(np.float64) * e.fc2.out_scale


def _forward_quantized_impl(
    qm: QuantizedModel, x: Matrix, sink: ForwardTrace | None = None
) -> tuple[np.ndarray, dict[str, float], np.ndarray]:
    cfg = qm.cfg
    x = as_matrix(x, "input")
    if x.shape != (cfg.n_tokens, cfg.dim):
        raise ValueError(f"expected input {(cfg.n_tokens, cfg.dim)}, got {x.shape}")

    ref_trace = ForwardTrace()
    ref_logits = fmodel.forward(x, qm.float_ref, cfg, trace=ref_trace)
    ref_sites = ref_trace.sites

    errors: dict[str, float] = {}
    stream = x
    for i, qb in enumerate(qm.blocks):
        pre = f"b{i}."
        xn = layernorm(stream, qb.ln1_gamma, qb.ln1_beta)
        x_codes = quantize(xn, qb.ln1_params).codes
        deq = x_codes.astype(np.float64) * float(qb.ln1_params.scales[0])
        _site_mse(
            pre + "ln1",
            _reconstruct_ln(deq, qm.factors.get(pre + "ln1")),
            ref_sites,
            errors,
        )
        stream = stream + _attention(qb, x_codes, cfg, qm.opts, errors, ref_sites, pre)

        yn = layernorm(stream, qb.ln2_gamma, qb.ln2_beta)
        y_codes = quantize(yn, qb.ln2_params).codes
        y_deq = y_codes.astype(np.float64) * float(qb.ln2_params.scales[0])
        _site_mse(
            pre + "ln2",
            _reconstruct_ln(y_deq, qm.factors.get(pre + "ln2")),
            ref_sites,
            errors,
        )
        if isinstance(qb.ffn, QMoe):
            decisions = [
                top_k_gate(y_deq[t], qb.ffn.w_gate, qb.ffn.b_gate, cfg.top_k)
                for t in range(cfg.n_tokens)
            ]
            if sink is not None:
                sink.gates[i] = decisions
            out = np.zeros((cfg.n_tokens, cfg.dim))
            for j, expert in enumerate(qb.ffn.experts):
                rows = [t for t in range(cfg.n_tokens) if j in decisions[t].experts]
                if not rows:
                    continue
                coef = np.array(
                    [decisions[t].weights[decisions[t].experts.index(j)] for t in rows]
                )
                e_out = _expert_forward(
                    expert, y_codes[rows], errors, ref_sites, f"{pre}e{j}.hidden", rows
                )
                out[rows] += coef[:, None] * e_out
        else:
            out = _expert_forward(qb.ffn, y_codes, errors, ref_sites, pre + "mlp.hidden")
        stream = stream + out

    pooled = stream.mean(axis=0)
    logits = pooled @ qm.head_w + qm.head_b
    return logits, errors, ref_logits


def forward_quantized(
    qm: QuantizedModel, x: Matrix, sink: ForwardTrace | None = None
) -> tuple[np.ndarray, dict[str, float]]:
    """Integer-arithmetic forward pass.

    Returns the logits and a per-site MSE against the float reference run
    on the same input (post-LayerNorm sites are compared in original
    coordinates, i.e. the reparameterization is undone before measuring).
    """
    logits, errors, _ = _forward_quantized_impl(qm, x, sink=sink)
    return logits, errors


@dataclass
class AgreementReport:
    """Paired float/quantized evaluation over a shared input set."""

    n_inputs: int
    top1_agreement: float
    logit_rmse: float
    per_site_mse: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "n_inputs": self.n_inputs,
            "top1_agreement": self.top1_agreement,
            "logit_rmse": self.logit_rmse,
            "per_site_mse": dict(sorted(self.per_site_mse.items())),
        }


def compare_models(
    float_w: ModelWeights, qm: QuantizedModel, inputs: list[Matrix]
) -> AgreementReport:
    """Deterministic paired evaluation of a float model and its quantized twin."""
    if not inputs:
        raise ValueError("empty evaluation set")
    if len(float_w.blocks) != qm.cfg.n_blocks:
        raise ValueError("float model depth does not match the quantized config")
    if float_w.head_w.shape != qm.float_ref.head_w.shape:
        raise ValueError("float model shape does not match the quantized model")

    matches = 0
    sq_err = 0.0
    n_logits = 0
    mse_sum: dict[str, float] = {}
    mse_count: dict[str, int] = {}
    for x in inputs:
        q_logits, site_errors, ref_logits = _forward_quantized_impl(qm, x)
        if float_w is qm.float_ref:
            f_logits = ref_logits
        else:
            f_logits = fmodel.forward(x, float_w, qm.cfg)
        matches += int(np.argmax(f_logits) == np.argmax(q_logits))
        sq_err += float(np.sum((f_logits - q_logits) ** 2))
        n_logits += f_logits.size
        for k, v in site_errors.items():
            mse_sum[k] = mse_sum.get(k, 0.0) + v
            mse_count[k] = mse_count.get(k, 0) + 1
    return AgreementReport(
        n_inputs=len(inputs),
        top1_agreement=matches / len(inputs),
        logit_rmse=float(np.sqrt(sq_err / n_logits)),
        per_site_mse={k: mse_sum[k] / mse_count[k] for k in mse_sum},
    )
