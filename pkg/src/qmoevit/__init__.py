"""Quantized MoE vision-transformer inference toolkit and accelerator
dataflow simulator."""

from .accelsim import SimConfig, SimStats, expert_loads, sim_attention, sim_linear, sim_model
from .logquant import (
    DyadicRoot2,
    LogQTensor,
    fused_softmax_av,
    log_sqrt2_quantize,
    shift_av_row,
    shift_dequant,
)
from .model import (
    BlockWeights,
    ForwardTrace,
    GateDecision,
    MlpWeights,
    ModelConfig,
    ModelWeights,
    MoeWeights,
    forward,
    moe_forward,
    msa_forward,
    random_inputs,
    random_weights,
    top_k_gate,
)
from .numerics import Matrix, Rng, gelu, layernorm, matmul, softmax_row
from .qinfer import (
    AgreementReport,
    QuantizedModel,
    QuantizeOptions,
    build_quantized,
    compare_models,
    forward_quantized,
)
from .quant import (
    QTensor,
    QuantParams,
    asym_matmul_expansion,
    calibrate,
    dequantize,
    fake_quant,
    int_matmul,
    quantize,
    requantize,
)
from .reparam import (
    ReparamFactors,
    compute_factors,
    reparam_codes,
    rewrite_block,
    rewrite_layernorm,
    rewrite_model,
    rewrite_next_linear,
)

__version__ = "0.1.0"
