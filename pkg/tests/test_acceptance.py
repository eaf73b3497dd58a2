"""Acceptance suite: one test per exit criterion, at the stated tolerance.

Run `pytest tests/test_acceptance.py -v -s` to get one PASS line per
criterion (pytest shows the captured line automatically on failure).
Criteria with a stated runtime budget assert the elapsed time too.
"""

import filecmp
import math
import time
from fractions import Fraction

import numpy as np

from qmoevit.accelsim import (
    BROADCAST,
    NAIVE,
    PER_PATCH,
    SimConfig,
    expert_loads,
    sim_attention,
    sim_linear,
    sim_model,
)
from qmoevit.cli import main
from qmoevit.logquant import fused_softmax_av, log_sqrt2_quantize, shift_av_row, shift_dequant
from qmoevit.model import (
    ForwardTrace,
    MlpWeights,
    ModelConfig,
    MoeWeights,
    forward,
    random_inputs,
    random_weights,
    top_k_gate,
)
from qmoevit.numerics import Rng
from qmoevit.qinfer import QuantizeOptions, build_quantized, compare_models
from qmoevit.quant import PER_CHANNEL, PER_LAYER, QTensor, QuantParams, quantize
from qmoevit.reparam import compute_factors, reparam_codes, rewrite_block, rewrite_model

ACCEPT_CFG = ModelConfig(n_tokens=16, dim=32, n_heads=4, head_dim=8, n_blocks=4,
                         n_experts=4, top_k=2)


def report(line: str) -> None:
    print(f"\n{line}")


def make_model(seed, gamma_sigma=1.5, n_calib=32, n_eval=64, cfg=ACCEPT_CFG):
    rng = Rng(seed)
    w = random_weights(cfg, rng.stream("model"), gamma_sigma=gamma_sigma)
    calib = random_inputs(cfg, rng.stream("calib"), n_calib)
    evals = random_inputs(cfg, rng.stream("eval"), n_eval)
    return w, calib, evals


def test_criterion_01_reparam_code_equivalence():
    """Per-layer symmetric codes of X' equal per-channel asymmetric codes of
    X minus 2^(b-1), with zero mismatched elements, over 1000 instances."""
    t0 = time.time()
    rng = np.random.default_rng(101)
    mismatches = 0
    elements = 0
    for _ in range(1000):
        d = int(rng.integers(1, 65))
        s = np.exp(rng.standard_normal(d) * 1.5)
        z = rng.integers(0, 256, d)
        p = QuantParams(8, False, PER_CHANNEL, s, z)
        f = compute_factors(p)
        # Spread X so both clip edges are exercised regularly.
        x = rng.standard_normal((8, d)) * s * 200
        sym = reparam_codes(x, f)
        asym = quantize(x, p).codes
        mismatches += int(np.sum(sym != asym - 128))
        elements += x.size
    elapsed = time.time() - t0
    assert mismatches == 0
    assert elapsed < 5.0
    report(f"ACCEPTANCE 1 (code equivalence): PASS - 0 mismatches over "
           f"{elements} elements in {elapsed:.2f}s")


def test_criterion_02_functional_equivalence_and_routing():
    """X W + b == X' W' + b' to 1e-10 relative over 1000 instances, covering
    MoE expert-fc1 and gate rewrites; top-k routing sets identical in 100%."""
    t0 = time.time()
    rng = np.random.default_rng(202)
    worst = 0.0
    routing_trials = routing_same = 0
    for _ in range(1000):
        d = int(rng.integers(2, 17))
        m, h = 3, int(rng.integers(2, 13))
        s = np.exp(rng.standard_normal(d) * 1.2)
        z = rng.integers(0, 256, d)
        f = compute_factors(QuantParams(8, False, PER_CHANNEL, s, z))
        experts = [
            MlpWeights(rng.standard_normal((d, h)), rng.standard_normal(h),
                       rng.standard_normal((h, d)), rng.standard_normal(d))
            for _ in range(m)
        ]
        moe = MoeWeights(rng.standard_normal((d, m)), rng.standard_normal(m), experts)
        bw_like = rewrite_block(
            _block_with_ffn(moe, d), "ln2", f
        )
        x = rng.standard_normal((4, d)) * 3
        x_p = (x + f.offset) / f.r1
        for e, e_p in zip(experts, bw_like.ffn.experts):
            ref = x @ e.w1 + e.b1
            got = x_p @ e_p.w1 + e_p.b1
            worst = max(worst, _rel_err(got, ref))
        ref_logits = x @ moe.w_gate + moe.b_gate
        got_logits = x_p @ bw_like.ffn.w_gate + bw_like.ffn.b_gate
        worst = max(worst, _rel_err(got_logits, ref_logits))
        for t in range(4):
            d1 = top_k_gate(x[t], moe.w_gate, moe.b_gate, 2)
            d2 = top_k_gate(x_p[t], bw_like.ffn.w_gate, bw_like.ffn.b_gate, 2)
            routing_trials += 1
            routing_same += int(set(d1.experts) == set(d2.experts))
    elapsed = time.time() - t0
    assert worst <= 1e-10
    assert routing_same == routing_trials
    assert elapsed < 10.0
    report(f"ACCEPTANCE 2 (functional equivalence): PASS - worst rel err "
           f"{worst:.2e}, routing identical {routing_same}/{routing_trials}, "
           f"{elapsed:.2f}s")


def _block_with_ffn(ffn, d):
    from qmoevit.model import BlockWeights

    zeros = np.zeros(d)
    return BlockWeights(
        ln1_gamma=np.ones(d), ln1_beta=zeros,
        w_qkv=np.zeros((d, 3 * d)), b_qkv=np.zeros(3 * d),
        w_o=np.zeros((d, d)), b_o=zeros,
        ln2_gamma=np.ones(d), ln2_beta=zeros, ffn=ffn,
    )


def _rel_err(got, ref):
    return float(np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-30))


def test_criterion_03_shift_dequant_exactness():
    """Every 4-bit code squares to the exact rational 2^-c, and the shift-only
    dot product matches the float oracle to 1e-12 over 10000 random rows."""
    t0 = time.time()
    for c in range(16):
        assert shift_dequant(c, 4).squared() == Fraction(1, 2**c)
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(10000):
        codes = rng.integers(0, 16, 16)
        v = rng.integers(-128, 128, 16)
        got = shift_av_row(codes, v, bits=4).to_float()
        want = float(np.sum(v * np.exp2(-codes / 2.0)))
        worst = max(worst, abs(got - want) / max(abs(want), 1.0))
    elapsed = time.time() - t0
    assert worst <= 1e-12
    assert elapsed < 5.0
    report(f"ACCEPTANCE 3 (shift-dequant exactness): PASS - 16/16 exact "
           f"squares, worst row rel err {worst:.2e}, {elapsed:.2f}s")


def test_criterion_04_fused_softmax():
    """Fused 3-pass softmax/AV matches the fake-quant oracle to 1e-9 on 1000
    random rows; the argmax score position always takes code 0."""
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 17))
        scores = rng.standard_normal(n) * 4
        v_codes = rng.integers(-128, 128, (n, 4))
        s_v = float(rng.uniform(0.01, 0.5))
        vq = QTensor(v_codes.astype(np.int32),
                     QuantParams(8, True, PER_LAYER, np.array([s_v])))
        out, trace = fused_softmax_av(scores, vq, bits=4)
        assert trace.codes[int(np.argmax(scores))] == 0
        f = np.exp(scores - scores.max())
        f_hat = np.exp2(-log_sqrt2_quantize(f, bits=4).codes / 2.0)
        want = (f_hat @ (v_codes * s_v)) / f.sum()
        worst = max(worst, _rel_err(out, want))
    assert worst <= 1e-9
    report(f"ACCEPTANCE 4 (fused softmax): PASS - worst rel err {worst:.2e}, "
           f"argmax code 0 in 1000/1000 rows")


def test_criterion_05_quantization_quality_direction():
    """On 20 heavy-variance seeded MoE models, W8A8/Attn4 with reparam beats
    the per-layer-symmetric baseline: strictly lower post-LN MSE at every
    rewritten site and top-1 agreement at least as high, in >= 19/20 seeds."""
    t0 = time.time()
    passes = 0
    details = []
    for seed in range(20):
        w, calib, evals = make_model(1000 + seed)
        qm = build_quantized(w, ACCEPT_CFG, calib, QuantizeOptions())
        qm0 = build_quantized(w, ACCEPT_CFG, calib, QuantizeOptions(reparam=False))
        rep = compare_models(w, qm, evals)
        rep0 = compare_models(w, qm0, evals)
        ln_sites = sorted(qm.factors)
        mse_ok = all(rep.per_site_mse[k] < rep0.per_site_mse[k] for k in ln_sites)
        agree_ok = rep.top1_agreement >= rep0.top1_agreement
        passes += int(mse_ok and agree_ok)
        details.append((seed, mse_ok, agree_ok, rep.top1_agreement, rep0.top1_agreement))
    elapsed = time.time() - t0
    assert passes >= 19, details
    assert elapsed < 120.0
    mean_r = np.mean([d[3] for d in details])
    mean_b = np.mean([d[4] for d in details])
    report(f"ACCEPTANCE 5 (quality direction): PASS - {passes}/20 seeds, "
           f"mean agreement reparam {mean_r:.3f} vs baseline {mean_b:.3f}, "
           f"{elapsed:.1f}s")


def test_criterion_06_high_precision_sanity():
    """16-bit everywhere (uniform high-precision attention quantizer):
    quantized top-1 agreement with float is 100% on 256 inputs."""
    w, calib, evals = make_model(42, n_eval=256)
    opts = QuantizeOptions(weight_bits=16, act_bits=16, attn_bits=16,
                           attn_quantizer="uniform")
    qm = build_quantized(w, ACCEPT_CFG, calib, opts)
    rep = compare_models(w, qm, evals)
    assert rep.top1_agreement == 1.0
    report(f"ACCEPTANCE 6 (high-precision sanity): PASS - 256/256 top-1 "
           f"agreement, logit rmse {rep.logit_rmse:.2e}")


def test_criterion_07_broadcast_k_scaling():
    """K/V off-chip bytes are exactly constant across N_PE under broadcast
    and exactly linear under the naive policy."""
    t0 = time.time()
    cfg = ModelConfig(n_tokens=16, dim=32, n_heads=4, head_dim=8, n_blocks=1,
                      moe_blocks=())
    pes = (1, 2, 4, 8, 16)
    bc = [sim_attention(cfg, SimConfig(n_pe=p, attention_k_policy=BROADCAST))
          for p in pes]
    nv = [sim_attention(cfg, SimConfig(n_pe=p, attention_k_policy=NAIVE))
          for p in pes]
    k0 = bc[0].read_bytes_by_role["k"]
    v0 = bc[0].read_bytes_by_role["v"]
    assert all(s.read_bytes_by_role["k"] == k0 for s in bc)
    assert all(s.read_bytes_by_role["v"] == v0 for s in bc)
    for p, s in zip(pes, nv):
        assert s.read_bytes_by_role["k"] == k0 * p
        assert s.read_bytes_by_role["v"] == v0 * p
    elapsed = time.time() - t0
    assert elapsed < 1.0
    report(f"ACCEPTANCE 7 (broadcast-K scaling): PASS - K bytes {k0} constant "
           f"over N_PE {pes}, naive scales linearly, {elapsed:.3f}s")


def test_criterion_08_rr_router_weight_locality():
    """Dense weight traffic ratio baseline/ours equals
    tokens / ceil(tokens/N_L) exactly on the whole grid; sparse traffic
    equals sum_j ceil(n_j/N_L)*|W_j| against real gate traces."""
    for tokens in range(1, 33):
        for n_l in (1, 2, 4, 8):
            ours = sim_linear(tokens, 10, 10, SimConfig(n_l=n_l))
            base = sim_linear(tokens, 10, 10,
                              SimConfig(n_l=n_l, linear_fetch_policy=PER_PATCH))
            w_ours = ours.read_bytes_by_role["weights"]
            w_base = base.read_bytes_by_role["weights"]
            assert w_base * math.ceil(tokens / n_l) == w_ours * tokens

    cfg = ACCEPT_CFG
    w, calib, evals = make_model(77, n_eval=1)
    trace = ForwardTrace()
    forward(evals[0], w, cfg, trace=trace)
    checked = 0
    for n_l in (1, 2, 4, 8):
        stats = sim_model(cfg, trace.gates, SimConfig(n_l=n_l))
        parts = dict(stats.parts)
        for blk in cfg.moe_blocks:
            loads = expert_loads(trace.gates[blk], cfg.n_experts)
            assert sum(loads) == cfg.n_tokens * cfg.top_k
            w1_bytes = cfg.dim * cfg.hidden_dim  # int8 weights, 1 byte each
            expect = sum(math.ceil(n_j / n_l) * w1_bytes for n_j in loads)
            got = parts[f"b{blk}.expert_fc1"].read_bytes_by_role["weights"]
            assert got == expect
            checked += 1
    report(f"ACCEPTANCE 8 (RR-router locality): PASS - exact ratio on "
           f"128-point grid, sparse traffic verified on {checked} "
           f"block/N_L combinations with conservation")


def test_criterion_09_reparam_float_semantics():
    """The float model with rewritten parameters reproduces the original
    float logits to 1e-8 relative on 256 inputs."""
    w, calib, evals = make_model(42, n_eval=256)
    qm = build_quantized(w, ACCEPT_CFG, calib, QuantizeOptions())
    rw = rewrite_model(w, ACCEPT_CFG, qm.factors)
    worst = 0.0
    for x in evals:
        ref = forward(x, w, ACCEPT_CFG)
        got = forward(x, rw, ACCEPT_CFG)
        worst = max(worst, _rel_err(got, ref))
    assert worst <= 1e-8
    report(f"ACCEPTANCE 9 (reparam float semantics): PASS - worst rel err "
           f"{worst:.2e} over 256 inputs")


def test_criterion_10_cli_determinism(tmp_path):
    """gen/quantize/eval/sim produce byte-identical outputs across two runs
    with the same seed."""
    tiny = ["--tokens", "8", "--dim", "16", "--heads", "2", "--blocks", "2",
            "--mlp-ratio", "2", "--experts", "3", "--topk", "2",
            "--classes", "5", "--calib", "6", "--eval", "6"]
    sets = []
    for run in ("r1", "r2"):
        d = tmp_path / run
        assert main(["gen", "--out", str(d), "--seed", "3", *tiny]) == 0
        assert main(["quantize", "--model", str(d / "model.qmv"),
                     "--calib", str(d / "calib.qmv"),
                     "--out", str(d / "q.qmv"),
                     "--audit", str(d / "audit.json")]) == 0
        assert main(["eval", "--float", str(d / "model.qmv"),
                     "--quant", str(d / "q.qmv"),
                     "--inputs", str(d / "eval.qmv"),
                     "--report", str(d / "eval.json")]) == 0
        assert main(["sim", "--model", str(d / "model.qmv"),
                     "--inputs", str(d / "eval.qmv"), "--npe", "1,2,4",
                     "--policy", "broadcast,naive",
                     "--report", str(d / "sim.json")]) == 0
        sets.append(d)
    files = ["model.qmv", "calib.qmv", "eval.qmv", "q.qmv", "audit.json",
             "eval.json", "sim.json"]
    for f in files:
        assert filecmp.cmp(sets[0] / f, sets[1] / f, shallow=False), f
    report(f"ACCEPTANCE 10 (determinism): PASS - {len(files)} outputs "
           f"byte-identical across repeated runs")
