"""Command-line drivers: gen, quantize, eval, sim.

Every command is deterministic given its files, flags, and seed: all
randomness flows from the single --seed flag (falling back to the
COQMOE_SEED environment variable), reports are sorted-key JSON, and the
tensor-file writer is order-stable, so repeated runs produce
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import accelsim, modelfile
from .accelsim import SimConfig, sim_model
from .model import ForwardTrace, ModelConfig, forward, random_inputs, random_weights
from .numerics import Rng
from .qinfer import QuantizeOptions, build_quantized, compare_models, forward_quantized
from .reparam import ReparamFactors

SEED_ENV = "COQMOE_SEED"

GAMMA_SIGMA = {"normal": 0.5, "high": 1.5}


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    return int(env) if env else 0


def _parse_int_list(text: str, flag: str) -> list[int]:
    items = [s for s in text.split(",") if s.strip()]
    if not items:
        raise ValueError(f"{flag} sweep is empty")
    return [int(s) for s in items]


def _audit_entry(site: str, f: ReparamFactors) -> dict:
    return {
        "site": site,
        "s_tilde": f.s_tilde,
        "r1": f.r1.tolist(),
        "r2": f.r2.tolist(),
        "src_scales": f.source.scales.tolist(),
        "src_zero_points": f.source.zero_points.tolist(),
    }


def _opts_dict(opts: QuantizeOptions) -> dict:
    return {
        "weight_bits": opts.weight_bits,
        "act_bits": opts.act_bits,
        "attn_bits": opts.attn_bits,
        "reparam": opts.reparam,
        "attn_quantizer": opts.attn_quantizer,
        "per_channel_weights": opts.per_channel_weights,
        "scale_mean": opts.scale_mean,
    }


def cmd_gen(args) -> int:
    seed = _resolve_seed(args)
    moe_blocks = None
    if args.moe_blocks != "auto":
        moe_blocks = tuple(_parse_int_list(args.moe_blocks, "--moe-blocks"))
    cfg = ModelConfig(
        n_tokens=args.tokens,
        dim=args.dim,
        n_heads=args.heads,
        head_dim=args.dim // args.heads,
        n_blocks=args.blocks,
        mlp_ratio=args.mlp_ratio,
        n_experts=args.experts,
        top_k=args.topk,
        moe_blocks=moe_blocks,
        n_classes=args.classes,
    )
    gamma_sigma = args.gamma_sigma
    if gamma_sigma is None:
        gamma_sigma = GAMMA_SIGMA[args.gamma_variance]
    rng = Rng(seed)
    weights = random_weights(cfg, rng.stream("model"), gamma_sigma=gamma_sigma)
    calib = random_inputs(cfg, rng.stream("calib"), args.calib)
    evals = random_inputs(cfg, rng.stream("eval"), args.eval)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    modelfile.save_float_model(out / "model.qmv", weights, cfg)
    modelfile.save_dataset(out / "calib.qmv", calib)
    modelfile.save_dataset(out / "eval.qmv", evals)
    print(f"wrote {out / 'model.qmv'} ({cfg.n_blocks} blocks, dim {cfg.dim})")
    print(f"wrote {out / 'calib.qmv'} ({args.calib} inputs)")
    print(f"wrote {out / 'eval.qmv'} ({args.eval} inputs)")
    return 0


def cmd_quantize(args) -> int:
    tf_kind = modelfile.read_tensor_file(args.model).kind
    if tf_kind == modelfile.KIND_QUANT:
        raise ValueError(f"{args.model}: already quantized")
    weights, cfg = modelfile.load_float_model(args.model)
    calib = modelfile.load_dataset(args.calib)
    opts = QuantizeOptions(
        weight_bits=args.wbits,
        act_bits=args.abits,
        attn_bits=args.attnbits,
        reparam=args.reparam == "on",
        attn_quantizer=args.attn_quantizer,
    )
    qm = build_quantized(weights, cfg, calib, opts)
    modelfile.save_quantized_model(args.out, qm)
    audit = {
        "schema": 1,
        "command": "quantize",
        "config": modelfile.config_to_dict(cfg),
        "opts": _opts_dict(opts),
        "rewritten_sites": [
            _audit_entry(site, qm.factors[site]) for site in sorted(qm.factors)
        ],
    }
    if args.audit:
        modelfile.write_report(args.audit, audit)
        print(f"wrote audit {args.audit}")
    print(f"wrote {args.out} "
          f"(W{opts.weight_bits}/A{opts.act_bits}/Attn{opts.attn_bits}, "
          f"reparam {'on' if opts.reparam else 'off'}, "
          f"{len(qm.factors)} rewritten sites)")
    return 0


def _eval_checks(report, qm) -> dict[str, bool]:
    checks = {
        "agreement_in_range": 0.0 <= report.top1_agreement <= 1.0,
        "logit_rmse_finite": bool(np.isfinite(report.logit_rmse)),
        "site_mse_nonnegative": all(
            np.isfinite(v) and v >= 0.0 for v in report.per_site_mse.values()
        ),
    }
    half = 1 << (qm.opts.act_bits - 1)
    checks["factors_consistent"] = all(
        np.array_equal(f.r2, f.source.zero_points - half)
        and np.all(f.r1 > 0)
        and abs(f.s_tilde - float(np.mean(f.source.scales))) <= 1e-12 * f.s_tilde
        for f in qm.factors.values()
    )
    return checks


def cmd_eval(args) -> int:
    float_w, cfg = modelfile.load_float_model(args.float)
    qm = modelfile.load_quantized_model(args.quant)
    if modelfile.config_to_dict(cfg) != modelfile.config_to_dict(qm.cfg):
        raise ValueError("float and quantized model configs differ")
    inputs = modelfile.load_dataset(args.inputs)
    report = compare_models(float_w, qm, inputs)
    checks = _eval_checks(report, qm)
    payload = {
        "schema": 1,
        "command": "eval",
        "config": modelfile.config_to_dict(cfg),
        "opts": _opts_dict(qm.opts),
        "agreement": report.to_dict(),
        "reparam_audit": [
            _audit_entry(site, qm.factors[site]) for site in sorted(qm.factors)
        ],
        "checks": checks,
    }
    text = modelfile.write_report(args.report, payload)
    if args.report:
        print(f"wrote report {args.report}")
    else:
        sys.stdout.write(text)
    print(f"top1_agreement {report.top1_agreement:.4f}  "
          f"logit_rmse {report.logit_rmse:.6g}")
    ok = all(checks.values())
    if not ok:
        failed = [k for k, v in checks.items() if not v]
        print(f"embedded checks FAILED: {', '.join(failed)}", file=sys.stderr)
    return 0 if ok else 1


def _gate_trace_for(args, inputs):
    """Routing trace from a real run of the model file (float or quantized)."""
    tf = modelfile.read_tensor_file(args.model)
    trace = ForwardTrace()
    if tf.kind == modelfile.KIND_QUANT:
        qm = modelfile.load_quantized_model(args.model)
        forward_quantized(qm, inputs[args.input_index], sink=trace)
        return qm.cfg, trace.gates
    weights, cfg = modelfile.load_float_model(args.model)
    forward(inputs[args.input_index], weights, cfg, trace=trace)
    return cfg, trace.gates


def cmd_sim(args) -> int:
    inputs = modelfile.load_dataset(args.inputs)
    if not inputs:
        raise ValueError("input dataset is empty")
    if not 0 <= args.input_index < len(inputs):
        raise ValueError(f"--input-index {args.input_index} out of range")
    cfg, gates = _gate_trace_for(args, inputs)

    npe_list = _parse_int_list(args.npe, "--npe")
    nl_list = _parse_int_list(args.nl, "--nl")
    policies = [p for p in args.policy.split(",") if p.strip()]
    if not policies:
        raise ValueError("--policy sweep is empty")

    rows = []
    for policy in policies:
        for n_pe in npe_list:
            for n_l in nl_list:
                sim = SimConfig(
                    n_pe=n_pe,
                    n_l=n_l,
                    t_s=args.ts,
                    macs_per_unit_per_cycle=args.macs,
                    offchip_bytes_per_cycle=args.bw,
                    attention_k_policy=policy,
                    linear_fetch_policy=args.linear_policy,
                    weight_mode=args.weight_mode,
                )
                stats = sim_model(cfg, gates, sim)
                roles = stats.read_bytes_by_role
                rows.append(
                    {
                        "policy": policy,
                        "n_pe": n_pe,
                        "n_l": n_l,
                        "k_read_bytes": roles.get("k", 0),
                        "v_read_bytes": roles.get("v", 0),
                        "q_read_bytes": roles.get("q", 0),
                        "weight_read_bytes": roles.get("weights", 0),
                        "offchip_read_bytes": stats.offchip_read_bytes,
                        "offchip_write_bytes": stats.offchip_write_bytes,
                        "transactions": stats.transactions,
                        "compute_cycles": stats.compute_cycles,
                        "memory_cycles": stats.memory_cycles,
                        "est_cycles": stats.est_cycles,
                        "macs": stats.macs,
                        "gops_est": stats.gops_est,
                    }
                )
    payload = {
        "schema": 1,
        "command": "sim",
        "config": modelfile.config_to_dict(cfg),
        "sweep": rows,
    }
    if args.report:
        modelfile.write_report(args.report, payload)
        print(f"wrote report {args.report}")
    cols = ["policy", "n_pe", "n_l", "k_read_bytes", "weight_read_bytes",
            "offchip_read_bytes", "est_cycles", "gops_est"]
    print(",".join(cols))
    for r in rows:
        print(",".join(
            f"{r[c]:.3f}" if isinstance(r[c], float) else str(r[c]) for c in cols
        ))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="qmoevit",
        description="Quantized MoE-ViT toolkit: synthesize, quantize, evaluate, simulate.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a seeded synthetic model and datasets")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--tokens", type=int, default=16)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--blocks", type=int, default=4)
    g.add_argument("--mlp-ratio", type=int, default=4)
    g.add_argument("--experts", type=int, default=4)
    g.add_argument("--topk", type=int, default=2)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--moe-blocks", default="auto",
                   help="comma-separated block indices, or 'auto' for odd blocks")
    g.add_argument("--gamma-variance", choices=sorted(GAMMA_SIGMA), default="normal",
                   help="inter-channel LayerNorm variance regime")
    g.add_argument("--gamma-sigma", type=float, default=None,
                   help="explicit log-normal sigma for LayerNorm gamma")
    g.add_argument("--calib", type=int, default=32)
    g.add_argument("--eval", type=int, default=64)
    g.set_defaults(func=cmd_gen)

    q = sub.add_parser("quantize", help="calibrate and quantize a float model")
    q.add_argument("--model", required=True)
    q.add_argument("--calib", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--reparam", choices=["on", "off"], default="on")
    q.add_argument("--wbits", type=int, default=8)
    q.add_argument("--abits", type=int, default=8)
    q.add_argument("--attnbits", type=int, default=4)
    q.add_argument("--attn-quantizer", choices=["shift", "uniform"], default="shift")
    q.add_argument("--audit", default=None, help="write the factor audit JSON here")
    q.set_defaults(func=cmd_quantize)

    e = sub.add_parser("eval", help="paired float/quantized evaluation")
    e.add_argument("--float", required=True)
    e.add_argument("--quant", required=True)
    e.add_argument("--inputs", required=True)
    e.add_argument("--report", default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sim", help="sweep the accelerator dataflow model")
    s.add_argument("--model", required=True, help="float or quantized model file")
    s.add_argument("--inputs", required=True)
    s.add_argument("--input-index", type=int, default=0,
                   help="which input's gate trace drives expert loads")
    s.add_argument("--npe", default="1,2,4,8")
    s.add_argument("--nl", default="4")
    s.add_argument("--bw", type=float, default=16.0)
    s.add_argument("--ts", type=int, default=4)
    s.add_argument("--macs", type=int, default=16)
    s.add_argument("--policy", default=accelsim.BROADCAST,
                   help="comma-separated attention K policies (broadcast,naive)")
    s.add_argument("--linear-policy", default=accelsim.RR_ROUTER,
                   choices=[accelsim.RR_ROUTER, accelsim.PER_PATCH])
    s.add_argument("--weight-mode", default=accelsim.STREAM,
                   choices=[accelsim.STREAM, accelsim.PRELOAD])
    s.add_argument("--report", default=None)
    s.set_defaults(func=cmd_sim)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
