"""File formats: a manifest-plus-blob tensor container and JSON reports.

A tensor file is:

    magic "QMVF1\\n"
    8-byte little-endian header length
    JSON header (sorted keys): format version, kind, config, meta,
        tensor directory (name/dtype/shape/offset/nbytes), blob size
        and CRC-32
    raw blob: the tensors back to back, little-endian, row-major,
        in directory order (names sorted)

Everything is deterministic: writing the same content twice produces
byte-identical files, and write -> read -> write is the identity.
Reports are JSON documents with sorted keys, so they round-trip and
diff cleanly.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (
    BlockWeights,
    MlpWeights,
    ModelConfig,
    ModelWeights,
    MoeWeights,
)
from .numerics import Matrix
from .quant import PER_CHANNEL, PER_LAYER, QTensor, QuantParams
from .qinfer import QBlock, QLinear, QMlp, QMoe, QuantizeOptions, QuantizedModel
from .reparam import ReparamFactors

MAGIC = b"QMVF1\n"
FORMAT_VERSION = 1

KIND_FLOAT = "float-model"
KIND_QUANT = "quantized-model"
KIND_DATA = "dataset"

_DTYPES = {
    "f32": "<f4",
    "f64": "<f8",
    "i8": "<i1",
    "i16": "<i2",
    "i32": "<i4",
    "i64": "<i8",
}
_DTYPE_OF = {np.dtype(v): k for k, v in _DTYPES.items()}


class FileFormatError(ValueError):
    pass


@dataclass
class TensorFile:
    kind: str
    config: dict | None
    meta: dict
    tensors: dict[str, np.ndarray]


def _canonical(arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype == np.float32:
        return a.astype("<f4")
    if np.issubdtype(a.dtype, np.floating):
        return a.astype("<f8")
    if a.dtype == np.int8:
        return a.astype("<i1")
    if a.dtype == np.int16:
        return a.astype("<i2")
    if a.dtype == np.int32:
        return a.astype("<i4")
    if np.issubdtype(a.dtype, np.integer):
        return a.astype("<i8")
    raise FileFormatError(f"unsupported dtype {a.dtype}")


def write_tensor_file(
    path: str | Path,
    kind: str,
    tensors: dict[str, np.ndarray],
    config: dict | None = None,
    meta: dict | None = None,
) -> None:
    directory = []
    blob = bytearray()
    for name in sorted(tensors):
        a = np.ascontiguousarray(_canonical(tensors[name]))
        offset = len(blob)
        raw = a.tobytes()
        blob.extend(raw)
        directory.append(
            {
                "name": name,
                "dtype": _DTYPE_OF[a.dtype],
                "shape": list(a.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
    header = {
        "format": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "meta": meta or {},
        "tensors": directory,
        "blob_size": len(blob),
        "blob_crc32": zlib.crc32(bytes(blob)),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(bytes(blob))


def read_tensor_file(path: str | Path) -> TensorFile:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise FileFormatError(f"{path}: not a tensor file (bad magic)")
        (head_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(head_len).decode())
        blob = fh.read()
    if header.get("format") != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported format {header.get('format')}")
    if len(blob) != header["blob_size"]:
        raise FileFormatError(f"{path}: truncated blob")
    if zlib.crc32(blob) != header["blob_crc32"]:
        raise FileFormatError(f"{path}: blob checksum mismatch")
    seen_end = 0
    tensors = {}
    for ent in header["tensors"]:
        if ent["offset"] < seen_end:
            raise FileFormatError(f"{path}: overlapping tensors in directory")
        seen_end = ent["offset"] + ent["nbytes"]
        a = np.frombuffer(
            blob, dtype=_DTYPES[ent["dtype"]], count=int(np.prod(ent["shape"], dtype=np.int64)),
            offset=ent["offset"],
        ).reshape(ent["shape"])
        tensors[ent["name"]] = a.copy()
    return TensorFile(
        kind=header["kind"],
        config=header.get("config"),
        meta=header.get("meta", {}),
        tensors=tensors,
    )


# ---------------------------------------------------------------------------
# model <-> tensor dict


def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "n_tokens": cfg.n_tokens,
        "dim": cfg.dim,
        "n_heads": cfg.n_heads,
        "head_dim": cfg.head_dim,
        "n_blocks": cfg.n_blocks,
        "mlp_ratio": cfg.mlp_ratio,
        "n_experts": cfg.n_experts,
        "top_k": cfg.top_k,
        "moe_blocks": list(cfg.moe_blocks),
        "n_classes": cfg.n_classes,
    }


def config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        n_tokens=d["n_tokens"],
        dim=d["dim"],
        n_heads=d["n_heads"],
        head_dim=d["head_dim"],
        n_blocks=d["n_blocks"],
        mlp_ratio=d["mlp_ratio"],
        n_experts=d["n_experts"],
        top_k=d["top_k"],
        moe_blocks=tuple(d["moe_blocks"]),
        n_classes=d["n_classes"],
    )


def _model_tensors(weights: ModelWeights, cfg: ModelConfig, dtype) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}

    def put(name, arr):
        out[name] = np.asarray(arr, dtype=dtype)

    for i, bw in enumerate(weights.blocks):
        p = f"blocks.{i}."
        put(p + "ln1_gamma", bw.ln1_gamma)
        put(p + "ln1_beta", bw.ln1_beta)
        put(p + "w_qkv", bw.w_qkv)
        put(p + "b_qkv", bw.b_qkv)
        put(p + "w_o", bw.w_o)
        put(p + "b_o", bw.b_o)
        put(p + "ln2_gamma", bw.ln2_gamma)
        put(p + "ln2_beta", bw.ln2_beta)
        if isinstance(bw.ffn, MoeWeights):
            put(p + "gate.w", bw.ffn.w_gate)
            put(p + "gate.b", bw.ffn.b_gate)
            for j, e in enumerate(bw.ffn.experts):
                q = f"{p}expert{j}."
                put(q + "w1", e.w1)
                put(q + "b1", e.b1)
                put(q + "w2", e.w2)
                put(q + "b2", e.b2)
        else:
            put(p + "mlp.w1", bw.ffn.w1)
            put(p + "mlp.b1", bw.ffn.b1)
            put(p + "mlp.w2", bw.ffn.w2)
            put(p + "mlp.b2", bw.ffn.b2)
    put("head.w", weights.head_w)
    put("head.b", weights.head_b)
    return out


def _model_from_tensors(t: dict[str, np.ndarray], cfg: ModelConfig, prefix: str = "") -> ModelWeights:
    def get(name):
        return np.asarray(t[prefix + name], dtype=np.float64)

    blocks = []
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        if cfg.is_moe(i):
            ffn: MlpWeights | MoeWeights = MoeWeights(
                w_gate=get(p + "gate.w"),
                b_gate=get(p + "gate.b"),
                experts=[
                    MlpWeights(
                        get(f"{p}expert{j}.w1"),
                        get(f"{p}expert{j}.b1"),
                        get(f"{p}expert{j}.w2"),
                        get(f"{p}expert{j}.b2"),
                    )
                    for j in range(cfg.n_experts)
                ],
            )
        else:
            ffn = MlpWeights(
                get(p + "mlp.w1"), get(p + "mlp.b1"), get(p + "mlp.w2"), get(p + "mlp.b2")
            )
        blocks.append(
            BlockWeights(
                ln1_gamma=get(p + "ln1_gamma"),
                ln1_beta=get(p + "ln1_beta"),
                w_qkv=get(p + "w_qkv"),
                b_qkv=get(p + "b_qkv"),
                w_o=get(p + "w_o"),
                b_o=get(p + "b_o"),
                ln2_gamma=get(p + "ln2_gamma"),
                ln2_beta=get(p + "ln2_beta"),
                ffn=ffn,
            )
        )
    return ModelWeights(blocks, get("head.w"), get("head.b"))


def save_float_model(path, weights: ModelWeights, cfg: ModelConfig) -> None:
    write_tensor_file(
        path, KIND_FLOAT, _model_tensors(weights, cfg, np.float32),
        config=config_to_dict(cfg),
    )


def load_float_model(path) -> tuple[ModelWeights, ModelConfig]:
    tf = read_tensor_file(path)
    if tf.kind != KIND_FLOAT:
        raise FileFormatError(f"{path}: expected a float model, found {tf.kind!r}")
    cfg = config_from_dict(tf.config)
    return _model_from_tensors(tf.tensors, cfg), cfg


def save_dataset(path, inputs: list[Matrix]) -> None:
    tensors = {f"x{i:05d}": np.asarray(x, dtype=np.float32) for i, x in enumerate(inputs)}
    write_tensor_file(path, KIND_DATA, tensors, meta={"count": len(inputs)})


def load_dataset(path) -> list[Matrix]:
    tf = read_tensor_file(path)
    if tf.kind != KIND_DATA:
        raise FileFormatError(f"{path}: expected a dataset, found {tf.kind!r}")
    return [
        np.asarray(tf.tensors[k], dtype=np.float64) for k in sorted(tf.tensors)
    ]


# ---------------------------------------------------------------------------
# quantized model <-> tensor dict


def _code_dtype(bits: int):
    return np.int8 if bits <= 8 else np.int16


def _qlinear_tensors(out, prefix: str, ql: QLinear, opts: QuantizeOptions):
    out[prefix + "codes"] = ql.wq.codes.astype(_code_dtype(opts.weight_bits))
    out[prefix + "w_scales"] = ql.wq.params.scales.astype(np.float64)
    out[prefix + "bias_acc"] = ql.bias_acc.astype(np.int64)


def _qlinear_from(t, prefix: str, in_params: QuantParams, opts: QuantizeOptions) -> QLinear:
    scales = np.asarray(t[prefix + "w_scales"], dtype=np.float64)
    granularity = PER_CHANNEL if scales.size > 1 else PER_LAYER
    wp = QuantParams(opts.weight_bits, True, granularity, scales)
    wq = QTensor(np.asarray(t[prefix + "codes"], dtype=np.int32), wp)
    return QLinear(in_params, wq, np.asarray(t[prefix + "bias_acc"], dtype=np.int64))


def _scalar_params(t, name: str, bits: int) -> QuantParams:
    return QuantParams(bits, True, PER_LAYER, np.asarray(t[name], dtype=np.float64))


def save_quantized_model(path, qm: QuantizedModel) -> None:
    opts = qm.opts
    out: dict[str, np.ndarray] = {}
    for i, qb in enumerate(qm.blocks):
        p = f"blocks.{i}."
        out[p + "ln1_gamma"] = qb.ln1_gamma
        out[p + "ln1_beta"] = qb.ln1_beta
        out[p + "ln1_scale"] = qb.ln1_params.scales
        _qlinear_tensors(out, p + "qkv.", qb.qkv, opts)
        out[p + "q_scale"] = qb.q_params.scales
        out[p + "k_scale"] = qb.k_params.scales
        out[p + "v_scale"] = qb.v_params.scales
        out[p + "attn_scale"] = qb.proj.in_params.scales
        _qlinear_tensors(out, p + "proj.", qb.proj, opts)
        out[p + "ln2_gamma"] = qb.ln2_gamma
        out[p + "ln2_beta"] = qb.ln2_beta
        out[p + "ln2_scale"] = qb.ln2_params.scales
        if isinstance(qb.ffn, QMoe):
            out[p + "gate.w"] = qb.ffn.w_gate
            out[p + "gate.b"] = qb.ffn.b_gate
            for j, e in enumerate(qb.ffn.experts):
                q = f"{p}expert{j}."
                _qlinear_tensors(out, q + "fc1.", e.fc1, opts)
                out[q + "hidden_scale"] = e.fc2.in_params.scales
                _qlinear_tensors(out, q + "fc2.", e.fc2, opts)
        else:
            _qlinear_tensors(out, p + "mlp.fc1.", qb.ffn.fc1, opts)
            out[p + "mlp.hidden_scale"] = qb.ffn.fc2.in_params.scales
            _qlinear_tensors(out, p + "mlp.fc2.", qb.ffn.fc2, opts)
    out["head.w"] = qm.head_w
    out["head.b"] = qm.head_b
    for key, f in qm.factors.items():
        q = f"factors.{key}."
        out[q + "r1"] = f.r1
        out[q + "r2"] = f.r2.astype(np.int32)
        out[q + "s_tilde"] = np.array([f.s_tilde])
        out[q + "src_scales"] = f.source.scales
        out[q + "src_zero_points"] = f.source.zero_points.astype(np.int32)
    for name, arr in _model_tensors(qm.float_ref, qm.cfg, np.float64).items():
        out["float_ref." + name] = arr
    meta = {
        "opts": {
            "weight_bits": opts.weight_bits,
            "act_bits": opts.act_bits,
            "attn_bits": opts.attn_bits,
            "reparam": opts.reparam,
            "attn_quantizer": opts.attn_quantizer,
            "per_channel_weights": opts.per_channel_weights,
            "scale_mean": opts.scale_mean,
        },
        "rewritten_sites": sorted(qm.factors),
    }
    write_tensor_file(path, KIND_QUANT, out, config=config_to_dict(qm.cfg), meta=meta)


def load_quantized_model(path) -> QuantizedModel:
    tf = read_tensor_file(path)
    if tf.kind != KIND_QUANT:
        raise FileFormatError(f"{path}: expected a quantized model, found {tf.kind!r}")
    cfg = config_from_dict(tf.config)
    opts = QuantizeOptions(**tf.meta["opts"])
    t = tf.tensors

    factors: dict[str, ReparamFactors] = {}
    for key in tf.meta.get("rewritten_sites", []):
        q = f"factors.{key}."
        src = QuantParams(
            opts.act_bits,
            False,
            PER_CHANNEL,
            np.asarray(t[q + "src_scales"], dtype=np.float64),
            np.asarray(t[q + "src_zero_points"], dtype=np.int64),
        )
        factors[key] = ReparamFactors(
            r1=np.asarray(t[q + "r1"], dtype=np.float64),
            r2=np.asarray(t[q + "r2"], dtype=np.int64),
            s_tilde=float(t[q + "s_tilde"][0]),
            source=src,
        )

    def f64(name):
        return np.asarray(t[name], dtype=np.float64)

    blocks = []
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        ln1 = _scalar_params(t, p + "ln1_scale", opts.act_bits)
        ln2 = _scalar_params(t, p + "ln2_scale", opts.act_bits)
        attn_in = _scalar_params(t, p + "attn_scale", opts.act_bits)
        if cfg.is_moe(i):
            hidden = [
                _scalar_params(t, f"{p}expert{j}.hidden_scale", opts.act_bits)
                for j in range(cfg.n_experts)
            ]
            ffn: QMlp | QMoe = QMoe(
                w_gate=f64(p + "gate.w"),
                b_gate=f64(p + "gate.b"),
                experts=[
                    QMlp(
                        fc1=_qlinear_from(t, f"{p}expert{j}.fc1.", ln2, opts),
                        fc2=_qlinear_from(t, f"{p}expert{j}.fc2.", hidden[j], opts),
                    )
                    for j in range(cfg.n_experts)
                ],
            )
        else:
            hidden_p = _scalar_params(t, p + "mlp.hidden_scale", opts.act_bits)
            ffn = QMlp(
                fc1=_qlinear_from(t, p + "mlp.fc1.", ln2, opts),
                fc2=_qlinear_from(t, p + "mlp.fc2.", hidden_p, opts),
            )
        blocks.append(
            QBlock(
                ln1_gamma=f64(p + "ln1_gamma"),
                ln1_beta=f64(p + "ln1_beta"),
                ln1_params=ln1,
                qkv=_qlinear_from(t, p + "qkv.", ln1, opts),
                q_params=_scalar_params(t, p + "q_scale", opts.act_bits),
                k_params=_scalar_params(t, p + "k_scale", opts.act_bits),
                v_params=_scalar_params(t, p + "v_scale", opts.act_bits),
                proj=_qlinear_from(t, p + "proj.", attn_in, opts),
                ln2_gamma=f64(p + "ln2_gamma"),
                ln2_beta=f64(p + "ln2_beta"),
                ln2_params=ln2,
                ffn=ffn,
            )
        )
    float_ref = _model_from_tensors(
        {k[len("float_ref."):]: v for k, v in t.items() if k.startswith("float_ref.")},
        cfg,
    )
    return QuantizedModel(
        cfg=cfg,
        opts=opts,
        blocks=blocks,
        head_w=f64("head.w"),
        head_b=f64("head.b"),
        factors=factors,
        float_ref=float_ref,
    )


# ---------------------------------------------------------------------------
# reports


def render_report(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_report(path, payload: dict) -> str:
    text = render_report(payload)
    if path is not None:
        Path(path).write_text(text)
    return text


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())
