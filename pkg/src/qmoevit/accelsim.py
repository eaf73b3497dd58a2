"""Analytical memory-traffic and cycle model of the accelerator.

Two kernels are modeled, mirroring the reuse-style architecture the
quantized model runs on:

* attention: every PE receives the same K/V stream (broadcast) while
  holding its own slice of the query rows, so off-chip K/V traffic is
  independent of the PE count. The "naive" policy models the
  conventional layout where each PE fetches its own K/V copy and traffic
  scales linearly with parallelism.
* linear: N_L compute units fed by a round-robin router that processes
  tokens in groups of N_L, streaming each weight tile once per group.
  The same kernel serves dense MLP layers and sparse MoE experts (the
  assignment just changes which tokens form the groups); the
  "per_patch_refetch" policy models a single CU refetching the full
  weight matrix for every token.

Everything is a pure closed-form function of the shapes: no event queue,
no contention beyond a single aggregate off-chip bandwidth, and the
3-pass softmax pipeline is assumed fully overlapped except for a fixed
fill latency. Per-kernel latency is max(compute, memory) cycles
(compute/IO double-buffered within a kernel) and kernel latencies add.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .model import GateDecision, ModelConfig

BROADCAST = "broadcast"
NAIVE = "naive"
RR_ROUTER = "rr_router"
PER_PATCH = "per_patch_refetch"
PRELOAD = "preload"
STREAM = "stream"


@dataclass(frozen=True)
class SimConfig:
    n_pe: int = 4
    n_l: int = 4
    t_s: int = 4
    macs_per_unit_per_cycle: int = 16
    offchip_bytes_per_cycle: float = 16.0
    onchip_capacity_bytes: int = 1 << 20
    bytes_per_activation: int = 1
    bytes_per_weight: int = 1
    weight_mode: str = STREAM
    attention_k_policy: str = BROADCAST
    linear_fetch_policy: str = RR_ROUTER
    tile_bytes: int = 64
    softmax_fill_cycles: int = 8
    preload_fallback_to_stream: bool = False

    def __post_init__(self):
        for name in ("n_pe", "n_l", "t_s", "macs_per_unit_per_cycle",
                     "bytes_per_activation", "bytes_per_weight", "tile_bytes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.offchip_bytes_per_cycle <= 0:
            raise ValueError("bandwidth must be positive")
        if self.weight_mode not in (PRELOAD, STREAM):
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")
        if self.attention_k_policy not in (BROADCAST, NAIVE):
            raise ValueError(f"unknown attention policy {self.attention_k_policy!r}")
        if self.linear_fetch_policy not in (RR_ROUTER, PER_PATCH):
            raise ValueError(f"unknown linear policy {self.linear_fetch_policy!r}")


@dataclass
class SimStats:
    """Traffic and cycle account for one kernel or a sum of kernels."""

    offchip_read_bytes: int = 0
    offchip_write_bytes: int = 0
    transactions: int = 0
    compute_cycles: int = 0
    memory_cycles: int = 0
    est_cycles: int = 0
    macs: int = 0
    read_bytes_by_role: dict[str, int] = field(default_factory=dict)
    parts: list[tuple[str, "SimStats"]] = field(default_factory=list)

    @property
    def gops_est(self) -> float:
        """Ops per cycle (= GOPS at a 1 GHz clock); 2 ops per MAC."""
        return 2.0 * self.macs / self.est_cycles if self.est_cycles else 0.0

    def add(self, name: str, other: "SimStats") -> None:
        self.offchip_read_bytes += other.offchip_read_bytes
        self.offchip_write_bytes += other.offchip_write_bytes
        self.transactions += other.transactions
        self.compute_cycles += other.compute_cycles
        self.memory_cycles += other.memory_cycles
        self.est_cycles += other.est_cycles
        self.macs += other.macs
        for role, b in other.read_bytes_by_role.items():
            self.read_bytes_by_role[role] = self.read_bytes_by_role.get(role, 0) + b
        self.parts.append((name, other))

    def to_dict(self) -> dict:
        return {
            "offchip_read_bytes": self.offchip_read_bytes,
            "offchip_write_bytes": self.offchip_write_bytes,
            "transactions": self.transactions,
            "compute_cycles": self.compute_cycles,
            "memory_cycles": self.memory_cycles,
            "est_cycles": self.est_cycles,
            "macs": self.macs,
            "gops_est": self.gops_est,
            "read_bytes_by_role": dict(sorted(self.read_bytes_by_role.items())),
        }


def _tx(sim: SimConfig, nbytes: int) -> int:
    # One burst per tile; partial tiles still cost a transaction.
    return math.ceil(nbytes / sim.tile_bytes)


def _finish(stats: SimStats, sim: SimConfig) -> SimStats:
    total = stats.offchip_read_bytes + stats.offchip_write_bytes
    stats.memory_cycles = math.ceil(total / sim.offchip_bytes_per_cycle)
    stats.est_cycles = max(stats.compute_cycles, stats.memory_cycles)
    return stats


def sim_attention(cfg: ModelConfig, sim: SimConfig) -> SimStats:
    """One multi-head attention kernel (score, softmax, and value passes).

    Q rows partition across the PEs; K and V stream from off-chip once
    per head under the broadcast policy, or once per PE under the naive
    policy. Softmax pass 3 scale multiplies are throughput-capped by t_s
    and the 3-pass pipeline costs a fixed fill on top of the MAC work.
    """
    n, d_h, h = cfg.n_tokens, cfg.head_dim, cfg.n_heads
    b = sim.bytes_per_activation
    kv_copies = 1 if sim.attention_k_policy == BROADCAST else sim.n_pe
    q_bytes = n * d_h * h * b
    k_bytes = n * d_h * h * b * kv_copies
    v_bytes = n * d_h * h * b * kv_copies
    out_bytes = n * d_h * h * b

    stats = SimStats()
    stats.read_bytes_by_role = {"q": q_bytes, "k": k_bytes, "v": v_bytes}
    stats.offchip_read_bytes = q_bytes + k_bytes + v_bytes
    stats.offchip_write_bytes = out_bytes
    stats.transactions = sum(_tx(sim, x) for x in (q_bytes, k_bytes, v_bytes, out_bytes))

    mac_cycles = math.ceil(
        h * math.ceil(n / sim.n_pe) * n * d_h * 2 / sim.macs_per_unit_per_cycle
    )
    pass3_cycles = math.ceil(h * n * d_h / sim.t_s)
    stats.compute_cycles = max(mac_cycles, pass3_cycles) + sim.softmax_fill_cycles
    stats.macs = 2 * h * n * n * d_h
    return _finish(stats, sim)


def sim_linear(
    tokens: int,
    in_dim: int,
    out_dim: int,
    sim: SimConfig,
    assignment: list[int] | None = None,
) -> SimStats:
    """One linear kernel over `tokens` token-computations.

    Dense mode (assignment None) runs all tokens against one weight
    matrix. Sparse mode partitions the tokens into per-expert groups
    given by `assignment` (which must sum to `tokens`), each group using
    its own equally sized weight matrix; the router simply draws the
    group's tokens in batches of N_L, so the kernel is the same.
    """
    if tokens < 0 or in_dim < 1 or out_dim < 1:
        raise ValueError("dimensions must be >= 1 and tokens >= 0")
    w_bytes = in_dim * out_dim * sim.bytes_per_weight
    groups = [tokens] if assignment is None else [int(x) for x in assignment]
    if assignment is not None:
        if any(x < 0 for x in groups):
            raise ValueError("negative token count in assignment")
        if sum(groups) != tokens:
            raise ValueError(
                f"assignment sums to {sum(groups)}, expected {tokens} token-computations"
            )

    if sim.weight_mode == PRELOAD:
        resident = w_bytes * len(groups)
        if resident > sim.onchip_capacity_bytes and not sim.preload_fallback_to_stream:
            raise ValueError(
                f"preload needs {resident} bytes, capacity is {sim.onchip_capacity_bytes}"
            )
        preload_ok = resident <= sim.onchip_capacity_bytes
    else:
        preload_ok = False

    weight_bytes = 0
    compute = 0
    token_cycles = math.ceil(in_dim * out_dim / sim.macs_per_unit_per_cycle)
    for n_j in groups:
        if n_j == 0 and not preload_ok:
            continue
        if preload_ok:
            weight_bytes += w_bytes
        elif sim.linear_fetch_policy == RR_ROUTER:
            weight_bytes += math.ceil(n_j / sim.n_l) * w_bytes
        else:
            weight_bytes += n_j * w_bytes
        compute += math.ceil(n_j / sim.n_l) * token_cycles

    act_bytes = tokens * in_dim * sim.bytes_per_activation
    out_bytes = tokens * out_dim * sim.bytes_per_activation

    stats = SimStats()
    stats.read_bytes_by_role = {"weights": weight_bytes, "activations": act_bytes}
    stats.offchip_read_bytes = weight_bytes + act_bytes
    stats.offchip_write_bytes = out_bytes
    stats.transactions = sum(_tx(sim, x) for x in (weight_bytes, act_bytes, out_bytes) if x)
    stats.compute_cycles = compute
    stats.macs = tokens * in_dim * out_dim
    return _finish(stats, sim)


def expert_loads(decisions: list[GateDecision], n_experts: int) -> list[int]:
    """Tokens routed to each expert (the simulator's sparse assignment)."""
    loads = [0] * n_experts
    for d in decisions:
        for j in d.experts:
            if not 0 <= j < n_experts:
                raise ValueError(f"expert index {j} out of range")
            loads[j] += 1
    return loads


def sim_model(
    cfg: ModelConfig,
    gate_trace: dict[int, list[GateDecision]],
    sim: SimConfig,
) -> SimStats:
    """Compose attention and linear kernels over the whole block stack.

    gate_trace must come from a real (float or quantized) forward pass so
    expert loads reflect actual routing; it is keyed by MoE block index.
    """
    missing = [i for i in cfg.moe_blocks if i not in gate_trace]
    if missing:
        raise ValueError(f"gate trace missing MoE blocks {missing}")
    total = SimStats()
    d, h = cfg.dim, cfg.hidden_dim
    n = cfg.n_tokens
    for i in range(cfg.n_blocks):
        total.add(f"b{i}.attention", sim_attention(cfg, sim))
        total.add(f"b{i}.qkv", sim_linear(n, d, 3 * d, sim))
        total.add(f"b{i}.proj", sim_linear(n, d, d, sim))
        if cfg.is_moe(i):
            decisions = gate_trace[i]
            if len(decisions) != n:
                raise ValueError(
                    f"block {i} trace covers {len(decisions)} tokens, expected {n}"
                )
            loads = expert_loads(decisions, cfg.n_experts)
            if sum(loads) != n * cfg.top_k:
                raise ValueError("trace routing disagrees with top_k")
            total.add(f"b{i}.gate", sim_linear(n, d, cfg.n_experts, sim))
            total.add(f"b{i}.expert_fc1", sim_linear(n * cfg.top_k, d, h, sim, loads))
            total.add(f"b{i}.expert_fc2", sim_linear(n * cfg.top_k, h, d, sim, loads))
        else:
            total.add(f"b{i}.fc1", sim_linear(n, d, h, sim))
            total.add(f"b{i}.fc2", sim_linear(n, h, d, sim))
    return total
