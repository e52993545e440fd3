"""Hybrid decoding under a layer policy, with fidelity measurement and a cost model.

Full layers run exact attention over the whole cache and publish their top-k
(or top-block) selection. Reuse layers never score the full cache: they
inherit the previous layer's selection, gather only those KV rows, and run
subset-renormalized sparse attention. Instrumentation counts every full-cache
score computation so tests can assert that reuse layers triggered none.

The cost model is analytic. It prices KV traffic in bytes, for both the
HBM-resident case and the case where reused layers' caches are offloaded
across a slow link and only the selected rows come back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import (
    BlockSet,
    TopKSet,
    _subset_attention,
    block_max_of_logits,
    full_attention,
    topk_blocks,
    topk_of_logits,
)
from .errors import ConfigurationError, InvalidInputError
from .policy import Action, LayerPolicy
from .profiling import relative_l2_error
from .synthetic import DecodeTrace, SyntheticModel, run_full_trace

__all__ = [
    "FidelityTable",
    "DecodeRunResult",
    "CostModelReport",
    "FidelityReport",
    "hybrid_decode",
    "hybrid_decode_blocks",
    "cost_model",
    "fidelity_report",
]


@dataclass(frozen=True)
class FidelityTable:
    """Relative L2 error of hybrid outputs against the full baseline.

    per_step_layer is [steps, layers]; per_layer averages over steps;
    aggregate averages over everything. Full layers contribute exact zeros.
    """

    per_step_layer: np.ndarray
    per_layer: np.ndarray
    aggregate: float


@dataclass(frozen=True)
class DecodeRunResult:
    """Outputs, selections, fidelity, and instrumentation of one hybrid run.

    full_score_computations[t] counts layers that scored the whole cache at
    step t; for a valid policy it equals the policy's full_count every step.
    reuse_full_scans counts full-cache score computations that happened at
    Reuse layers and must stay zero. reuse_gathered_rows[t][l] is the number
    of KV rows gathered at a Reuse layer (None at Full layers). budget counts
    tokens in token mode and blocks in block mode.
    """

    policy: LayerPolicy
    budget: int
    block_size: int
    outputs: np.ndarray
    selections: tuple[tuple[TopKSet | BlockSet, ...], ...]
    fidelity: FidelityTable
    full_score_computations: tuple[int, ...]
    reuse_full_scans: int
    reuse_gathered_rows: tuple[tuple[int | None, ...], ...]

    @property
    def full_layer_count(self) -> int:
        return self.policy.full_count

    @property
    def reuse_layer_count(self) -> int:
        return self.policy.num_layers - self.policy.full_count

    @property
    def steps(self) -> int:
        return self.outputs.shape[0]


def _fidelity_tables(baseline_outputs: np.ndarray, hybrid_outputs: np.ndarray) -> FidelityTable:
    steps, layers = hybrid_outputs.shape[0], hybrid_outputs.shape[1]
    table = np.empty((steps, layers))
    for t in range(steps):
        for l in range(layers):
            table[t, l] = relative_l2_error(
                hybrid_outputs[t, l].ravel(), baseline_outputs[t, l].ravel()
            )
    table.setflags(write=False)
    per_layer = table.mean(axis=0)
    per_layer.setflags(write=False)
    return FidelityTable(
        per_step_layer=table, per_layer=per_layer, aggregate=float(table.mean())
    )


def _check_run_args(model: SyntheticModel, policy: LayerPolicy, steps: int) -> None:
    if policy.num_layers != model.config.layers:
        raise ConfigurationError(
            f"policy covers {policy.num_layers} layers, model has {model.config.layers}"
        )
    if policy.actions[0] is not Action.FULL:
        raise InvalidInputError("the first layer of a policy must run full attention")
    if steps < 1:
        raise InvalidInputError(f"steps must be >= 1, got {steps}")


def _augment_selection(sel: TopKSet, n: int, sinks: int, recent: int) -> TopKSet:
    """Union the inherited selection with the first `sinks` and last `recent` tokens."""
    extra = set(range(min(sinks, n))) | set(range(max(n - recent, 0), n))
    merged = tuple(sorted(set(sel.indices) | extra))
    return TopKSet(indices=merged, budget=len(merged))


def hybrid_decode(
    model: SyntheticModel,
    policy: LayerPolicy,
    budget: int,
    steps: int,
    *,
    include_sinks: int = 0,
    include_recent: int = 0,
) -> DecodeRunResult:
    """Decode with token-level selection reuse under a layer policy.

    Full layers compute exact attention and extract the top-min(budget, N)
    tokens of their summed per-head logits; Reuse layers inherit the previous
    layer's selection and run sparse attention over just those rows. The
    budget is clamped to the current cache length each step. Fidelity is
    measured against an internally recomputed all-full baseline on the same
    model and steps.

    include_sinks / include_recent optionally force the first and last so
    many tokens into reused selections; both default to off, which keeps the
    gathered row count at exactly min(budget, N).
    """
    _check_run_args(model, policy, steps)
    if budget < 1:
        raise InvalidInputError(f"budget must be >= 1, got {budget}")
    if include_sinks < 0 or include_recent < 0:
        raise InvalidInputError("include_sinks and include_recent must be >= 0")
    cfg = model.config
    baseline = run_full_trace(model, steps, min(budget, cfg.context_len), 1)

    L, H, d = cfg.layers, cfg.heads, cfg.head_dim
    keys, values = model.grown_arrays(steps)
    queries = model.queries(steps)
    outputs = np.empty((steps, L, H, d))
    selections: list[tuple[TopKSet, ...]] = []
    full_counts: list[int] = []
    gathered: list[tuple[int | None, ...]] = []
    reuse_full_scans = 0
    for t in range(steps):
        n_t = cfg.context_len + t
        b_t = min(budget, n_t)
        step_sel: list[TopKSet] = []
        step_gathered: list[int | None] = []
        fulls = 0
        sel: TopKSet | None = None
        for l in range(L):
            caches = [model.cache_at(keys, values, l, h, t) for h in range(H)]
            if policy.actions[l] is Action.FULL:
                agg_logits = np.zeros(n_t)
                for h in range(H):
                    out, scores = full_attention(queries[t, l, h], caches[h])
                    outputs[t, l, h] = out
                    agg_logits += scores.logits
                fulls += 1
                sel = TopKSet(indices=topk_of_logits(agg_logits, b_t), budget=budget)
                step_gathered.append(None)
            else:
                assert sel is not None
                if include_sinks or include_recent:
                    sel = _augment_selection(sel, n_t, include_sinks, include_recent)
                idx = sel.as_array()
                for h in range(H):
                    out, _, _ = _subset_attention(queries[t, l, h], caches[h], idx)
                    outputs[t, l, h] = out
                step_gathered.append(sel.size)
            step_sel.append(sel)
        selections.append(tuple(step_sel))
        gathered.append(tuple(step_gathered))
        full_counts.append(fulls)
    outputs.setflags(write=False)
    return DecodeRunResult(
        policy=policy,
        budget=budget,
        block_size=1,
        outputs=outputs,
        selections=tuple(selections),
        fidelity=_fidelity_tables(baseline.outputs, outputs),
        full_score_computations=tuple(full_counts),
        reuse_full_scans=reuse_full_scans,
        reuse_gathered_rows=tuple(gathered),
    )


def hybrid_decode_blocks(
    model: SyntheticModel,
    policy: LayerPolicy,
    block_budget: int,
    block_size: int,
    steps: int,
) -> DecodeRunResult:
    """Decode with block-level selection reuse under a layer policy.

    Full layers max-pool their summed logits into blocks of block_size tokens
    and keep the top-min(block_budget, block count) blocks; Reuse layers
    gather exactly the selected blocks' token ranges (the final block may be
    truncated by the cache end) and run sparse attention over that coverage.
    block_size = 1 reproduces hybrid_decode with budget = block_budget bit
    for bit.
    """
    _check_run_args(model, policy, steps)
    if block_budget < 1:
        raise InvalidInputError(f"block_budget must be >= 1, got {block_budget}")
    if block_size < 1:
        raise InvalidInputError(f"block_size must be >= 1, got {block_size}")
    cfg = model.config
    baseline_budget = min(max(block_budget * block_size, 1), cfg.context_len)
    baseline = run_full_trace(model, steps, baseline_budget, block_size)

    L, H, d = cfg.layers, cfg.heads, cfg.head_dim
    keys, values = model.grown_arrays(steps)
    queries = model.queries(steps)
    outputs = np.empty((steps, L, H, d))
    selections: list[tuple[BlockSet, ...]] = []
    full_counts: list[int] = []
    gathered: list[tuple[int | None, ...]] = []
    reuse_full_scans = 0
    for t in range(steps):
        n_t = cfg.context_len + t
        n_blocks = math.ceil(n_t / block_size)
        bb_t = min(block_budget, n_blocks)
        step_sel: list[BlockSet] = []
        step_gathered: list[int | None] = []
        fulls = 0
        sel: BlockSet | None = None
        for l in range(L):
            caches = [model.cache_at(keys, values, l, h, t) for h in range(H)]
            if policy.actions[l] is Action.FULL:
                agg_logits = np.zeros(n_t)
                for h in range(H):
                    out, scores = full_attention(queries[t, l, h], caches[h])
                    outputs[t, l, h] = out
                    agg_logits += scores.logits
                fulls += 1
                sel = topk_blocks(block_max_of_logits(agg_logits, block_size), bb_t, block_size)
                step_gathered.append(None)
            else:
                assert sel is not None
                coverage = sel.token_coverage(n_t)
                for h in range(H):
                    out, _, _ = _subset_attention(queries[t, l, h], caches[h], coverage)
                    outputs[t, l, h] = out
                step_gathered.append(int(coverage.shape[0]))
            step_sel.append(sel)
        selections.append(tuple(step_sel))
        gathered.append(tuple(step_gathered))
        full_counts.append(fulls)
    outputs.setflags(write=False)
    return DecodeRunResult(
        policy=policy,
        budget=block_budget,
        block_size=block_size,
        outputs=outputs,
        selections=tuple(selections),
        fidelity=_fidelity_tables(baseline.outputs, outputs),
        full_score_computations=tuple(full_counts),
        reuse_full_scans=reuse_full_scans,
        reuse_gathered_rows=tuple(gathered),
    )


@dataclass(frozen=True)
class CostModelReport:
    """Analytic KV-traffic accounting for one (policy, context length, budget) point.

    Byte counts are exact integers; ratios and speedups are plain floats.
    tokens_covered is the per-step sparse read size min(budget * block_size,
    context_len). predicted_speedup assumes decode time is proportional to
    bytes moved, so it is the full/hybrid byte ratio and is independent of
    the absolute bandwidths; the seconds fields scale by them.
    """

    kv_bytes_full: int
    kv_bytes_hybrid: int
    bytes_ratio: float
    link_bytes_full: int
    link_bytes_offload: int
    predicted_speedup: float
    tokens_covered: int
    hbm_seconds_full: float
    hbm_seconds_hybrid: float
    link_seconds_full: float
    link_seconds_offload: float


def cost_model(
    policy: LayerPolicy,
    context_len: int,
    budget: int,
    *,
    block_size: int = 1,
    bytes_per_elem: int = 8,
    head_dim: int = 64,
    link_bandwidth: float = 32e9,
    hbm_bandwidth: float = 2e12,
) -> CostModelReport:
    """Price one decode step's KV reads under a policy.

    A Full layer reads its whole cache: context_len rows. A Reuse layer reads
    only the selected rows: min(budget * block_size, context_len), where
    budget counts tokens when block_size is 1 and blocks otherwise. Each row
    is 2 * head_dim * bytes_per_elem bytes (keys and values). head_dim is the
    total per-layer KV width; fold multiple heads into it. bytes_per_elem 8
    prices float64 storage, 4 prices a float32 variant.

    The offload mirror assumes Full layers' caches stay in fast memory while
    Reuse layers' caches live across the link, so link traffic follows the
    same full-vs-selected split.
    """
    L = policy.num_layers
    full = policy.full_count
    if context_len < 1:
        raise InvalidInputError(f"context_len must be >= 1, got {context_len}")
    if budget < 1:
        raise InvalidInputError(f"budget must be >= 1, got {budget}")
    if block_size < 1:
        raise InvalidInputError(f"block_size must be >= 1, got {block_size}")
    if bytes_per_elem < 1:
        raise InvalidInputError(f"bytes_per_elem must be >= 1, got {bytes_per_elem}")
    if head_dim < 1:
        raise InvalidInputError(f"head_dim must be >= 1, got {head_dim}")
    if not link_bandwidth > 0 or not hbm_bandwidth > 0:
        raise InvalidInputError("bandwidths must be positive")

    covered = min(budget * block_size, context_len)
    row_bytes = 2 * head_dim * bytes_per_elem
    kv_full = L * context_len * row_bytes
    kv_hybrid = (full * context_len + (L - full) * covered) * row_bytes
    ratio = kv_hybrid / kv_full
    return CostModelReport(
        kv_bytes_full=kv_full,
        kv_bytes_hybrid=kv_hybrid,
        bytes_ratio=ratio,
        link_bytes_full=kv_full,
        link_bytes_offload=kv_hybrid,
        predicted_speedup=kv_full / kv_hybrid,
        tokens_covered=covered,
        hbm_seconds_full=kv_full / hbm_bandwidth,
        hbm_seconds_hybrid=kv_hybrid / hbm_bandwidth,
        link_seconds_full=kv_full / link_bandwidth,
        link_seconds_offload=kv_hybrid / link_bandwidth,
    )


@dataclass(frozen=True)
class FidelityReport:
    """Hybrid-vs-baseline comparison: output error plus selection agreement.

    selection_overlap[t, l] compares the hybrid selection at (step t, layer
    l) with the baseline's fresh selection there: |shared| / max(sizes). At
    Full layers this is 1 by construction when budgets match; at Reuse layers
    it measures how stale the inherited selection has become.
    """

    rnmse: FidelityTable
    selection_overlap: np.ndarray
    per_layer_overlap: np.ndarray


def _selection_indices(sel: TopKSet | BlockSet) -> tuple[int, ...]:
    return sel.indices if isinstance(sel, TopKSet) else sel.block_indices


def fidelity_report(baseline: DecodeTrace, hybrid: DecodeRunResult) -> FidelityReport:
    """Compare a hybrid run against a full-attention trace of the same shape.

    Raises:
        InvalidInputError: when the trace and the run disagree on steps,
            layers, heads, or head width.
    """
    if baseline.outputs.shape != hybrid.outputs.shape:
        raise InvalidInputError(
            f"shape mismatch: baseline {baseline.outputs.shape} vs hybrid {hybrid.outputs.shape}"
        )
    if hybrid.block_size > 1 and baseline.block_size != hybrid.block_size:
        raise InvalidInputError(
            f"block size mismatch: baseline {baseline.block_size} vs hybrid {hybrid.block_size}"
        )
    steps, layers = hybrid.outputs.shape[0], hybrid.outputs.shape[1]
    overlap = np.empty((steps, layers))
    for t in range(steps):
        for l in range(layers):
            if hybrid.block_size == 1:
                base_sel = _selection_indices(baseline.topk[t][l])
            else:
                base_sel = _selection_indices(baseline.blocks[t][l])
            hyb_sel = _selection_indices(hybrid.selections[t][l])
            shared = len(set(base_sel) & set(hyb_sel))
            overlap[t, l] = shared / max(len(base_sel), len(hyb_sel))
    overlap.setflags(write=False)
    per_layer = overlap.mean(axis=0)
    per_layer.setflags(write=False)
    return FidelityReport(
        rnmse=_fidelity_tables(baseline.outputs, hybrid.outputs),
        selection_overlap=overlap,
        per_layer_overlap=per_layer,
    )
