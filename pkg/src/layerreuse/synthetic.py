"""Deterministic synthetic multi-layer decoder with a tunable cross-layer similarity dial.

The model is not trained; it exists so that selection overlap, layer policies,
and hybrid decoding can be measured exactly. Layer 0 draws seeded Gaussian
keys, values, and queries. Each deeper layer blends the previous layer's
tensors with fresh seeded noise: weight rho on the previous layer, 1 - rho on
the noise, rows renormalized. rho = 1 copies tensors across layers exactly,
rho = 0 makes layers independent.

Every random draw comes from its own SeedSequence keyed by (seed, stream,
layer, head, step), so any tensor can be regenerated in isolation and two
runs with the same config are bit-identical on the same platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import (
    BlockSet,
    LayerKvCache,
    TopKSet,
    block_max_of_logits,
    full_attention,
    topk_blocks,
    topk_of_logits,
)
from .errors import InvalidInputError

__all__ = ["SynthModelConfig", "SyntheticModel", "DecodeTrace", "generate_model", "run_full_trace"]

# Stream tags keep every random draw on an independent, addressable seed.
_S_KEYS = 0
_S_VALUES = 1
_S_QUERY_BASE = 2
_S_QUERY_WALK = 3
_S_QUERY_MIX = 4
_S_EXT_KEYS = 5
_S_EXT_VALUES = 6
_S_PROBE = 7

_WALK_SCALE = 0.5
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SynthModelConfig:
    """Shape and similarity parameters of the synthetic decoder.

    inter_layer_correlation is the dial rho in [0, 1] controlling how much of
    each layer's tensors is inherited from the layer below.
    """

    layers: int
    head_dim: int = 32
    context_len: int = 128
    seed: int = 0
    inter_layer_correlation: float = 0.5
    heads: int = 1

    def __post_init__(self) -> None:
        if not isinstance(self.layers, int) or self.layers < 2:
            raise InvalidInputError(f"layers must be an integer >= 2, got {self.layers}")
        if not isinstance(self.head_dim, int) or self.head_dim < 1:
            raise InvalidInputError(f"head_dim must be an integer >= 1, got {self.head_dim}")
        if not isinstance(self.context_len, int) or self.context_len < 2:
            raise InvalidInputError(f"context_len must be an integer >= 2, got {self.context_len}")
        if not isinstance(self.seed, int):
            raise InvalidInputError("seed must be an integer")
        rho = self.inter_layer_correlation
        if not isinstance(rho, (int, float)) or not math.isfinite(rho) or not 0.0 <= rho <= 1.0:
            raise InvalidInputError(f"inter_layer_correlation must lie in [0, 1], got {rho}")
        object.__setattr__(self, "inter_layer_correlation", float(rho))
        if not isinstance(self.heads, int) or self.heads < 1:
            raise InvalidInputError(f"heads must be an integer >= 1, got {self.heads}")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed & _MASK64, spawn_key=key))


def _renorm(x: np.ndarray, target: float) -> np.ndarray:
    """Rescale rows (or a single vector) to Euclidean norm `target`."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    norms = np.where(norms == 0.0, 1.0, norms)
    return x * (target / norms)


def _blend(prev: np.ndarray, fresh: np.ndarray, rho: float, target: float) -> np.ndarray:
    # rho == 1 must copy exactly: renormalizing would perturb low-order bits
    # and break exact cross-layer equality.
    if rho == 1.0:
        return prev.copy()
    return _renorm(rho * prev + (1.0 - rho) * fresh, target)


class SyntheticModel:
    """Materialized base caches plus on-demand queries and cache-growth rows."""

    def __init__(self, config: SynthModelConfig) -> None:
        self.config = config
        L, H = config.layers, config.heads
        N, d = config.context_len, config.head_dim
        rho = config.inter_layer_correlation
        target = math.sqrt(d)

        keys = np.empty((L, H, N, d))
        values = np.empty((L, H, N, d))
        for h in range(H):
            keys[0, h] = _renorm(_rng(config.seed, _S_KEYS, 0, h).standard_normal((N, d)), target)
            values[0, h] = _renorm(
                _rng(config.seed, _S_VALUES, 0, h).standard_normal((N, d)), target
            )
            for l in range(1, L):
                fresh_k = _rng(config.seed, _S_KEYS, l, h).standard_normal((N, d))
                fresh_v = _rng(config.seed, _S_VALUES, l, h).standard_normal((N, d))
                keys[l, h] = _blend(keys[l - 1, h], fresh_k, rho, target)
                values[l, h] = _blend(values[l - 1, h], fresh_v, rho, target)
        keys.setflags(write=False)
        values.setflags(write=False)
        self._base_keys = keys
        self._base_values = values

    def queries(self, steps: int) -> np.ndarray:
        """Query tensor [steps, layers, heads, head_dim].

        The layer-0 query performs a seeded random walk across decode steps;
        deeper layers blend the layer above with fresh per-layer noise, the
        same construction as the caches.
        """
        cfg = self.config
        if steps < 1:
            raise InvalidInputError(f"steps must be >= 1, got {steps}")
        L, H, d = cfg.layers, cfg.heads, cfg.head_dim
        rho = cfg.inter_layer_correlation
        target = math.sqrt(d)
        q = np.empty((steps, L, H, d))
        for h in range(H):
            base = _renorm(_rng(cfg.seed, _S_QUERY_BASE, h).standard_normal(d), target)
            for t in range(steps):
                if t > 0:
                    walk = _rng(cfg.seed, _S_QUERY_WALK, h, t).standard_normal(d)
                    base = _renorm(base + _WALK_SCALE * walk, target)
                q[t, 0, h] = base
                for l in range(1, L):
                    fresh = _rng(cfg.seed, _S_QUERY_MIX, l, h, t).standard_normal(d)
                    q[t, l, h] = _blend(q[t, l - 1, h], fresh, rho, target)
        q.setflags(write=False)
        return q

    def grown_arrays(self, steps: int) -> tuple[np.ndarray, np.ndarray]:
        """Key/value tensors [layers, heads, context_len + steps, head_dim].

        Row context_len + t is the token appended at decode step t; the cache
        visible at step t is the leading context_len + t rows. Growth rows use
        the same cross-layer blending as the base cache, so rho = 1 keeps all
        layers identical at every step.
        """
        cfg = self.config
        if steps < 1:
            raise InvalidInputError(f"steps must be >= 1, got {steps}")
        L, H, d = cfg.layers, cfg.heads, cfg.head_dim
        rho = cfg.inter_layer_correlation
        target = math.sqrt(d)
        ext_k = np.empty((steps, L, H, d))
        ext_v = np.empty((steps, L, H, d))
        for t in range(steps):
            for h in range(H):
                ext_k[t, 0, h] = _renorm(
                    _rng(cfg.seed, _S_EXT_KEYS, 0, h, t).standard_normal(d), target
                )
                ext_v[t, 0, h] = _renorm(
                    _rng(cfg.seed, _S_EXT_VALUES, 0, h, t).standard_normal(d), target
                )
                for l in range(1, L):
                    fresh_k = _rng(cfg.seed, _S_EXT_KEYS, l, h, t).standard_normal(d)
                    fresh_v = _rng(cfg.seed, _S_EXT_VALUES, l, h, t).standard_normal(d)
                    ext_k[t, l, h] = _blend(ext_k[t, l - 1, h], fresh_k, rho, target)
                    ext_v[t, l, h] = _blend(ext_v[t, l - 1, h], fresh_v, rho, target)
        keys = np.concatenate([self._base_keys, np.moveaxis(ext_k, 0, 2)], axis=2)
        values = np.concatenate([self._base_values, np.moveaxis(ext_v, 0, 2)], axis=2)
        keys.setflags(write=False)
        values.setflags(write=False)
        return keys, values

    def cache_at(self, keys: np.ndarray, values: np.ndarray, layer: int, head: int, step: int) -> LayerKvCache:
        """Cache view for (layer, head) at a decode step, from grown_arrays output."""
        n = self.config.context_len + step
        return LayerKvCache(keys=keys[layer, head, :n], values=values[layer, head, :n])

    def propagate(self, x: np.ndarray, next_layer: int, head: int, step: int) -> np.ndarray:
        """Push a layer output toward the next layer's input.

        Applies the model's blending map with a seeded probe noise stream, so
        a full/sparse output pair can be compared after one layer of
        propagation. rho = 1 copies exactly, matching the cache construction.
        """
        cfg = self.config
        rho = cfg.inter_layer_correlation
        if rho == 1.0:
            return np.array(x, dtype=np.float64)
        fresh = _rng(cfg.seed, _S_PROBE, next_layer, head, step).standard_normal(x.shape[-1])
        return _renorm(rho * np.asarray(x, dtype=np.float64) + (1.0 - rho) * fresh, math.sqrt(cfg.head_dim))


def generate_model(config: SynthModelConfig) -> SyntheticModel:
    """Materialize the synthetic decoder for a config. Deterministic in the config."""
    return SyntheticModel(config)


@dataclass(frozen=True)
class DecodeTrace:
    """Full-attention decode record: queries, outputs, and selections per step and layer.

    queries and outputs are [steps, layers, heads, head_dim]. topk[t][l] is the
    token-level selection of size budget, blocks[t][l] the block-level
    selection of width block_size. Multi-head steps aggregate by summing
    per-head logits before selecting, so there is one set per layer.
    """

    config: SynthModelConfig
    budget: int
    block_size: int
    queries: np.ndarray
    outputs: np.ndarray
    topk: tuple[tuple[TopKSet, ...], ...]
    blocks: tuple[tuple[BlockSet, ...], ...]

    @property
    def steps(self) -> int:
        return self.queries.shape[0]


def run_full_trace(model: SyntheticModel, steps: int, budget: int, block_size: int = 1) -> DecodeTrace:
    """Decode `steps` tokens with full attention at every layer, recording selections.

    Args:
        model: synthetic decoder.
        steps: number of decode steps, >= 1. The cache grows by one row per
            layer and head after each step.
        budget: token-level top-k size; must satisfy 1 <= budget <= context_len
            so every recorded set has exactly `budget` members.
        block_size: width for the block-level selections recorded alongside
            the token-level ones. The block budget is ceil(budget / block_size),
            clamped to the step's block count.

    Returns:
        A DecodeTrace with one TopKSet and one BlockSet per (step, layer).
    """
    cfg = model.config
    if steps < 1:
        raise InvalidInputError(f"steps must be >= 1, got {steps}")
    if budget < 1 or budget > cfg.context_len:
        raise InvalidInputError(
            f"budget must lie in [1, context_len={cfg.context_len}], got {budget}"
        )
    if block_size < 1:
        raise InvalidInputError(f"block_size must be >= 1, got {block_size}")

    L, H, d = cfg.layers, cfg.heads, cfg.head_dim
    keys, values = model.grown_arrays(steps)
    queries = model.queries(steps)
    outputs = np.empty((steps, L, H, d))
    block_budget = math.ceil(budget / block_size)
    topk_rows: list[tuple[TopKSet, ...]] = []
    block_rows: list[tuple[BlockSet, ...]] = []
    for t in range(steps):
        n_t = cfg.context_len + t
        step_topk: list[TopKSet] = []
        step_blocks: list[BlockSet] = []
        for l in range(L):
            agg_logits = np.zeros(n_t)
            for h in range(H):
                cache = model.cache_at(keys, values, l, h, t)
                out, scores = full_attention(queries[t, l, h], cache)
                outputs[t, l, h] = out
                agg_logits += scores.logits
            step_topk.append(TopKSet(indices=topk_of_logits(agg_logits, budget), budget=budget))
            n_blocks = math.ceil(n_t / block_size)
            step_blocks.append(
                topk_blocks(
                    block_max_of_logits(agg_logits, block_size),
                    min(block_budget, n_blocks),
                    block_size,
                )
            )
        topk_rows.append(tuple(step_topk))
        block_rows.append(tuple(step_blocks))
    outputs.setflags(write=False)
    return DecodeTrace(
        config=cfg,
        budget=budget,
        block_size=block_size,
        queries=queries,
        outputs=outputs,
        topk=tuple(topk_rows),
        blocks=tuple(block_rows),
    )
