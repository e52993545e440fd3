"""Exact single-query attention, top-k token selection, and block-level pooling.

All math runs in float64. Every public operation is a pure function over
immutable inputs, so results are safe to share across threads and are
bit-reproducible for identical inputs on the same platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigurationError,
    InvalidInputError,
    InvalidSelectionError,
    NumericInputError,
)

__all__ = [
    "LayerKvCache",
    "AttentionScores",
    "TopKSet",
    "BlockSet",
    "softmax",
    "full_attention",
    "sparse_attention",
    "topk_indices",
    "topk_of_logits",
    "block_aggregate_scores",
    "block_max_of_logits",
    "topk_blocks",
]


def _frozen_f64(value, name: str, ndim: int) -> np.ndarray:
    """Copy to a read-only float64 array, rejecting non-finite entries."""
    arr = np.array(value, dtype=np.float64)
    if arr.ndim != ndim:
        raise ConfigurationError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericInputError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LayerKvCache:
    """Key and value matrices for one layer's cached tokens.

    Both arrays are [N, d] float64 with identical shapes and N >= 1. Inputs
    are copied and marked read-only at construction, so a cache can be handed
    to concurrent readers without defensive copies.
    """

    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        keys = _frozen_f64(self.keys, "keys", ndim=2)
        values = _frozen_f64(self.values, "values", ndim=2)
        if keys.shape != values.shape:
            raise ConfigurationError(
                f"keys shape {keys.shape} does not match values shape {values.shape}"
            )
        if keys.shape[0] < 1:
            raise ConfigurationError("cache must hold at least one token")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)

    @property
    def length(self) -> int:
        """Number of cached tokens N."""
        return self.keys.shape[0]

    @property
    def head_dim(self) -> int:
        """Per-token vector width d."""
        return self.keys.shape[1]


@dataclass(frozen=True)
class AttentionScores:
    """Pre-softmax logits and post-softmax weights over one cache.

    logits[n] = (q . keys[n]) / sqrt(d). weights = softmax(logits), so the
    weights sum to 1 within 1e-9 and share their argmax with the logits.
    """

    logits: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        logits = _frozen_f64(self.logits, "logits", ndim=1)
        weights = _frozen_f64(self.weights, "weights", ndim=1)
        if logits.shape != weights.shape:
            raise ConfigurationError("logits and weights must have the same length")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "weights", weights)

    @property
    def length(self) -> int:
        return self.logits.shape[0]


@dataclass(frozen=True)
class TopKSet:
    """Canonical token selection: distinct ascending indices plus the requested budget.

    The constructing operation guarantees len(indices) == min(budget, N) for
    the cache it was drawn from; the constructor enforces the canonical form.
    """

    indices: tuple[int, ...]
    budget: int

    def __post_init__(self) -> None:
        indices = tuple(int(i) for i in self.indices)
        if self.budget < 1:
            raise InvalidInputError(f"budget must be >= 1, got {self.budget}")
        if len(indices) == 0:
            raise InvalidSelectionError("selection must contain at least one index")
        if any(i < 0 for i in indices):
            raise InvalidSelectionError("token indices must be non-negative")
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise InvalidSelectionError("token indices must be strictly ascending")
        if len(indices) > self.budget:
            raise InvalidSelectionError(
                f"selection holds {len(indices)} indices but budget is {self.budget}"
            )
        object.__setattr__(self, "indices", indices)

    @property
    def size(self) -> int:
        return len(self.indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)


@dataclass(frozen=True)
class BlockSet:
    """Canonical block selection: distinct ascending block indices and the block width."""

    block_indices: tuple[int, ...]
    block_size: int

    def __post_init__(self) -> None:
        blocks = tuple(int(b) for b in self.block_indices)
        if self.block_size < 1:
            raise InvalidInputError(f"block_size must be >= 1, got {self.block_size}")
        if len(blocks) == 0:
            raise InvalidSelectionError("block selection must contain at least one block")
        if any(b < 0 for b in blocks):
            raise InvalidSelectionError("block indices must be non-negative")
        if any(b2 <= b1 for b1, b2 in zip(blocks, blocks[1:])):
            raise InvalidSelectionError("block indices must be strictly ascending")
        object.__setattr__(self, "block_indices", blocks)

    @property
    def size(self) -> int:
        return len(self.block_indices)

    def token_coverage(self, n: int) -> np.ndarray:
        """Ascending token indices covered by the selected blocks in a length-n cache.

        The final block may be narrower than block_size when block_size does
        not divide n.
        """
        if n < 1:
            raise InvalidInputError(f"cache length must be >= 1, got {n}")
        spans = []
        for b in self.block_indices:
            start = b * self.block_size
            if start >= n:
                raise InvalidSelectionError(
                    f"block {b} starts at token {start}, beyond cache length {n}"
                )
            spans.append(np.arange(start, min(start + self.block_size, n), dtype=np.int64))
        return np.concatenate(spans)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over a 1-D logit vector.

    Subtracts the maximum before exponentiation, so the result is invariant
    (to tight float tolerance) under adding a constant to every logit.
    """
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max()
    exps = np.exp(shifted)
    return exps / exps.sum()


def _check_query(q, cache: LayerKvCache) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1:
        raise ConfigurationError(f"query must be 1-D, got shape {q.shape}")
    if q.shape[0] != cache.head_dim:
        raise ConfigurationError(
            f"query width {q.shape[0]} does not match cache width {cache.head_dim}"
        )
    if not np.all(np.isfinite(q)):
        raise NumericInputError("query contains non-finite entries")
    return q


def full_attention(q, cache: LayerKvCache) -> tuple[np.ndarray, AttentionScores]:
    """Exact attention of one query against every cached token.

    Args:
        q: query vector of width cache.head_dim.
        cache: the layer's key/value cache.

    Returns:
        (output, scores) where output = weights @ cache.values and scores
        carries both the scaled logits and the softmax weights over all N
        tokens.
    """
    q = _check_query(q, cache)
    logits = cache.keys @ q / math.sqrt(cache.head_dim)
    weights = softmax(logits)
    output = weights @ cache.values
    return output, AttentionScores(logits=logits, weights=weights)


def _subset_attention(
    q: np.ndarray, cache: LayerKvCache, idx: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Attention restricted to the given rows; softmax renormalizes over the subset.

    Computes only len(idx) dot products, never a score over all N tokens.
    Returns (output, subset_logits, subset_weights).
    """
    sub_keys = cache.keys[idx]
    sub_values = cache.values[idx]
    logits = sub_keys @ q / math.sqrt(cache.head_dim)
    weights = softmax(logits)
    return weights @ sub_values, logits, weights


def sparse_attention(q, cache: LayerKvCache, selection: TopKSet) -> np.ndarray:
    """Attention restricted to the selected tokens, renormalized over the subset.

    With a selection covering every cached token this matches full_attention
    bit for bit, because the same dot products and the same softmax are
    evaluated in the same order.

    Raises:
        InvalidSelectionError: if any selected index falls outside the cache.
    """
    q = _check_query(q, cache)
    idx = selection.as_array()
    if idx[-1] >= cache.length:
        raise InvalidSelectionError(
            f"selection index {int(idx[-1])} is out of range for cache length {cache.length}"
        )
    output, _, _ = _subset_attention(q, cache, idx)
    return output


def topk_of_logits(logits: np.ndarray, budget: int) -> tuple[int, ...]:
    """Indices of the min(budget, N) highest logits, ties won by the lower index.

    Returned in ascending order, the canonical set form.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if budget < 1:
        raise InvalidInputError(f"budget must be >= 1, got {budget}")
    take = min(budget, logits.shape[0])
    # Stable sort on the negated logits keeps equal scores in index order.
    order = np.argsort(-logits, kind="stable")[:take]
    return tuple(int(i) for i in np.sort(order))


def topk_indices(scores: AttentionScores, budget: int) -> TopKSet:
    """Select the top-budget tokens from full-attention scores.

    Deterministic and permutation-consistent for distinct logits: permuting
    the cache rows and mapping the result back yields the same set.
    """
    return TopKSet(indices=topk_of_logits(scores.logits, budget), budget=budget)


def block_max_of_logits(logits: np.ndarray, block_size: int) -> np.ndarray:
    """Max-pool a logit vector into ceil(N / block_size) per-block scores."""
    logits = np.asarray(logits, dtype=np.float64)
    if block_size < 1:
        raise InvalidInputError(f"block_size must be >= 1, got {block_size}")
    if logits.shape[0] == 0:
        raise InvalidInputError("cannot pool an empty logit vector")
    starts = np.arange(0, logits.shape[0], block_size)
    return np.maximum.reduceat(logits, starts)


def block_aggregate_scores(scores: AttentionScores, block_size: int) -> np.ndarray:
    """Per-block scores for block-level selection: the max logit within each block.

    The max is the representative statistic, so a block containing a strong
    token can never be masked by weak neighbours. block_size = 1 reduces to
    the raw logits.
    """
    return block_max_of_logits(scores.logits, block_size)


def topk_blocks(block_scores: np.ndarray, block_budget: int, block_size: int) -> BlockSet:
    """Select the top-block_budget blocks; same ordering and tie rule as topk_of_logits."""
    return BlockSet(
        block_indices=topk_of_logits(block_scores, block_budget),
        block_size=block_size,
    )
