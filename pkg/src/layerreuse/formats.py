"""Versioned JSON artifact files with binary tensor sidecars.

Every artifact is a JSON object carrying "version" and "kind"; readers
reject unknown major versions. Large tensors live next to the JSON in flat
little-endian float64 sidecar files, referenced by relative path and shape.
Writing is canonical (sorted keys, fixed separators), so identical inputs
produce byte-identical files. NaN is encoded as null.
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

from ._canon import FORMAT_VERSION, canonical_json_bytes, check_header, payload_hash
from .attention import BlockSet, TopKSet
from .engine import CostModelReport, DecodeRunResult
from .errors import InvalidInputError
from .policy import Action, LayerPolicy
from .profiling import SensitivityReport, SimilarityMatrix
from .synthetic import DecodeTrace, SynthModelConfig

__all__ = [
    "write_trace",
    "read_trace",
    "write_similarity_matrix",
    "read_similarity_matrix",
    "write_sensitivity_report",
    "read_sensitivity_report",
    "write_policy",
    "read_policy",
    "write_run_result",
    "read_run_result",
    "write_cost_report",
    "read_cost_report",
    "similarity_matrix_csv_rows",
    "read_json",
]


def _null_nan(x: float) -> float | None:
    return None if math.isnan(x) else float(x)


def _write_doc(path: str, payload: dict, manifest_hash: str | None) -> None:
    doc = dict(payload)
    if manifest_hash is not None:
        doc["manifest"] = manifest_hash
    data = canonical_json_bytes(doc) + b"\n"
    with open(path, "wb") as fh:
        fh.write(data)


def read_json(path: str) -> dict:
    with open(path, "rb") as fh:
        return json.loads(fh.read().decode("utf-8"))


def config_payload(config: SynthModelConfig) -> dict:
    return {
        "layers": config.layers,
        "headDim": config.head_dim,
        "contextLen": config.context_len,
        "seed": config.seed,
        "interLayerCorrelation": config.inter_layer_correlation,
        "heads": config.heads,
    }


def config_from_payload(doc: dict) -> SynthModelConfig:
    try:
        return SynthModelConfig(
            layers=doc["layers"],
            head_dim=doc["headDim"],
            context_len=doc["contextLen"],
            seed=doc["seed"],
            inter_layer_correlation=doc["interLayerCorrelation"],
            heads=doc["heads"],
        )
    except KeyError as exc:
        raise InvalidInputError(f"config is missing field {exc}") from exc


def _write_tensor(path: str, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_tensor(path: str, shape: list[int]) -> np.ndarray:
    expected = int(np.prod(shape)) * 8
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) != expected:
        raise InvalidInputError(
            f"sidecar {os.path.basename(path)} holds {len(raw)} bytes, expected {expected}"
        )
    arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    arr.setflags(write=False)
    return arr


def write_trace(trace: DecodeTrace, path: str, manifest_hash: str | None = None) -> None:
    """Write a decode trace: JSON document plus .queries.bin / .outputs.bin sidecars."""
    stem = path[: -len(".json")] if path.endswith(".json") else path
    queries_name = os.path.basename(stem) + ".queries.bin"
    outputs_name = os.path.basename(stem) + ".outputs.bin"
    payload = {
        "version": FORMAT_VERSION,
        "kind": "decode-trace",
        "config": config_payload(trace.config),
        "budget": trace.budget,
        "blockSize": trace.block_size,
        "steps": [
            {
                "layer": [
                    {
                        "topk": list(trace.topk[t][l].indices),
                        "blocks": list(trace.blocks[t][l].block_indices),
                    }
                    for l in range(trace.config.layers)
                ]
            }
            for t in range(trace.steps)
        ],
        "tensors": {
            "queries": {"path": queries_name, "shape": list(trace.queries.shape)},
            "outputs": {"path": outputs_name, "shape": list(trace.outputs.shape)},
        },
    }
    base = os.path.dirname(path)
    _write_tensor(os.path.join(base, queries_name), trace.queries)
    _write_tensor(os.path.join(base, outputs_name), trace.outputs)
    _write_doc(path, payload, manifest_hash)


def read_trace(path: str) -> DecodeTrace:
    doc = read_json(path)
    check_header(doc, "decode-trace")
    config = config_from_payload(doc["config"])
    base = os.path.dirname(path)
    tensors = doc["tensors"]
    queries = _read_tensor(os.path.join(base, tensors["queries"]["path"]), tensors["queries"]["shape"])
    outputs = _read_tensor(os.path.join(base, tensors["outputs"]["path"]), tensors["outputs"]["shape"])
    budget = int(doc["budget"])
    block_size = int(doc["blockSize"])
    steps = doc["steps"]
    if not isinstance(steps, list) or len(steps) < 1:
        raise InvalidInputError("trace holds no decode steps")
    topk_rows = []
    block_rows = []
    for step in steps:
        layers = step["layer"]
        if len(layers) != config.layers:
            raise InvalidInputError("trace step does not cover every layer")
        topk_rows.append(
            tuple(TopKSet(indices=tuple(entry["topk"]), budget=budget) for entry in layers)
        )
        block_rows.append(
            tuple(
                BlockSet(block_indices=tuple(entry["blocks"]), block_size=block_size)
                for entry in layers
            )
        )
    return DecodeTrace(
        config=config,
        budget=budget,
        block_size=block_size,
        queries=queries,
        outputs=outputs,
        topk=tuple(topk_rows),
        blocks=tuple(block_rows),
    )


def write_similarity_matrix(
    matrix: SimilarityMatrix, path: str, manifest_hash: str | None = None
) -> None:
    _write_doc(path, matrix.canonical_payload(), manifest_hash)


def read_similarity_matrix(path: str) -> SimilarityMatrix:
    doc = read_json(path)
    check_header(doc, "similarity-matrix")
    return SimilarityMatrix.from_flat(int(doc["L"]), int(doc["k"]), doc["entries"])


def similarity_matrix_csv_rows(matrix: SimilarityMatrix) -> list[tuple[int, int, float]]:
    """(target j, source i, overlap) rows for the lower triangle, one per pair."""
    L = matrix.num_layers
    return [(j, i, float(matrix.values[j, i])) for j in range(L) for i in range(j + 1)]


def write_sensitivity_report(
    report: SensitivityReport, path: str, manifest_hash: str | None = None
) -> None:
    payload = {
        "version": FORMAT_VERSION,
        "kind": "sensitivity-report",
        "budget": report.budget,
        "step": report.step,
        "layers": [
            {"rnmse": _null_nan(layer.rnmse), "kl": float(layer.kl)} for layer in report.layers
        ],
    }
    _write_doc(path, payload, manifest_hash)


def read_sensitivity_report(path: str) -> SensitivityReport:
    from .profiling import LayerSensitivity

    doc = read_json(path)
    check_header(doc, "sensitivity-report")
    layers = tuple(
        LayerSensitivity(
            rnmse=math.nan if entry["rnmse"] is None else float(entry["rnmse"]),
            kl=float(entry["kl"]),
        )
        for entry in doc["layers"]
    )
    return SensitivityReport(budget=int(doc["budget"]), step=int(doc["step"]), layers=layers)


def write_policy(policy: LayerPolicy, path: str, manifest_hash: str | None = None) -> None:
    _write_doc(path, policy.canonical_payload(), manifest_hash)


def read_policy(path: str) -> LayerPolicy:
    doc = read_json(path)
    check_header(doc, "layer-policy")
    actions = tuple(Action(a) for a in doc["actions"])
    sources = tuple(
        j if src is None else int(src) for j, src in enumerate(doc["sources"])
    )
    theta = doc["theta"]
    cum = doc["cumSimilarity"]
    return LayerPolicy(
        actions=actions,
        sources=sources,
        theta=None if theta is None else float(theta),
        full_count=int(doc["fullCount"]),
        cum_similarity=None if cum is None else float(cum),
        matrix_hash=doc["matrixHash"],
    )


def write_run_result(result: DecodeRunResult, path: str, manifest_hash: str | None = None) -> None:
    """Write counters, fidelity tables, and the policy hash of a hybrid run."""
    payload = {
        "version": FORMAT_VERSION,
        "kind": "decode-run",
        "theta": result.policy.theta,
        "policyHash": result.policy.sha256(),
        "budget": result.budget,
        "blockSize": result.block_size,
        "steps": result.steps,
        "counters": {
            "fullLayers": result.full_layer_count,
            "reuseLayers": result.reuse_layer_count,
            "fullScoreComputationsPerStep": list(result.full_score_computations),
            "reuseFullScans": result.reuse_full_scans,
            "reuseGatheredRows": [list(row) for row in result.reuse_gathered_rows],
        },
        "fidelity": {
            "aggregateRnmse": _null_nan(result.fidelity.aggregate),
            "perLayerRnmse": [_null_nan(x) for x in result.fidelity.per_layer],
            "perStepLayerRnmse": [
                [_null_nan(x) for x in row] for row in result.fidelity.per_step_layer
            ],
        },
    }
    _write_doc(path, payload, manifest_hash)


def read_run_result(path: str) -> dict:
    """Run results are read back as plain documents; arrays stay lists."""
    doc = read_json(path)
    check_header(doc, "decode-run")
    return doc


def write_cost_report(
    report: CostModelReport, path: str, manifest_hash: str | None = None, **context
) -> None:
    payload = {
        "version": FORMAT_VERSION,
        "kind": "cost-report",
        **{key: value for key, value in sorted(context.items())},
        "kvBytesFull": report.kv_bytes_full,
        "kvBytesHybrid": report.kv_bytes_hybrid,
        "bytesRatio": report.bytes_ratio,
        "linkBytesFull": report.link_bytes_full,
        "linkBytesOffload": report.link_bytes_offload,
        "predictedSpeedup": report.predicted_speedup,
        "tokensCovered": report.tokens_covered,
        "hbmSecondsFull": report.hbm_seconds_full,
        "hbmSecondsHybrid": report.hbm_seconds_hybrid,
        "linkSecondsFull": report.link_seconds_full,
        "linkSecondsOffload": report.link_seconds_offload,
    }
    _write_doc(path, payload, manifest_hash)


def read_cost_report(path: str) -> dict:
    doc = read_json(path)
    check_header(doc, "cost-report")
    return doc
