import json
import math
import os

import numpy as np
import pytest

from layerreuse import (
    InvalidInputError,
    LayerSensitivity,
    SensitivityReport,
    SynthModelConfig,
    build_similarity_matrix,
    cost_model,
    dp_optimize,
    generate_model,
    hybrid_decode,
    read_cost_report,
    read_json,
    read_policy,
    read_run_result,
    read_sensitivity_report,
    read_similarity_matrix,
    read_trace,
    run_full_trace,
    similarity_matrix_csv_rows,
    static_jump_policy,
    write_cost_report,
    write_policy,
    write_run_result,
    write_sensitivity_report,
    write_similarity_matrix,
    write_trace,
)
from conftest import random_similarity_matrix

CFG = SynthModelConfig(layers=4, head_dim=16, context_len=40, seed=9,
                       inter_layer_correlation=0.7, heads=2)


@pytest.fixture(scope="module")
def trace():
    return run_full_trace(generate_model(CFG), 3, 8, 4)


def test_trace_round_trip(tmp_path, trace):
    path = str(tmp_path / "trace.json")
    write_trace(trace, path)
    assert os.path.exists(tmp_path / "trace.queries.bin")
    assert os.path.exists(tmp_path / "trace.outputs.bin")
    back = read_trace(path)
    assert back.config == trace.config
    assert back.budget == trace.budget
    assert back.block_size == trace.block_size
    assert np.array_equal(back.queries, trace.queries)
    assert np.array_equal(back.outputs, trace.outputs)
    assert back.topk == trace.topk
    assert back.blocks == trace.blocks


def test_trace_rewrite_is_byte_identical(tmp_path, trace):
    # The JSON embeds the sidecar names, so identity holds per path.
    path = str(tmp_path / "a.json")
    write_trace(trace, path)
    first = open(path, "rb").read()
    first_queries = open(tmp_path / "a.queries.bin", "rb").read()
    write_trace(trace, path)
    assert open(path, "rb").read() == first
    assert open(tmp_path / "a.queries.bin", "rb").read() == first_queries


def test_trace_sidecar_length_is_checked(tmp_path, trace):
    path = str(tmp_path / "trace.json")
    write_trace(trace, path)
    raw = open(tmp_path / "trace.queries.bin", "rb").read()
    open(tmp_path / "trace.queries.bin", "wb").write(raw[:-8])
    with pytest.raises(InvalidInputError):
        read_trace(path)


def test_trace_rejects_empty_steps(tmp_path, trace):
    path = str(tmp_path / "trace.json")
    write_trace(trace, path)
    doc = read_json(path)
    doc["steps"] = []
    open(path, "w").write(json.dumps(doc))
    with pytest.raises(InvalidInputError):
        read_trace(path)


def test_version_and_kind_rejection(tmp_path, trace):
    path = str(tmp_path / "trace.json")
    write_trace(trace, path)

    doc = read_json(path)
    doc["version"] = "2.0"
    open(path, "w").write(json.dumps(doc))
    with pytest.raises(InvalidInputError):
        read_trace(path)

    # minor bumps within the same major are accepted
    doc["version"] = "1.7"
    open(path, "w").write(json.dumps(doc))
    read_trace(path)

    doc["kind"] = "similarity-matrix"
    open(path, "w").write(json.dumps(doc))
    with pytest.raises(InvalidInputError):
        read_trace(path)


def test_similarity_matrix_round_trip(tmp_path):
    m = random_similarity_matrix(np.random.default_rng(4), 6)
    path = str(tmp_path / "matrix.json")
    write_similarity_matrix(m, path)
    back = read_similarity_matrix(path)
    assert np.array_equal(back.values, m.values)
    assert back.budget == m.budget
    assert back.sha256() == m.sha256()
    write_similarity_matrix(back, str(tmp_path / "again.json"))
    assert open(path, "rb").read() == open(tmp_path / "again.json", "rb").read()


def test_similarity_matrix_csv_rows():
    m = random_similarity_matrix(np.random.default_rng(4), 5)
    rows = similarity_matrix_csv_rows(m)
    assert len(rows) == 5 * 6 // 2
    assert rows[0] == (0, 0, 1.0)
    for j, i, v in rows:
        assert i <= j
        assert v == m.values[j, i]


def test_sensitivity_round_trip_with_nan(tmp_path):
    report = SensitivityReport(
        budget=8, step=2,
        layers=(
            LayerSensitivity(rnmse=0.25, kl=1.5),
            LayerSensitivity(rnmse=math.nan, kl=0.0),
        ),
    )
    path = str(tmp_path / "sens.json")
    write_sensitivity_report(report, path)
    assert b"NaN" not in open(path, "rb").read()  # encoded as null, valid JSON
    back = read_sensitivity_report(path)
    assert back.budget == 8 and back.step == 2
    assert back.layers[0] == report.layers[0]
    assert math.isnan(back.layers[1].rnmse)
    assert back.layers[1].kl == 0.0


def test_policy_round_trip(tmp_path):
    m = random_similarity_matrix(np.random.default_rng(12), 7)
    policy = dp_optimize(m, 0.45)
    path = str(tmp_path / "policy.json")
    write_policy(policy, path)
    doc = read_json(path)
    # Full layers serialize their source as null
    for j, src in enumerate(doc["sources"]):
        if doc["actions"][j] == "full":
            assert src is None
        else:
            assert isinstance(src, int)
    back = read_policy(path)
    assert back == policy


def test_policy_without_theta_round_trips(tmp_path):
    policy = static_jump_policy(6, 2)
    path = str(tmp_path / "jump.json")
    write_policy(policy, path)
    back = read_policy(path)
    assert back == policy
    assert back.theta is None and back.matrix_hash is None


def test_run_result_document(tmp_path):
    model = generate_model(CFG)
    trace = run_full_trace(model, 2, 8)
    policy = dp_optimize(build_similarity_matrix(trace), 0.5)
    run = hybrid_decode(model, policy, 8, 2)
    path = str(tmp_path / "run.json")
    write_run_result(run, path, manifest_hash="cafe")
    doc = read_run_result(path)
    assert doc["kind"] == "decode-run"
    assert doc["manifest"] == "cafe"
    assert doc["theta"] == 0.5
    assert doc["policyHash"] == policy.sha256()
    assert doc["budget"] == 8 and doc["blockSize"] == 1 and doc["steps"] == 2
    counters = doc["counters"]
    assert counters["fullLayers"] == policy.full_count
    assert counters["reuseLayers"] == CFG.layers - policy.full_count
    assert counters["fullScoreComputationsPerStep"] == [policy.full_count] * 2
    assert counters["reuseFullScans"] == 0
    assert len(counters["reuseGatheredRows"]) == 2
    fid = doc["fidelity"]
    assert fid["aggregateRnmse"] == run.fidelity.aggregate
    assert fid["perLayerRnmse"] == list(run.fidelity.per_layer)
    assert len(fid["perStepLayerRnmse"]) == 2


def test_cost_report_round_trip(tmp_path):
    report = cost_model(static_jump_policy(8, 3), 2048, 128, head_dim=64)
    path = str(tmp_path / "cost.json")
    write_cost_report(report, path, contextLen=2048, budget=128)
    doc = read_cost_report(path)
    assert doc["kind"] == "cost-report"
    assert doc["contextLen"] == 2048 and doc["budget"] == 128
    assert doc["kvBytesFull"] == report.kv_bytes_full
    assert doc["kvBytesHybrid"] == report.kv_bytes_hybrid
    assert doc["bytesRatio"] == report.bytes_ratio
    assert doc["predictedSpeedup"] == report.predicted_speedup
    assert doc["tokensCovered"] == report.tokens_covered


def test_manifest_hash_is_embedded(tmp_path):
    m = random_similarity_matrix(np.random.default_rng(2), 4)
    path = str(tmp_path / "m.json")
    write_similarity_matrix(m, path, manifest_hash="deadbeef")
    doc = read_json(path)
    assert doc["manifest"] == "deadbeef"
    # the embedded manifest hash does not disturb reading
    back = read_similarity_matrix(path)
    assert back.sha256() == m.sha256()


def test_canonical_json_is_sorted_and_compact(tmp_path):
    m = random_similarity_matrix(np.random.default_rng(2), 3)
    path = str(tmp_path / "m.json")
    write_similarity_matrix(m, path)
    raw = open(path, "rb").read()
    assert raw.endswith(b"\n")
    assert b": " not in raw and b", " not in raw
    doc = json.loads(raw)
    assert list(doc.keys()) == sorted(doc.keys())
