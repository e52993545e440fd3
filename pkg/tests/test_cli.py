import csv
import json
import os

import pytest

from layerreuse import read_json, read_policy, read_trace
from layerreuse._canon import payload_hash
from layerreuse.cli import main

MODEL_FLAGS = ["--layers", "5", "--ctx", "24", "--head-dim", "8",
               "--rho", "0.9", "--seed", "17"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full CLI pipeline in a shared directory."""
    root = tmp_path_factory.mktemp("pipeline")
    trace = str(root / "trace.json")
    matrix = str(root / "similarity.json")
    sens = str(root / "sensitivity.json")
    policy = str(root / "policy.json")
    run = str(root / "run.json")
    bench = str(root / "bench.csv")
    assert main(["gen-traces", *MODEL_FLAGS, "--steps", "2", "--k", "6",
                 "--out", trace]) == 0
    assert main(["profile", "--trace", trace, "--out-matrix", matrix,
                 "--out-sensitivity", sens]) == 0
    assert main(["plan", "--matrix", matrix, "--theta", "0.5",
                 "--out", policy]) == 0
    assert main(["decode", *MODEL_FLAGS, "--policy", policy, "--budget", "6",
                 "--steps", "2", "--out", run]) == 0
    assert main(["bench", "--policy", policy,
                 "--lengths", "8192,16384,30720,61440", "--budget", "256",
                 "--out", bench]) == 0
    return root


def test_pipeline_artifacts_exist(pipeline):
    for name in ("trace.json", "trace.queries.bin", "trace.outputs.bin",
                 "similarity.json", "sensitivity.json", "policy.json",
                 "run.json", "bench.csv"):
        assert (pipeline / name).exists()
    for name in ("trace.json", "similarity.json", "policy.json", "run.json",
                 "bench.csv"):
        assert (pipeline / f"{name}.manifest.json").exists()


def test_manifest_hash_matches_embedded(pipeline):
    manifest = read_json(str(pipeline / "policy.json.manifest.json"))
    wall = manifest.pop("wallTimeSeconds")
    assert wall >= 0.0
    assert read_json(str(pipeline / "policy.json"))["manifest"] == payload_hash(manifest)
    assert manifest["kind"] == "run-manifest"
    assert manifest["command"] == "plan"
    assert manifest["inputs"] == [str(pipeline / "similarity.json")]


def test_gen_traces_applies_flags_and_defaults(pipeline):
    trace = read_trace(str(pipeline / "trace.json"))
    assert trace.config.layers == 5
    assert trace.config.context_len == 24
    assert trace.config.seed == 17
    assert trace.config.heads == 1  # untouched default
    assert trace.budget == 6
    assert trace.steps == 2


def test_rerun_is_byte_identical(pipeline, tmp_path):
    # Re-running with identical arguments (paths included, since the manifest
    # hash covers them) overwrites every artifact with the same bytes.
    trace = str(pipeline / "trace.json")
    before = {
        name: open(pipeline / name, "rb").read()
        for name in ("trace.json", "trace.queries.bin", "similarity.json")
    }
    assert main(["gen-traces", *MODEL_FLAGS, "--steps", "2", "--k", "6",
                 "--out", trace]) == 0
    assert main(["profile", "--trace", trace,
                 "--out-matrix", str(pipeline / "similarity.json"),
                 "--out-sensitivity", str(pipeline / "sensitivity.json")]) == 0
    for name, raw in before.items():
        assert open(pipeline / name, "rb").read() == raw

    # A different output path changes only the embedded manifest hash.
    matrix2 = str(tmp_path / "similarity.json")
    assert main(["profile", "--trace", trace, "--out-matrix", matrix2,
                 "--out-sensitivity", str(tmp_path / "sensitivity.json")]) == 0
    a = read_json(matrix2)
    b = read_json(str(pipeline / "similarity.json"))
    assert a.pop("manifest") != b.pop("manifest")
    assert a == b


def test_default_seed_is_zero(tmp_path):
    out = str(tmp_path / "t.json")
    assert main(["gen-traces", "--layers", "2", "--ctx", "8", "--head-dim", "4",
                 "--steps", "1", "--k", "2", "--out", out]) == 0
    assert read_trace(out).config.seed == 0


def test_config_file_and_flag_precedence(tmp_path):
    cfg_path = str(tmp_path / "config.json")
    json.dump({"layers": 3, "seed": 7, "contextLen": 16, "headDim": 4},
              open(cfg_path, "w"))
    out = str(tmp_path / "t.json")
    assert main(["gen-traces", "--config", cfg_path, "--seed", "3",
                 "--steps", "1", "--k", "2", "--out", out]) == 0
    trace = read_trace(out)
    assert trace.config.layers == 3  # from the config file
    assert trace.config.seed == 3  # the flag wins


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    cfg_path = str(tmp_path / "config.json")
    json.dump({"layer_count": 3}, open(cfg_path, "w"))
    code = main(["gen-traces", "--config", cfg_path,
                 "--out", str(tmp_path / "t.json")])
    assert code == 2
    assert "layer_count" in capsys.readouterr().err


def test_out_dir_env_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("LAYERREUSE_OUT_DIR", str(tmp_path / "outputs"))
    os.makedirs(tmp_path / "outputs")
    assert main(["gen-traces", "--layers", "2", "--ctx", "8", "--head-dim", "4",
                 "--steps", "1", "--k", "2"]) == 0
    assert (tmp_path / "outputs" / "trace.json").exists()


# --- exit codes ---


def test_invalid_rho_exits_2(tmp_path, capsys):
    code = main(["gen-traces", "--rho", "1.5", "--out", str(tmp_path / "t.json")])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_corrupt_json_exits_2(tmp_path, capsys):
    bad = str(tmp_path / "bad.json")
    open(bad, "w").write("{not json")
    assert main(["profile", "--trace", bad]) == 2


def test_missing_file_exits_3(tmp_path, capsys):
    assert main(["profile", "--trace", str(tmp_path / "nope.json")]) == 3
    assert "io error:" in capsys.readouterr().err


def test_wrong_artifact_kind_exits_2(pipeline, capsys):
    assert main(["plan", "--matrix", str(pipeline / "trace.json"),
                 "--theta", "0.5", "--out", "/tmp/unused.json"]) == 2


def test_empty_lengths_exits_2(pipeline, tmp_path, capsys):
    code = main(["bench", "--policy", str(pipeline / "policy.json"),
                 "--lengths", ",", "--out", str(tmp_path / "b.csv")])
    assert code == 2


def test_bad_theta_exits_2(pipeline, tmp_path):
    assert main(["plan", "--matrix", str(pipeline / "similarity.json"),
                 "--theta", "1.5", "--out", str(tmp_path / "p.json")]) == 2


def test_half_specified_block_mode_exits_2(pipeline, tmp_path):
    args = ["decode", *MODEL_FLAGS, "--policy", str(pipeline / "policy.json"),
            "--steps", "1", "--out", str(tmp_path / "r.json")]
    assert main([*args, "--block-budget", "2"]) == 2  # block-size still 1
    assert main([*args, "--block-size", "4"]) == 2  # budget missing
    assert main([*args, "--block-size", "4", "--block-budget", "2"]) == 0


def test_token_mode_without_budget_exits_2(pipeline, tmp_path):
    assert main(["decode", *MODEL_FLAGS, "--policy",
                 str(pipeline / "policy.json"), "--steps", "1",
                 "--out", str(tmp_path / "r.json")]) == 2


# --- behavior details ---


def test_plan_theta_extremes(tmp_path):
    # Needs a mid-rho model so overlaps sit strictly between 0 and 1.
    trace = str(tmp_path / "trace.json")
    matrix = str(tmp_path / "similarity.json")
    assert main(["gen-traces", "--layers", "5", "--ctx", "32", "--head-dim", "8",
                 "--rho", "0.4", "--seed", "2", "--steps", "2", "--k", "6",
                 "--out", trace]) == 0
    assert main(["profile", "--trace", trace, "--out-matrix", matrix,
                 "--out-sensitivity", str(tmp_path / "s.json")]) == 0
    low = str(tmp_path / "low.json")
    high = str(tmp_path / "high.json")
    assert main(["plan", "--matrix", matrix, "--theta", "0.0", "--out", low]) == 0
    assert main(["plan", "--matrix", matrix, "--theta", "1.0", "--out", high]) == 0
    assert read_policy(low).full_count == 1
    assert read_policy(high).full_count == 5


def test_decode_clamp_warning(pipeline, tmp_path, capsys):
    code = main(["decode", *MODEL_FLAGS, "--policy", str(pipeline / "policy.json"),
                 "--budget", "999", "--steps", "1",
                 "--out", str(tmp_path / "r.json")])
    assert code == 0
    assert "clamping" in capsys.readouterr().err


def test_bench_csv_speedup_grows_with_context(pipeline):
    with open(pipeline / "bench.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["contextLen"]) for r in rows] == [8192, 16384, 30720, 61440]
    speedups = [float(r["predictedSpeedup"]) for r in rows]
    assert all(b > a for a, b in zip(speedups, speedups[1:]))
    assert len({r["manifest"] for r in rows}) == 1


def test_report_heatmap_and_policies(pipeline, tmp_path):
    out_dir = str(tmp_path / "report")
    assert main(["report", str(pipeline / "similarity.json"),
                 str(pipeline / "policy.json"), "--out-dir", out_dir]) == 0
    with open(os.path.join(out_dir, "similarity.heatmap.csv"), newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["target", "source", "overlap"]
    assert len(rows) == 1 + 5 * 6 // 2
    text = open(os.path.join(out_dir, "policies.md")).read()
    assert "policy.json" in text
    assert "| policy | layers | theta | fullCount | cumSimilarity |" in text


def test_report_theta_sweep(pipeline, tmp_path):
    out_dir = str(tmp_path / "sweep")
    runs = []
    for theta in ("0.3", "0.7"):
        pol = str(tmp_path / f"p{theta}.json")
        run = str(tmp_path / f"r{theta}.json")
        assert main(["plan", "--matrix", str(pipeline / "similarity.json"),
                     "--theta", theta, "--out", pol]) == 0
        assert main(["decode", *MODEL_FLAGS, "--policy", pol, "--budget", "6",
                     "--steps", "1", "--out", run]) == 0
        runs.append(run)
    assert main(["report", *runs, "--out-dir", out_dir]) == 0
    with open(os.path.join(out_dir, "theta_sweep.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["theta"]) for r in rows] == [0.3, 0.7]
    for run in runs:
        stem = os.path.splitext(os.path.basename(run))[0]
        assert os.path.exists(os.path.join(out_dir, f"{stem}.rnmse.csv"))


def test_report_rejects_unknown_kind(pipeline, tmp_path, capsys):
    assert main(["report", str(pipeline / "sensitivity.json"),
                 "--out-dir", str(tmp_path)]) == 2
    assert "unsupported artifact kind" in capsys.readouterr().err
