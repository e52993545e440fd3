"""Command-line pipeline: generate traces, profile, plan, decode, bench, report.

Every command writes a run manifest next to its primary output and embeds the
manifest hash in each artifact. The hash covers the command, the effective
config, input and output paths, seed, and tool version, but not wall time, so
re-running a command on identical inputs produces byte-identical artifacts.

Exit codes: 0 success, 2 validation error (bad flag or file content), 3 I/O
error, 4 internal invariant violation.

Option values win over config-file values, which win over built-in defaults.
The config file is JSON with the same camelCase keys the artifacts use. The
LAYERREUSE_OUT_DIR environment variable sets the default output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

from . import __version__
from ._canon import FORMAT_VERSION, payload_hash
from .engine import cost_model, hybrid_decode, hybrid_decode_blocks
from .errors import InvalidInputError, LayerReuseError
from .formats import (
    config_from_payload,
    config_payload,
    read_json,
    read_policy,
    read_run_result,
    read_similarity_matrix,
    read_trace,
    similarity_matrix_csv_rows,
    write_policy,
    write_run_result,
    write_sensitivity_report,
    write_similarity_matrix,
    write_trace,
)
from .policy import dp_optimize
from .profiling import build_similarity_matrix, sensitivity_profile
from .synthetic import SynthModelConfig, generate_model, run_full_trace

_MODEL_FLAGS = [
    # (flag, config key, type)
    ("layers", "layers", int),
    ("head_dim", "headDim", int),
    ("ctx", "contextLen", int),
    ("seed", "seed", int),
    ("rho", "interLayerCorrelation", float),
    ("heads", "heads", int),
]

_MODEL_DEFAULTS = {
    "layers": 10,
    "headDim": 32,
    "contextLen": 128,
    "seed": 0,
    "interLayerCorrelation": 0.5,
    "heads": 1,
}


def _out_dir(args) -> str:
    if getattr(args, "out_dir", None):
        return args.out_dir
    return os.environ.get("LAYERREUSE_OUT_DIR", ".")


def _resolve(args, flag_value: str | None, default_name: str) -> str:
    path = flag_value if flag_value else os.path.join(_out_dir(args), default_name)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def _effective_model_config(args) -> tuple[SynthModelConfig, dict]:
    """Merge defaults, config file, and explicit flags into a model config."""
    merged = dict(_MODEL_DEFAULTS)
    if getattr(args, "config", None):
        doc = read_json(args.config)
        if not isinstance(doc, dict):
            raise InvalidInputError("config file must hold a JSON object")
        unknown = set(doc) - set(_MODEL_DEFAULTS)
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        merged.update(doc)
    for flag, key, _ in _MODEL_FLAGS:
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    return config_from_payload(merged), merged


class _Manifest:
    """Collects one command's provenance and writes it next to the primary output."""

    def __init__(self, command: str, config: dict, seed: int | None) -> None:
        self.command = command
        self.config = config
        self.seed = seed
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self._started = time.monotonic()

    def payload(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "kind": "run-manifest",
            "command": self.command,
            "config": self.config,
            "inputs": sorted(self.inputs),
            "outputs": sorted(self.outputs),
            "seed": self.seed,
            "toolVersion": __version__,
        }

    def hash(self) -> str:
        # Wall time is excluded so identical runs hash identically.
        return payload_hash(self.payload())

    def write(self, primary_output: str) -> None:
        doc = self.payload()
        doc["wallTimeSeconds"] = time.monotonic() - self._started
        path = primary_output + ".manifest.json"
        with open(path, "w", encoding="ascii") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")


def _cmd_gen_traces(args) -> int:
    config, merged = _effective_model_config(args)
    if args.k < 1:
        raise InvalidInputError(f"--k must be >= 1, got {args.k}")
    out = _resolve(args, args.out, "trace.json")
    manifest = _Manifest(
        "gen-traces",
        {**merged, "steps": args.steps, "k": args.k, "blockSize": args.block_size},
        config.seed,
    )
    manifest.outputs.append(out)
    model = generate_model(config)
    trace = run_full_trace(model, args.steps, args.k, args.block_size)
    write_trace(trace, out, manifest.hash())
    manifest.write(out)
    print(f"wrote {out}")
    return 0


def _cmd_profile(args) -> int:
    trace = read_trace(args.trace)
    out_matrix = _resolve(args, args.out_matrix, "similarity.json")
    out_sens = _resolve(args, args.out_sensitivity, "sensitivity.json")
    manifest = _Manifest(
        "profile",
        {"trace": args.trace, "step": args.step, **config_payload(trace.config)},
        trace.config.seed,
    )
    manifest.inputs.append(args.trace)
    manifest.outputs.extend([out_matrix, out_sens])
    matrix = build_similarity_matrix(trace)
    model = generate_model(trace.config)
    report = sensitivity_profile(model, args.step, trace.budget)
    write_similarity_matrix(matrix, out_matrix, manifest.hash())
    write_sensitivity_report(report, out_sens, manifest.hash())
    manifest.write(out_matrix)
    print(f"wrote {out_matrix} and {out_sens}")
    return 0


def _cmd_plan(args) -> int:
    matrix = read_similarity_matrix(args.matrix)
    out = _resolve(args, args.out, "policy.json")
    manifest = _Manifest("plan", {"matrix": args.matrix, "theta": args.theta}, None)
    manifest.inputs.append(args.matrix)
    manifest.outputs.append(out)
    policy = dp_optimize(matrix, args.theta)
    write_policy(policy, out, manifest.hash())
    manifest.write(out)
    print(
        f"wrote {out}: fullCount={policy.full_count} cumSimilarity={policy.cum_similarity:.6f}"
    )
    return 0


def _cmd_decode(args) -> int:
    config, merged = _effective_model_config(args)
    policy = read_policy(args.policy)
    if (args.block_size == 1) != (args.block_budget is None):
        raise InvalidInputError(
            "block mode needs both --block-size > 1 and --block-budget; token mode neither"
        )
    out = _resolve(args, args.out, "run.json")
    manifest = _Manifest(
        "decode",
        {
            **merged,
            "policy": args.policy,
            "budget": args.budget,
            "steps": args.steps,
            "blockSize": args.block_size,
            "blockBudget": args.block_budget,
            "includeSinks": args.include_sinks,
            "includeRecent": args.include_recent,
        },
        config.seed,
    )
    manifest.inputs.append(args.policy)
    manifest.outputs.append(out)
    model = generate_model(config)
    if args.block_size > 1:
        result = hybrid_decode_blocks(model, policy, args.block_budget, args.block_size, args.steps)
    else:
        if args.budget is None:
            raise InvalidInputError("token mode requires --budget")
        if args.budget > config.context_len:
            print(
                f"warning: budget {args.budget} exceeds context length "
                f"{config.context_len}; clamping per step",
                file=sys.stderr,
            )
        result = hybrid_decode(
            model,
            policy,
            args.budget,
            args.steps,
            include_sinks=args.include_sinks,
            include_recent=args.include_recent,
        )
    write_run_result(result, out, manifest.hash())
    manifest.write(out)
    print(f"wrote {out}: aggregate rnmse {result.fidelity.aggregate:.3e}")
    return 0


def _cmd_bench(args) -> int:
    policy = read_policy(args.policy)
    lengths = [part for part in args.lengths.split(",") if part.strip()]
    if not lengths:
        raise InvalidInputError("--lengths must name at least one context length")
    parsed = [int(part) for part in lengths]
    out = _resolve(args, args.out, "bench.csv")
    manifest = _Manifest(
        "bench",
        {
            "policy": args.policy,
            "lengths": parsed,
            "budget": args.budget,
            "blockSize": args.block_size,
            "bytesPerElem": args.bytes_per_elem,
            "headDim": args.head_dim,
            "linkBandwidth": args.link_bandwidth,
            "hbmBandwidth": args.hbm_bandwidth,
        },
        None,
    )
    manifest.inputs.append(args.policy)
    manifest.outputs.append(out)
    rows = []
    for n in parsed:
        report = cost_model(
            policy,
            n,
            args.budget,
            block_size=args.block_size,
            bytes_per_elem=args.bytes_per_elem,
            head_dim=args.head_dim,
            link_bandwidth=args.link_bandwidth,
            hbm_bandwidth=args.hbm_bandwidth,
        )
        rows.append((n, report.bytes_ratio, report.predicted_speedup))
    with open(out, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["contextLen", "bytesRatio", "predictedSpeedup", "manifest"])
        for n, ratio, speedup in rows:
            writer.writerow([n, f"{ratio:.12g}", f"{speedup:.12g}", manifest.hash()])
    manifest.write(out)
    print(f"wrote {out}")
    return 0


def _cmd_report(args) -> int:
    out_dir = _out_dir(args)
    os.makedirs(out_dir, exist_ok=True)
    manifest = _Manifest("report", {"artifacts": list(args.artifacts)}, None)
    manifest.inputs.extend(args.artifacts)
    policies = []
    runs = []
    written = []
    for path in args.artifacts:
        doc = read_json(path)
        kind = doc.get("kind")
        stem = os.path.splitext(os.path.basename(path))[0]
        if kind == "similarity-matrix":
            matrix = read_similarity_matrix(path)
            out = os.path.join(out_dir, f"{stem}.heatmap.csv")
            with open(out, "w", newline="", encoding="ascii") as fh:
                writer = csv.writer(fh)
                writer.writerow(["target", "source", "overlap"])
                for j, i, value in similarity_matrix_csv_rows(matrix):
                    writer.writerow([j, i, f"{value:.12g}"])
            written.append(out)
        elif kind == "layer-policy":
            policies.append((path, read_policy(path)))
        elif kind == "decode-run":
            doc = read_run_result(path)
            out = os.path.join(out_dir, f"{stem}.rnmse.csv")
            with open(out, "w", newline="", encoding="ascii") as fh:
                writer = csv.writer(fh)
                writer.writerow(["layer", "rnmse"])
                for l, value in enumerate(doc["fidelity"]["perLayerRnmse"]):
                    writer.writerow([l, "" if value is None else f"{value:.12g}"])
            written.append(out)
            runs.append((path, doc))
        else:
            raise InvalidInputError(f"{path}: unsupported artifact kind {kind!r}")
    if policies:
        out = os.path.join(out_dir, "policies.md")
        with open(out, "w", encoding="ascii") as fh:
            fh.write("| policy | layers | theta | fullCount | cumSimilarity |\n")
            fh.write("| --- | --- | --- | --- | --- |\n")
            for path, pol in policies:
                theta = "n/a" if pol.theta is None else f"{pol.theta:.4g}"
                cum = "n/a" if pol.cum_similarity is None else f"{pol.cum_similarity:.6g}"
                fh.write(
                    f"| {os.path.basename(path)} | {pol.num_layers} | {theta} "
                    f"| {pol.full_count} | {cum} |\n"
                )
        written.append(out)
    if len(runs) > 1:
        out = os.path.join(out_dir, "theta_sweep.csv")
        rows = sorted(
            (doc.get("theta"), doc["fidelity"]["aggregateRnmse"], os.path.basename(path))
            for path, doc in runs
            if doc.get("theta") is not None
        )
        with open(out, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            writer.writerow(["theta", "aggregateRnmse", "run"])
            for theta, rnmse, name in rows:
                writer.writerow([f"{theta:.12g}", f"{rnmse:.12g}", name])
        written.append(out)
    if not written:
        raise InvalidInputError("no reportable artifacts given")
    manifest.outputs.extend(written)
    manifest.write(written[0])
    for path in written:
        print(f"wrote {path}")
    return 0


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--layers", type=int, help="layer count (default 10)")
    parser.add_argument("--head-dim", type=int, help="per-head width (default 32)")
    parser.add_argument("--ctx", type=int, help="initial cache length (default 128)")
    parser.add_argument("--seed", type=int, help="model seed (default 0)")
    parser.add_argument("--rho", type=float, help="cross-layer similarity dial in [0, 1] (default 0.5)")
    parser.add_argument("--heads", type=int, help="heads per layer (default 1)")
    parser.add_argument("--config", help="JSON config file; explicit flags override it")
    parser.add_argument("--out-dir", help="output directory (default $LAYERREUSE_OUT_DIR or .)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layerreuse",
        description="Profile top-k selection overlap, plan layer policies, and decode hybrids.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-traces", help="decode with full attention and record selections")
    _add_model_flags(p)
    p.add_argument("--steps", type=int, default=4, help="decode steps (default 4)")
    p.add_argument("--k", type=int, default=32, help="token top-k budget (default 32)")
    p.add_argument("--block-size", type=int, default=1, help="block width for block sets (default 1)")
    p.add_argument("--out", help="trace path (default <out-dir>/trace.json)")
    p.set_defaults(handler=_cmd_gen_traces)

    p = sub.add_parser("profile", help="build the similarity matrix and sensitivity report")
    p.add_argument("--trace", required=True, help="trace written by gen-traces")
    p.add_argument("--step", type=int, default=0, help="decode step to probe (default 0)")
    p.add_argument("--out-matrix", help="matrix path (default <out-dir>/similarity.json)")
    p.add_argument("--out-sensitivity", help="report path (default <out-dir>/sensitivity.json)")
    p.add_argument("--out-dir", help="output directory (default $LAYERREUSE_OUT_DIR or .)")
    p.set_defaults(handler=_cmd_profile)

    p = sub.add_parser("plan", help="compute the optimal layer policy for a threshold")
    p.add_argument("--matrix", required=True, help="similarity matrix written by profile")
    p.add_argument("--theta", type=float, required=True, help="reuse admission threshold in [0, 1]")
    p.add_argument("--out", help="policy path (default <out-dir>/policy.json)")
    p.add_argument("--out-dir", help="output directory (default $LAYERREUSE_OUT_DIR or .)")
    p.set_defaults(handler=_cmd_plan)

    p = sub.add_parser("decode", help="run hybrid decoding under a policy")
    _add_model_flags(p)
    p.add_argument("--policy", required=True, help="policy written by plan")
    p.add_argument("--budget", type=int, help="token budget (token mode)")
    p.add_argument("--steps", type=int, default=4, help="decode steps (default 4)")
    p.add_argument("--block-size", type=int, default=1, help="block width; > 1 switches to block mode")
    p.add_argument("--block-budget", type=int, help="blocks to keep (block mode)")
    p.add_argument("--include-sinks", type=int, default=0, help="force the first n tokens into reused selections")
    p.add_argument("--include-recent", type=int, default=0, help="force the last n tokens into reused selections")
    p.add_argument("--out", help="run result path (default <out-dir>/run.json)")
    p.set_defaults(handler=_cmd_decode)

    p = sub.add_parser("bench", help="sweep the cost model over context lengths")
    p.add_argument("--policy", required=True, help="policy file; supplies L and fullCount")
    p.add_argument("--lengths", required=True, help="comma-separated context lengths")
    p.add_argument("--budget", type=int, default=64, help="selection budget (default 64)")
    p.add_argument("--block-size", type=int, default=1)
    p.add_argument("--bytes-per-elem", type=int, default=8, help="8 for float64, 4 for float32")
    p.add_argument("--head-dim", type=int, default=64, help="total per-layer KV width")
    p.add_argument("--link-bandwidth", type=float, default=32e9, help="bytes per second")
    p.add_argument("--hbm-bandwidth", type=float, default=2e12, help="bytes per second")
    p.add_argument("--out", help="CSV path (default <out-dir>/bench.csv)")
    p.add_argument("--out-dir", help="output directory (default $LAYERREUSE_OUT_DIR or .)")
    p.set_defaults(handler=_cmd_bench)

    p = sub.add_parser("report", help="render artifacts to CSV and markdown summaries")
    p.add_argument("artifacts", nargs="+", help="matrix, policy, or run-result files")
    p.add_argument("--out-dir", help="output directory (default $LAYERREUSE_OUT_DIR or .)")
    p.set_defaults(handler=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (LayerReuseError, ValueError) as exc:
        # json.JSONDecodeError is a ValueError, so corrupt files land here.
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - internal invariant escape hatch
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
