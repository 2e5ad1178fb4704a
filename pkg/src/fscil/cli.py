"""Command-line front end.

Subcommands: ``gen-data`` (write a synthetic benchmark as feature files
plus a manifest), ``run`` (execute the method x seed x K grid from a
config file), ``report`` (comparison table, curve CSV, and figures),
``inspect-dist`` (peek at a distribution store or feature file).

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from . import __version__
from .config import RunConfig, load_config
from .distributions import save_store
from .errors import ConfigError, DataFormatError, FscilError, NumericalError
from .prompt import PromptContext, save_prompt
from .protocol import (
    BenchmarkSpec,
    RunOutcome,
    build_summary,
    build_synthetic_benchmark,
    load_benchmark_files,
    outcome_rows,
    run_benchmark,
    write_benchmark_files,
    write_results_csv,
)
from .report import (
    load_results,
    median_curves,
    render_figures,
    render_table,
    write_curves_csv,
)


def _progress(args, message: str) -> None:
    if not args.quiet:
        print(message, file=sys.stderr)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if cfg.benchmark_kind != "synthetic":
        raise ConfigError("gen-data needs benchmark.kind = synthetic")
    out_dir = args.out or cfg.out
    if not out_dir:
        raise ConfigError("gen-data needs an output directory (--out or run.out)")
    seed = args.seed if args.seed is not None else cfg.benchmark_seed
    spec, _ = build_synthetic_benchmark(cfg.layout, seed)
    manifest_path = write_benchmark_files(spec, out_dir, seed)
    _progress(args, f"wrote {len(spec.sessions)} sessions to {out_dir}")
    print(manifest_path)
    return 0


def _resolve_specs(cfg: RunConfig, seed_override: int | None) -> dict[int, BenchmarkSpec]:
    """One benchmark per requested K. Synthetic layouts are re-generated
    per K; file-backed benchmarks provide exactly their stored K."""
    if cfg.benchmark_kind == "synthetic":
        specs = {}
        for k in cfg.k_values:
            layout_k = replace(cfg.layout, shots=k)
            specs[k], _ = build_synthetic_benchmark(layout_k, cfg.benchmark_seed)
        return specs
    spec = load_benchmark_files(cfg.manifest_path)
    wanted = cfg.k_values if cfg.values["run.k_values"] else [spec.shots]
    for k in wanted:
        if k != spec.shots:
            raise ConfigError(
                f"benchmark files provide K={spec.shots} shots; cannot run K={k}"
            )
    return {spec.shots: spec}


def _run_job(payload) -> RunOutcome:
    spec, method_cfg, seed = payload
    return run_benchmark(spec, method_cfg, seed)


def _write_job_artifacts(out_dir: str, outcome: RunOutcome) -> None:
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    stem = f"{outcome.method}_k{outcome.shots}_s{outcome.seed}"
    for t, vectors in enumerate(outcome.prompts):
        save_prompt(
            PromptContext(vectors, provenance=f"session{t}"),
            os.path.join(ckpt_dir, f"{stem}_session{t}.fspc"),
        )
    for t, store in enumerate(outcome.stores):
        if store is not None and len(store) > 0:
            save_store(store, os.path.join(ckpt_dir, f"{stem}_session{t}.fsds"))


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.out or cfg.out
    if not out_dir:
        raise ConfigError("run needs an output directory (--out or run.out)")
    os.makedirs(out_dir, exist_ok=True)
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    jobs_flag = args.jobs if args.jobs is not None else cfg.jobs
    specs = _resolve_specs(cfg, args.seed)
    k_values = sorted(specs)

    grid = [
        (method, k, seed)
        for method in cfg.methods
        for k in k_values
        for seed in seeds
    ]
    metadata = {
        "tool_version": __version__,
        "vae_noise": "resampled per feature per epoch",
        "loss_reduction": "mean over the real-example batch",
        "config": cfg.echo(),
        "resolved": {
            "methods": cfg.methods,
            "seeds": seeds,
            "k_values": k_values,
            "out": str(out_dir),
            "jobs": jobs_flag,
            "timing": cfg.timing,
        },
        "complete": False,
        "jobs": [],
    }
    metadata_path = os.path.join(out_dir, "run_metadata.json")

    def flush_metadata():
        with open(metadata_path, "w", encoding="utf-8") as fh:
            json.dump(metadata, fh, indent=2, sort_keys=True)
            fh.write("\n")

    flush_metadata()
    try:
        outcomes: dict[tuple[str, int, int], RunOutcome] = {}
        payloads = {
            key: (specs[key[1]], cfg.method_config(key[0]), key[2]) for key in grid
        }
        started = time.perf_counter()
        if jobs_flag > 1 and len(grid) > 1:
            with ProcessPoolExecutor(max_workers=jobs_flag) as pool:
                for key, outcome in zip(grid, pool.map(_run_job, [payloads[k] for k in grid])):
                    outcomes[key] = outcome
                    _progress(args, f"done {key[0]} K={key[1]} seed={key[2]}")
        else:
            for key in grid:
                outcomes[key] = _run_job(payloads[key])
                _progress(args, f"done {key[0]} K={key[1]} seed={key[2]}")
        wall = time.perf_counter() - started

        rows = []
        ordered = [outcomes[key] for key in grid]
        for key, outcome in zip(grid, ordered):
            rows.extend(outcome_rows(outcome, specs[key[1]], timing=cfg.timing))
            _write_job_artifacts(out_dir, outcome)
            metadata["jobs"].append(
                {
                    "method": key[0],
                    "K": key[1],
                    "seed": key[2],
                    "session_seconds": [r.seconds for r in outcome.results],
                    "final_accuracy": outcome.results[-1].accuracy,
                }
            )
        results_path = os.path.join(out_dir, "results.csv")
        write_results_csv(results_path, rows)
        summary = build_summary(specs[k_values[0]], ordered)
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        metadata["complete"] = True
        metadata["wall_seconds"] = wall
        flush_metadata()
    except Exception as exc:
        metadata["error"] = f"{type(exc).__name__}: {exc}"
        flush_metadata()
        raise
    _progress(args, f"wrote {results_path}")
    print(results_path)
    return 0


def cmd_report(args) -> int:
    rows = load_results(args.results)
    curves = median_curves(rows)
    sys.stdout.write(render_table(curves))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        curves_path = os.path.join(args.out, "curves.csv")
        write_curves_csv(curves_path, curves)
        figures = render_figures(curves, args.out)
        _progress(args, f"wrote {curves_path} and {len(figures)} figure(s)")
    return 0


def _parse_dim_list(text: str | None, limit: int) -> list[int]:
    if not text or text == "all":
        return list(range(limit))
    out = []
    for part in text.split(","):
        part = part.strip()
        if part:
            out.append(int(part))
    return out


def cmd_inspect_dist(args) -> int:
    from .distributions import dimension_histogram, load_store, payload_megabytes, storage_bytes
    from .encoders import load_feature_file

    if bool(args.store) == bool(args.features):
        raise ConfigError("inspect-dist needs exactly one of --store or --features")
    if args.store:
        store = load_store(args.store)
        if args.class_id is None:
            ids = ", ".join(str(c) for c in store.class_ids)
            n_bytes = storage_bytes(store)
            print(f"store: {len(store)} classes, dim {store.dim}")
            print(f"payload: {n_bytes} bytes ({payload_megabytes(n_bytes):.2f} MB)")
            print(f"classes: {ids}")
            return 0
        try:
            dist = store.get(args.class_id)
        except KeyError:
            raise ConfigError(
                f"class {args.class_id} not in store (classes: {store.class_ids})"
            ) from None
        dims = _parse_dim_list(args.dims, dist.dim)
        print(
            f"class {dist.class_id}: dim {dist.dim}, "
            f"{dist.n_real} real + {dist.n_synth} synthesized features"
        )
        for d in dims:
            if not 0 <= d < dist.dim:
                raise ConfigError(f"dimension {d} out of range for dim {dist.dim}")
            print(f"dim {d}: mean={dist.mean[d]: .6f}  var={dist.var[d]: .6f}")
        return 0

    dim_count, records = load_feature_file(args.features)
    if args.dim is None:
        raise ConfigError("inspect-dist --features needs --dim")
    feats = [r.feature for r in records]
    if not feats:
        raise DataFormatError(f"{args.features}: no records to inspect")
    edges, counts, mean, var = dimension_histogram(feats, args.dim, args.bins)
    print(f"{len(records)} records, dim {args.dim} of {dim_count}")
    print(f"mean={mean:.6f}  var={var:.6f}")
    for i, c in enumerate(counts):
        print(f"[{edges[i]: .6f}, {edges[i + 1]: .6f}): {c}")
    if args.out:
        from .report import render_histogram_figure

        os.makedirs(args.out, exist_ok=True)
        path = render_histogram_figure(
            edges,
            counts,
            f"dimension {args.dim} ({len(records)} features)",
            os.path.join(args.out, f"histogram_dim{args.dim}.png"),
        )
        _progress(args, f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fscil",
        description="few-shot class-incremental learning benchmark harness",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="generate synthetic benchmark files")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", default=None)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--quiet", action="store_true")
    p_gen.set_defaults(func=cmd_gen_data)

    p_run = sub.add_parser("run", help="run the configured benchmark grid")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seed", type=int, default=None, help="override run.seeds")
    p_run.add_argument("--jobs", type=int, default=None)
    p_run.add_argument("--quiet", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="summarize one or more results files")
    p_rep.add_argument("results", nargs="+")
    p_rep.add_argument("--out", default=None, help="write curves.csv and figures here")
    p_rep.add_argument("--quiet", action="store_true")
    p_rep.set_defaults(func=cmd_report)

    p_ins = sub.add_parser("inspect-dist", help="inspect a store or feature file")
    p_ins.add_argument("--store", default=None)
    p_ins.add_argument("--class-id", type=int, default=None)
    p_ins.add_argument("--dims", default=None, help="comma list or 'all'")
    p_ins.add_argument("--features", default=None)
    p_ins.add_argument("--dim", type=int, default=None)
    p_ins.add_argument("--bins", type=int, default=10)
    p_ins.add_argument("--out", default=None, help="write a histogram figure here")
    p_ins.add_argument("--quiet", action="store_true")
    p_ins.set_defaults(func=cmd_inspect_dist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FscilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
