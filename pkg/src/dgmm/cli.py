"""Command-line driver.

Subcommands: ``generate`` (ground truth + samples to files), ``fit`` (one
method on a data file), ``experiment`` (full config run), ``bench``
(scaling table), ``export-scatter``. Exit code 0 on success, nonzero with a
diagnostic on any fatal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .estimator import METHODS, EstimatorConfig, run_estimation
from .experiments import (
    benchmark_scaling,
    experiment_config_from_dict,
    export_scatter,
    params_from_dict,
    params_to_dict,
    read_samples_csv,
    run_experiment,
    write_samples_csv,
)
from .model import (
    GroundTruthSpec,
    default_initialization,
    generate_ground_truth,
    sample_mixture,
)


def _load_json(path: str) -> dict:
    return json.loads(Path(path).read_text())


def _cmd_generate(args) -> int:
    if args.config:
        cfg = _load_json(args.config)
        spec = GroundTruthSpec(**cfg["truth"])
        n = int(cfg.get("n_samples", args.n))
    else:
        spec = GroundTruthSpec(
            n_components=args.K,
            dim=args.d,
            rank_max=args.R,
            rank_mode=args.rank_mode,
            seed=args.seed,
        )
        n = args.n
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    truth = generate_ground_truth(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "truth.json").write_text(json.dumps(params_to_dict(truth), indent=1))
    samples = sample_mixture(truth, n, spec.seed)
    write_samples_csv(out / "samples.csv", samples)
    print(f"wrote {out / 'truth.json'} and {out / 'samples.csv'} ({n} rows)")
    return 0


def _cmd_fit(args) -> int:
    data = read_samples_csv(args.data)
    est_kwargs = {}
    if args.config:
        est_kwargs = _load_json(args.config)
    est_kwargs["method"] = args.method
    config = EstimatorConfig(**est_kwargs)
    init = default_initialization(
        args.K, data.dim, args.R, args.seed if args.seed is not None else 0
    )
    fitted, trace = run_estimation(data, config, init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fitted.json").write_text(json.dumps(params_to_dict(fitted), indent=1))
    (out / "trace.json").write_text(json.dumps(trace.to_dict(), indent=1))
    print(
        f"{args.method}: {trace.termination} after {len(trace.steps)} steps, "
        f"{trace.total_inner_iterations} inner iterations"
    )
    return 0


def _cmd_experiment(args) -> int:
    cfg = _load_json(args.config)
    if args.out:
        cfg["out_dir"] = args.out
    if args.threads:
        cfg["workers"] = args.threads
    config = experiment_config_from_dict(cfg)
    result = run_experiment(config)
    for method, agg in result.aggregates.items():
        if agg.get("n_ok", 0) == 0:
            print(f"{method}: all cells failed")
            continue
        print(
            f"{method}: median err_pi={agg['median_err_pi']:.5g} "
            f"err_mu={agg['median_err_mu']:.5g} "
            f"err_sigma={agg['median_err_sigma']:.5g} "
            f"wall={agg['mean_wall_time']:.3g}s ± {agg['std_wall_time']:.2g}s"
        )
    return 0


def _cmd_bench(args) -> int:
    rows = benchmark_scaling(
        dims=args.dims,
        out_path=args.out,
        n_samples=args.n,
        max_order=args.L,
        seed=args.seed if args.seed is not None else 0,
    )
    for r in rows:
        exp = r["explicit_eval_seconds"]
        exp_txt = f"{exp:.3e}s" if exp is not None else "skipped (guard)"
        print(
            f"d={r['dim']}: implicit {r['implicit_eval_seconds']:.3e}s,"
            f" explicit {exp_txt}"
        )
    return 0


def _cmd_export_scatter(args) -> int:
    data = read_samples_csv(args.data)
    params_list = {}
    for item in args.params or []:
        name, _, path = item.partition("=")
        if not path:
            name, path = Path(item).stem, item
        params_list[name] = params_from_dict(_load_json(path))
    export_scatter(data, params_list, args.out, plot=args.plot)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgmm",
        description="Moment-based estimation for low-rank Gaussian mixtures",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a ground truth and samples")
    p.add_argument("--config", help="JSON file with 'truth' and 'n_samples'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-K", type=int, default=2)
    p.add_argument("-d", type=int, default=10)
    p.add_argument("-R", type=int, default=2)
    p.add_argument("-n", type=int, default=10000)
    p.add_argument("--rank-mode", default="identical", dest="rank_mode")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("fit", help="fit one method to a data file")
    p.add_argument("--data", required=True, help="samples CSV")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--config", help="JSON file of estimator settings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="initialization seed")
    p.add_argument("-K", type=int, required=True)
    p.add_argument("-R", type=int, required=True)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("experiment", help="run a full experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("bench", help="runtime scaling table")
    p.add_argument("--dims", type=int, nargs="+", default=[4, 8, 16, 32])
    p.add_argument("--out", help="CSV output path")
    p.add_argument("-n", type=int, default=5000)
    p.add_argument("-L", type=int, default=3)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("export-scatter", help="2-d projection export")
    p.add_argument("--data", required=True)
    p.add_argument(
        "--params",
        nargs="*",
        help="parameter JSON files, optionally as label=path",
    )
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true", help="also write an SVG")
    p.set_defaults(func=_cmd_export_scatter)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
