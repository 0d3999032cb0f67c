"""Experiment driver: data generation, method execution, metric
aggregation, serialization, and runtime-scaling benchmarks.

Configs and results are plain JSON; the schema is documented in the README.
Every run derives all randomness from the configured seeds, so a config
fully determines its outputs.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .estimator import (
    EstimationTrace,
    EstimatorConfig,
    dgmm_objective_gradient,
    explicit_objective_gradient,
    run_estimation,
)
from .kernels import exact_kernel_sums
from .metrics import error_metrics
from .model import (
    GroundTruthSpec,
    MixtureParams,
    SampleSet,
    default_initialization,
    generate_ground_truth,
    pack,
    sample_mixture,
    spawn_rng,
)
from .tensors import sample_moment_stack

__all__ = [
    "ExperimentConfig",
    "CellResult",
    "ExperimentResult",
    "run_experiment",
    "export_scatter",
    "benchmark_scaling",
    "experiment_config_from_dict",
    "experiment_config_to_dict",
    "params_to_dict",
    "params_from_dict",
    "write_samples_csv",
    "read_samples_csv",
]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a ground-truth recipe, a sample size, the methods to
    compare, and the seeds.

    Per seed, the driver generates a truth (shared across seeds when
    ``truth_seed`` is set), draws data, builds one shared initialization,
    and runs every method from that same initialization.
    """

    truth: GroundTruthSpec
    n_samples: int
    methods: Sequence[str]
    estimator: EstimatorConfig = EstimatorConfig()
    method_overrides: Dict[str, dict] = field(default_factory=dict)
    seeds: Sequence[int] = (0,)
    truth_seed: Optional[int] = None
    out_dir: Optional[str] = None
    workers: int = 1
    cov_norm: str = "spectral"

    def __post_init__(self):
        if not self.methods:
            raise ValueError("need at least one method")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def estimator_for(self, method: str) -> EstimatorConfig:
        base = dataclasses.asdict(self.estimator)
        base.update(self.method_overrides.get(method, {}))
        base["method"] = method
        return EstimatorConfig(**base)


@dataclass
class CellResult:
    method: str
    seed: int
    err_pi: float
    err_mu: float
    err_sigma: float
    inner_iterations: int
    wall_time: float
    status: str
    trace_file: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": int(self.seed),
            "err_pi": self.err_pi,
            "err_mu": self.err_mu,
            "err_sigma": self.err_sigma,
            "inner_iterations": int(self.inner_iterations),
            "wall_time": self.wall_time,
            "status": self.status,
            "trace_file": self.trace_file,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellResult":
        return cls(**d)


@dataclass
class ExperimentResult:
    cells: List[CellResult]
    aggregates: Dict[str, dict]

    def to_dict(self) -> dict:
        return {
            "cells": [c.to_dict() for c in self.cells],
            "aggregates": self.aggregates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        return cls(
            cells=[CellResult.from_dict(c) for c in d["cells"]],
            aggregates=d["aggregates"],
        )


def experiment_config_to_dict(config: ExperimentConfig) -> dict:
    d = dataclasses.asdict(config)
    d["truth"] = dataclasses.asdict(config.truth)
    d["estimator"] = dataclasses.asdict(config.estimator)
    d["methods"] = list(config.methods)
    d["seeds"] = list(config.seeds)
    return d


def experiment_config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    truth = d.pop("truth")
    estimator = d.pop("estimator", {})
    return ExperimentConfig(
        truth=GroundTruthSpec(**truth),
        estimator=EstimatorConfig(**estimator),
        **d,
    )


# ---------------------------------------------------------------------------
# Parameter / sample (de)serialization
# ---------------------------------------------------------------------------

def params_to_dict(params: MixtureParams) -> dict:
    return {
        "weights": params.weights.tolist(),
        "centers": params.centers.tolist(),
        "factors": params.factors.tolist(),
    }


def params_from_dict(d: dict) -> MixtureParams:
    return MixtureParams(
        weights=np.asarray(d["weights"], dtype=float),
        centers=np.asarray(d["centers"], dtype=float),
        factors=np.asarray(d["factors"], dtype=float),
    )


def write_samples_csv(path: Union[str, Path], samples: SampleSet):
    """One observation per row, comma separated; '#'-prefixed header records
    the shape and generating seed."""
    path = Path(path)
    header = f"samples n={samples.n_samples} d={samples.dim} seed={samples.seed}"
    np.savetxt(path, samples.data, delimiter=",", header=header)


def read_samples_csv(path: Union[str, Path]) -> SampleSet:
    data = np.loadtxt(Path(path), delimiter=",", ndmin=2)
    return SampleSet(data=data)


# ---------------------------------------------------------------------------
# The experiment loop
# ---------------------------------------------------------------------------

def _derive_seed(seed: int, label: str) -> int:
    return int(spawn_rng(seed, label).integers(2**63))


def _run_cell(
    config: ExperimentConfig,
    method: str,
    seed: int,
    truth: MixtureParams,
    data: SampleSet,
    init: MixtureParams,
):
    est_config = config.estimator_for(method)
    start = time.perf_counter()
    try:
        fitted, trace = run_estimation(data, est_config, init)
        wall = time.perf_counter() - start
        err_pi, err_mu, err_sigma = error_metrics(
            fitted, truth, cov_norm=config.cov_norm
        )
        cell = CellResult(
            method=method,
            seed=seed,
            err_pi=err_pi,
            err_mu=err_mu,
            err_sigma=err_sigma,
            inner_iterations=trace.total_inner_iterations,
            wall_time=wall,
            status=trace.termination,
        )
        return cell, trace, fitted
    except Exception as exc:  # failed cells are recorded, the run continues
        wall = time.perf_counter() - start
        cell = CellResult(
            method=method,
            seed=seed,
            err_pi=float("nan"),
            err_mu=float("nan"),
            err_sigma=float("nan"),
            inner_iterations=0,
            wall_time=wall,
            status=f"failed: {exc}",
        )
        return cell, None, None


def _aggregate(cells: List[CellResult]) -> Dict[str, dict]:
    out: Dict[str, dict] = {}
    methods = sorted({c.method for c in cells})
    for method in methods:
        rows = [c for c in cells if c.method == method and np.isfinite(c.err_pi)]
        if not rows:
            out[method] = {"n_ok": 0}
            continue
        times = np.array([c.wall_time for c in rows])
        out[method] = {
            "n_ok": len(rows),
            "median_err_pi": float(np.median([c.err_pi for c in rows])),
            "median_err_mu": float(np.median([c.err_mu for c in rows])),
            "median_err_sigma": float(np.median([c.err_sigma for c in rows])),
            "iqr_err_sigma": float(
                np.subtract(*np.percentile([c.err_sigma for c in rows], [75, 25]))
            ),
            "mean_wall_time": float(times.mean()),
            "std_wall_time": float(times.std()),
            "median_inner_iterations": int(
                np.median([c.inner_iterations for c in rows])
            ),
        }
    return out


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every (method, seed) cell and aggregate per-method medians.

    Deterministic for a fixed config: the truth, data, and initialization
    seeds are all derived from the configured seeds. When ``out_dir`` is
    set, writes ``result.json`` and one trace file per successful cell.
    """
    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for seed in config.seeds:
        t_seed = config.truth_seed if config.truth_seed is not None else _derive_seed(seed, "truth")
        truth = generate_ground_truth(
            dataclasses.replace(config.truth, seed=t_seed)
        )
        data = sample_mixture(truth, config.n_samples, _derive_seed(seed, "data"))
        init = default_initialization(
            truth.n_components, truth.dim, truth.rank_max, _derive_seed(seed, "init")
        )
        for method in config.methods:
            jobs.append((method, seed, truth, data, init))

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outputs = list(
                pool.map(lambda args: _run_cell(config, *args), jobs)
            )
    else:
        outputs = [_run_cell(config, *args) for args in jobs]

    cells = []
    for (method, seed, *_), (cell, trace, fitted) in zip(jobs, outputs):
        if out_dir is not None and trace is not None:
            trace_file = out_dir / f"trace_{method}_{seed}.json"
            payload = trace.to_dict()
            payload["fitted"] = params_to_dict(fitted)
            trace_file.write_text(json.dumps(payload, indent=1))
            cell.trace_file = trace_file.name
        cells.append(cell)

    result = ExperimentResult(cells=cells, aggregates=_aggregate(cells))
    if out_dir is not None:
        payload = {
            "config": experiment_config_to_dict(config),
            **result.to_dict(),
        }
        (out_dir / "result.json").write_text(json.dumps(payload, indent=1))
    return result


# ---------------------------------------------------------------------------
# Scatter export
# ---------------------------------------------------------------------------

def export_scatter(
    data: SampleSet,
    params_list: Dict[str, MixtureParams],
    path: Union[str, Path],
    plot: bool = False,
):
    """Write the first two sample coordinates plus, per parameter set, the
    projected centers and leading 2x2 covariance blocks (for external
    ellipse rendering); optionally also an SVG with 2-sigma ellipses.

    CSV columns: record,set,component,x,y,c11,c12,c21,c22 — 'sample' rows
    fill x,y only; 'center' and 'cov' rows carry the set label and the
    component index.
    """
    if data.dim < 2:
        raise ValueError("scatter export needs dimension >= 2")
    path = Path(path)
    lines = ["record,set,component,x,y,c11,c12,c21,c22"]
    for row in data.data:
        lines.append(f"sample,,,{row[0]!r},{row[1]!r},,,,")
    for name, params in params_list.items():
        covs = params.covariances()
        for j in range(params.n_components):
            mu = params.centers[j]
            lines.append(f"center,{name},{j},{mu[0]!r},{mu[1]!r},,,,")
        for j in range(params.n_components):
            c = covs[j][:2, :2]
            lines.append(
                f"cov,{name},{j},,,{c[0,0]!r},{c[0,1]!r},{c[1,0]!r},{c[1,1]!r}"
            )
    path.write_text("\n".join(lines) + "\n")
    if plot:
        _write_scatter_svg(data, params_list, path.with_suffix(".svg"))


def _write_scatter_svg(data: SampleSet, params_list, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Ellipse

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(data.data[:, 0], data.data[:, 1], s=4, alpha=0.35, color="0.4")
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, (name, params) in enumerate(params_list.items()):
        color = colors[i % len(colors)]
        covs = params.covariances()
        for j in range(params.n_components):
            block = covs[j][:2, :2]
            vals, vecs = np.linalg.eigh(block)
            vals = np.clip(vals, 0.0, None)
            angle = float(np.degrees(np.arctan2(vecs[1, -1], vecs[0, -1])))
            ax.add_patch(
                Ellipse(
                    xy=params.centers[j][:2],
                    width=4.0 * np.sqrt(vals[-1]),
                    height=4.0 * np.sqrt(vals[0]),
                    angle=angle,
                    fill=False,
                    color=color,
                    lw=1.5,
                )
            )
        ax.scatter(
            params.centers[:, 0], params.centers[:, 1],
            marker="x", s=60, color=color, label=name,
        )
    ax.legend(loc="best")
    ax.set_aspect("equal")
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


# ---------------------------------------------------------------------------
# Runtime scaling benchmark
# ---------------------------------------------------------------------------

def _time_callable(fn, repeats: int = 3, min_time: float = 0.05) -> float:
    """Best-of-``repeats`` per-call time, with inner batching so each
    measurement lasts at least ``min_time`` seconds."""
    fn()  # warm-up
    best = np.inf
    for _ in range(repeats):
        calls = 0
        start = time.perf_counter()
        elapsed = 0.0
        while elapsed < min_time:
            fn()
            calls += 1
            elapsed = time.perf_counter() - start
        best = min(best, elapsed / calls)
    return best


def benchmark_scaling(
    dims: Sequence[int],
    out_path: Optional[Union[str, Path]] = None,
    n_samples: int = 5000,
    n_components: int = 2,
    rank_max: int = 2,
    max_order: int = 3,
    seed: int = 0,
    explicit_entry_guard: int = 10**6,
    repeats: int = 3,
) -> List[dict]:
    """Per-objective-evaluation wall time of the tensor-free and dense
    paths across dimensions. Reporting tool: it asserts nothing.

    Returns one row per dimension with best-of-``repeats`` timings; the
    explicit column is None where the dense-entry guard trips.
    """
    rows_out = []
    for d in dims:
        spec = GroundTruthSpec(
            n_components=n_components, dim=d, rank_max=rank_max, seed=seed
        )
        truth = generate_ground_truth(spec)
        data = sample_mixture(truth, n_samples, _derive_seed(seed, f"bench-{d}"))
        init = default_initialization(n_components, d, rank_max, seed)
        theta = pack(init)
        weights = np.ones(max_order)
        cache = exact_kernel_sums(data.data, max_order, guard_n=max(n_samples, 1))

        implicit_time = _time_callable(
            lambda: dgmm_objective_gradient(theta, weights, data.data, cache),
            repeats=repeats,
        )
        explicit_time = None
        if d**max_order <= explicit_entry_guard:
            targets = sample_moment_stack(data.data, max_order)
            explicit_time = _time_callable(
                lambda: explicit_objective_gradient(theta, weights, targets),
                repeats=repeats,
            )
        rows_out.append(
            {
                "dim": int(d),
                "n_samples": int(n_samples),
                "max_order": int(max_order),
                "implicit_eval_seconds": implicit_time,
                "explicit_eval_seconds": explicit_time,
            }
        )
    if out_path is not None:
        out_path = Path(out_path)
        header = "dim,n_samples,max_order,implicit_eval_seconds,explicit_eval_seconds"
        lines = [header]
        for r in rows_out:
            exp = "" if r["explicit_eval_seconds"] is None else repr(r["explicit_eval_seconds"])
            lines.append(
                f"{r['dim']},{r['n_samples']},{r['max_order']},"
                f"{r['implicit_eval_seconds']!r},{exp}"
            )
        out_path.write_text("\n".join(lines) + "\n")
    return rows_out
