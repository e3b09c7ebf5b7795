"""Command-line front end: fit, score, impute, select-k, and benchmark.

Every command is a pure function of its input files, configuration, and seed;
identical inputs produce byte-identical outputs. Flags override config-file
values, which override built-in defaults. Exit codes: 0 success, 1 runtime
failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import (
    ExperimentSpec,
    LibsvmParseError,
    parse_libsvm,
    run_experiment,
    split_views,
    write_report_csv,
    write_report_json,
)
from .imputation import impute, select_latent_dim
from .inference import (
    AnomalyScores,
    GibbsTrace,
    InferenceConfig,
    anomaly_scores,
    run_stochastic_em,
)
from .model import AssignmentState, Hyperparameters, MultiViewDataset, ProjectionSet

_DATASET_FORMAT = "mvdata/1"
_MODEL_FORMAT = "mvmodel/1"
_TRACE_FORMAT = "mvtrace/1"

DEFAULTS = {
    "views": 2,
    "k": 5,
    "gamma": 1.0,
    "a": 1.0,
    "b": 1.0,
    "r": 1.0,
    "sweeps": 500,
    "burn_in": 100,
    "seed": 0,
    "anomaly_rate": 0.2,
    "missing_frac": 0.0,
    "holdout_frac": 0.05,
    "output_dir": ".",
    "format": "json",
    "jobs": 1,
    "instances": 100,
    "view_dim": 10,
    "k_star": 5,
    "noise_sd": None,  # per-source generator default

    "variance_scale": math.sqrt(10.0),
    "k_grid": "2:10",
    "seeds": "0:10",
}


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _dump_json(payload: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_dataset(data: MultiViewDataset, path) -> None:
    payload = {
        "format": _DATASET_FORMAT,
        "n_instances": data.n_instances,
        "views": [
            {
                "data": np.where(m, v, 0.0).tolist(),
                "mask": None if m.all() else m.tolist(),
            }
            for v, m in zip(data.views, data.masks)
        ],
        "labels": None if data.labels is None else data.labels.tolist(),
    }
    _dump_json(payload, Path(path))


def load_dataset(path) -> MultiViewDataset:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != _DATASET_FORMAT:
        raise ValueError(f"{path}: expected format {_DATASET_FORMAT!r}")
    views = [np.asarray(v["data"], dtype=np.float64) for v in payload["views"]]
    masks = [
        np.ones(view.shape, dtype=bool) if v.get("mask") is None else np.asarray(v["mask"], bool)
        for view, v in zip(views, payload["views"])
    ]
    return MultiViewDataset(views, masks, payload.get("labels"))


def save_model(
    proj: ProjectionSet,
    state: AssignmentState,
    hyper: Hyperparameters,
    config: InferenceConfig,
    joint_log_lik: float,
    path,
) -> None:
    payload = {
        "format": _MODEL_FORMAT,
        "k_latent": hyper.k_latent,
        "view_dims": [w.shape[0] for w in proj.weights],
        "hyper": {
            "k_latent": hyper.k_latent,
            "a": hyper.a,
            "b": hyper.b,
            "r": hyper.r,
            "gamma_dp": hyper.gamma_dp,
        },
        "config": {
            "n_sweeps": config.n_sweeps,
            "burn_in": config.burn_in,
            "seed": config.seed,
        },
        "weights": [w.tolist() for w in proj.weights],
        "assignments": state.s.tolist(),
        "joint_log_lik": joint_log_lik,
    }
    _dump_json(payload, Path(path))


def load_model(path) -> tuple[ProjectionSet, AssignmentState, Hyperparameters]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != _MODEL_FORMAT:
        raise ValueError(f"{path}: expected format {_MODEL_FORMAT!r}")
    proj = ProjectionSet([np.asarray(w, dtype=np.float64) for w in payload["weights"]])
    state = AssignmentState(np.asarray(payload["assignments"], dtype=np.int64))
    hyper = Hyperparameters(**payload["hyper"])
    return proj, state, hyper


def save_trace(trace: GibbsTrace, path) -> None:
    payload = {
        "format": _TRACE_FORMAT,
        "n_sweeps": trace.n_sweeps,
        "burn_in": trace.burn_in,
        "latent_counts": trace.latent_counts.tolist(),
        "joint_log_lik": trace.joint_log_lik.tolist(),
        "assignments": None if trace.assignments is None else trace.assignments.tolist(),
    }
    _dump_json(payload, Path(path))


def load_trace(path) -> GibbsTrace:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != _TRACE_FORMAT:
        raise ValueError(f"{path}: expected format {_TRACE_FORMAT!r}")
    assignments = payload.get("assignments")
    return GibbsTrace(
        n_sweeps=payload["n_sweeps"],
        burn_in=payload["burn_in"],
        latent_counts=np.asarray(payload["latent_counts"], dtype=np.int64),
        joint_log_lik=np.asarray(payload["joint_log_lik"], dtype=np.float64),
        assignments=None if assignments is None else np.asarray(assignments, dtype=np.int16),
    )


def save_scores_csv(scores: AnomalyScores, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance", "score"])
        for i, v in enumerate(scores.values):
            writer.writerow([i, repr(float(v))])


# ---------------------------------------------------------------------------
# Option plumbing
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON file with keys mirroring flag names")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--seed", type=int)


def _add_model_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--k", type=int, help="latent dimensionality")
    parser.add_argument("--gamma", type=float, help="Dirichlet-process concentration")
    parser.add_argument("--a", type=float, help="precision prior shape")
    parser.add_argument("--b", type=float, help="precision prior rate")
    parser.add_argument("--r", type=float, help="relative latent precision")
    parser.add_argument("--sweeps", type=int, help="total Gibbs sweeps")
    parser.add_argument("--burn-in", dest="burn_in", type=int)


class Options:
    """Effective option values: flags over config file over defaults."""

    def __init__(self, args: argparse.Namespace):
        file_cfg = {}
        if getattr(args, "config", None):
            with open(args.config) as fh:
                file_cfg = json.load(fh)
            if not isinstance(file_cfg, dict):
                raise ValueError(f"{args.config}: config file must hold a flat JSON object")
        self._args = args
        self._file = file_cfg

    def get(self, key: str):
        cli = getattr(self._args, key, None)
        if cli is not None:
            return cli
        if key in self._file:
            return self._file[key]
        return DEFAULTS.get(key)

    def hyper(self) -> Hyperparameters:
        return Hyperparameters(
            k_latent=int(self.get("k")),
            a=float(self.get("a")),
            b=float(self.get("b")),
            r=float(self.get("r")),
            gamma_dp=float(self.get("gamma")),
        )

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(
            n_sweeps=int(self.get("sweeps")),
            burn_in=int(self.get("burn_in")),
            seed=int(self.get("seed")),
        )

    def output_dir(self) -> Path:
        out = Path(self.get("output_dir"))
        out.mkdir(parents=True, exist_ok=True)
        return out


def _load_input_dataset(path: str, opts: Options) -> MultiViewDataset:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input path does not exist: {p}")
    if p.suffix == ".json":
        return load_dataset(p)
    _, features = parse_libsvm(p)
    rng = np.random.default_rng(int(opts.get("seed")))
    data, _ = split_views(features, int(opts.get("views")), rng)
    return data


def _parse_seed_list(text: str) -> tuple[int, ...]:
    text = str(text)
    if ":" in text:
        lo, hi = text.split(":", 1)
        return tuple(range(int(lo), int(hi)))
    return tuple(int(t) for t in text.split(",") if t != "")


def _parse_k_grid(text: str) -> list[int]:
    text = str(text)
    if ":" in text:
        lo, hi = text.split(":", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(t) for t in text.split(",") if t != ""]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_fit(args: argparse.Namespace) -> int:
    opts = Options(args)
    data = _load_input_dataset(args.input, opts)
    hyper = opts.hyper()
    config = opts.inference_config()
    proj, trace = run_stochastic_em(data, hyper, config)
    state = AssignmentState(trace.assignments[-1]) if trace.assignments is not None else None
    out = opts.output_dir()
    save_model(proj, state, hyper, config, float(trace.joint_log_lik[-1]), out / "model.json")
    save_trace(trace, out / "trace.json")
    print(f"joint log-likelihood: {trace.joint_log_lik[-1]!r}")
    print(f"wrote {out / 'model.json'} and {out / 'trace.json'}")
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    opts = Options(args)
    trace = load_trace(args.input)
    scores = anomaly_scores(trace)
    out = opts.output_dir()
    save_scores_csv(scores, out / "scores.csv")
    print(f"wrote {out / 'scores.csv'} ({scores.values.size} instances)")
    return 0


def cmd_impute(args: argparse.Namespace) -> int:
    opts = Options(args)
    data = load_dataset(args.input)
    proj, state, hyper = load_model(args.model)
    source: GibbsTrace | AssignmentState = state
    if args.trace:
        trace = load_trace(args.trace)
        if trace.assignments is not None:
            source = trace
    result = impute(data, proj, source, hyper)
    out = opts.output_dir()
    if opts.get("format") == "csv":
        path = out / "imputed_cells.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["instance", "view", "feature", "mean", "variance"])
            for d, mask in enumerate(data.masks):
                for n, m in zip(*np.nonzero(~mask)):
                    writer.writerow(
                        [n, d, m, repr(result.mean[d][n, m]), repr(result.variance[d][n, m])]
                    )
    else:
        path = out / "imputed.json"
        save_dataset(result.filled, path)
    n_missing = sum(int((~m).sum()) for m in data.masks)
    print(f"imputed {n_missing} cells -> {path}")
    return 0


def cmd_select_k(args: argparse.Namespace) -> int:
    opts = Options(args)
    data = _load_input_dataset(args.input, opts)
    grid = _parse_k_grid(opts.get("k_grid"))
    selection = select_latent_dim(
        data,
        grid,
        opts.hyper(),
        opts.inference_config(),
        holdout_fraction=float(opts.get("holdout_frac")),
    )
    out = opts.output_dir()
    with open(out / "k_selection.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "holdout_mse"])
        for k in sorted(selection.mse_by_k):
            writer.writerow([k, repr(selection.mse_by_k[k])])
    print(f"selected k = {selection.k}")
    return 0


def cmd_benchmark(args: argparse.Namespace) -> int:
    opts = Options(args)
    source = opts.get("source")
    if source is None:
        raise ValueError("benchmark needs --source (or a 'source' config key)")
    if source not in ("synthetic-cca", "single-view") and not Path(source).exists():
        raise FileNotFoundError(f"input path does not exist: {source}")
    spec = ExperimentSpec(
        source=source,
        seeds=_parse_seed_list(opts.get("seeds")),
        hyper=opts.hyper(),
        config=opts.inference_config(),
        n_views=int(opts.get("views")),
        n_instances=int(opts.get("instances")),
        view_dim=int(opts.get("view_dim")),
        k_star=int(opts.get("k_star")),
        anomaly_rate=float(opts.get("anomaly_rate")),
        noise_sd=None if opts.get("noise_sd") is None else float(opts.get("noise_sd")),
        variance_scale=float(opts.get("variance_scale")),
        missing_frac=float(opts.get("missing_frac")),
    )
    report = run_experiment(spec, n_jobs=int(opts.get("jobs")))
    out = opts.output_dir()
    write_report_csv(report, out / "report.csv")
    write_report_json(report, out / "report.json")
    total = sum(r.runtime for r in report.results)
    for name, (mean, stderr) in sorted(report.aggregates.items()):
        print(f"{name}: {mean:.4f} +/- {stderr:.4f}")
    print(f"wrote {out / 'report.csv'} and {out / 'report.json'} ({total:.1f}s)")
    return 1 if report.all_failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvanomaly",
        description="Multi-view anomaly detection with a Dirichlet-process latent variable model",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit the model and write model + trace files")
    p_fit.add_argument("--input", required=True, help="dataset JSON or LIBSVM text file")
    p_fit.add_argument("--views", type=int, help="views to split LIBSVM features into")
    _add_model_options(p_fit)
    _add_common(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_score = sub.add_parser("score", help="compute anomaly scores from a trace file")
    p_score.add_argument("--input", required=True, help="trace JSON file")
    _add_common(p_score)
    p_score.set_defaults(func=cmd_score)

    p_imp = sub.add_parser("impute", help="fill missing cells with predictive means")
    p_imp.add_argument("--input", required=True, help="dataset JSON file")
    p_imp.add_argument("--model", required=True, help="model JSON file")
    p_imp.add_argument("--trace", help="trace JSON file (enables sweep averaging)")
    p_imp.add_argument("--format", choices=("csv", "json"))
    _add_common(p_imp)
    p_imp.set_defaults(func=cmd_impute)

    p_sel = sub.add_parser("select-k", help="choose the latent dimensionality by held-out MSE")
    p_sel.add_argument("--input", required=True, help="dataset JSON or LIBSVM text file")
    p_sel.add_argument("--views", type=int)
    p_sel.add_argument("--k-grid", dest="k_grid", help="candidates, e.g. 2:10 or 2,4,8")
    p_sel.add_argument("--holdout-frac", dest="holdout_frac", type=float)
    _add_model_options(p_sel)
    _add_common(p_sel)
    p_sel.set_defaults(func=cmd_select_k)

    p_bench = sub.add_parser("benchmark", help="run a multi-seed experiment and write reports")
    p_bench.add_argument(
        "--source", help="synthetic-cca, single-view, or a LIBSVM file path"
    )
    p_bench.add_argument("--seeds", help="seed list, e.g. 0:10 or 1,2,3")
    p_bench.add_argument("--views", type=int)
    p_bench.add_argument("--instances", type=int)
    p_bench.add_argument("--view-dim", dest="view_dim", type=int)
    p_bench.add_argument("--k-star", dest="k_star", type=int)
    p_bench.add_argument("--anomaly-rate", dest="anomaly_rate", type=float)
    p_bench.add_argument("--noise-sd", dest="noise_sd", type=float)
    p_bench.add_argument("--variance-scale", dest="variance_scale", type=float)
    p_bench.add_argument("--missing-frac", dest="missing_frac", type=float)
    p_bench.add_argument("--jobs", type=int)
    _add_model_options(p_bench)
    _add_common(p_bench)
    p_bench.set_defaults(func=cmd_benchmark)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        FileNotFoundError,
        IsADirectoryError,
        PermissionError,
        json.JSONDecodeError,
        LibsvmParseError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
