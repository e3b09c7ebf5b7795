"""Benchmark harness: data ingestion, anomaly injection, synthetic generators,
metrics, and the experiment driver with its baselines."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from scipy import sparse
from scipy.stats import rankdata

from .imputation import holdout_mse, impute, mean_impute, sample_holdout
from .inference import (
    InferenceConfig,
    anomaly_scores,
    pcca_baseline_scores,
    run_stochastic_em,
)
from .model import Hyperparameters, MultiViewDataset, ProjectionSet


class LibsvmParseError(ValueError):
    """Raised for malformed LIBSVM text, with the offending line number."""


def parse_libsvm(path) -> tuple[np.ndarray, sparse.csr_matrix]:
    """Read a LIBSVM sparse text file.

    Each line is ``<label> <index>:<value> ...`` with 1-based, strictly
    ascending indices. Returns the class labels (unused by the model) and a
    CSR matrix whose width is the largest index seen.
    """
    labels: list[float] = []
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    n_features = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                labels.append(float(parts[0]))
            except ValueError:
                raise LibsvmParseError(f"line {lineno}: bad label {parts[0]!r}") from None
            prev = 0
            for token in parts[1:]:
                idx_str, _, val_str = token.partition(":")
                try:
                    idx = int(idx_str)
                    val = float(val_str)
                except ValueError:
                    raise LibsvmParseError(f"line {lineno}: bad feature {token!r}") from None
                if idx <= prev:
                    raise LibsvmParseError(
                        f"line {lineno}: index {idx} not ascending from {prev}"
                    )
                prev = idx
                rows.append(len(labels) - 1)
                cols.append(idx - 1)
                vals.append(val)
            n_features = max(n_features, prev)
    matrix = sparse.csr_matrix(
        (vals, (rows, cols)), shape=(len(labels), n_features), dtype=np.float64
    )
    return np.asarray(labels), matrix


def split_views(
    features, n_views: int, rng: np.random.Generator
) -> tuple[MultiViewDataset, list[np.ndarray]]:
    """Randomly partition feature columns into views and standardize them.

    Features are split into ``n_views`` disjoint groups whose sizes differ by
    at most one, then each view is z-scored per feature; constant features are
    dropped. Returns the dataset and the retained original column indices per
    view.
    """
    if sparse.issparse(features):
        features = features.toarray()
    features = np.asarray(features, dtype=np.float64)
    n_features = features.shape[1]
    if n_views < 1:
        raise ValueError("need at least one view")
    if n_views > n_features:
        raise ValueError(f"cannot split {n_features} features into {n_views} views")

    order = rng.permutation(n_features)
    groups = [np.sort(g) for g in np.array_split(order, n_views)]
    views: list[np.ndarray] = []
    kept_groups: list[np.ndarray] = []
    for d, group in enumerate(groups):
        block = features[:, group]
        std = block.std(axis=0)
        keep = std > 0
        if not keep.any():
            raise ValueError(f"view {d} has only constant features")
        block = (block[:, keep] - block[:, keep].mean(axis=0)) / std[keep]
        views.append(block)
        kept_groups.append(group[keep])
    return MultiViewDataset(views), kept_groups


def inject_swap_anomalies(
    data: MultiViewDataset, anomaly_rate: float, rng: np.random.Generator
) -> MultiViewDataset:
    """Create multi-view anomalies by swapping one view between instance pairs.

    Picks ``anomaly_rate * N`` distinct instances (must be an even count),
    pairs them at random, and exchanges one randomly chosen view's rows within
    each pair. Per-view marginal distributions are unchanged; both members of
    a pair are labeled anomalous.
    """
    n = data.n_instances
    if not 0 <= anomaly_rate < 1:
        raise ValueError(f"anomaly_rate must lie in [0, 1), got {anomaly_rate!r}")
    n_anom = int(round(anomaly_rate * n))
    labels = np.zeros(n, dtype=bool)
    if n_anom == 0:
        return MultiViewDataset(data.views, data.masks, labels)
    if n_anom % 2:
        raise ValueError(f"anomaly_rate * N must be even for pairwise swaps, got {n_anom}")
    if data.n_views < 2:
        raise ValueError("swap anomalies need at least two views")
    if n_anom > n:
        raise ValueError(f"cannot make {n_anom} anomalies out of {n} instances")

    chosen = rng.choice(n, size=n_anom, replace=False)
    labels[chosen] = True
    views = [v.copy() for v in data.views]
    masks = [m.copy() for m in data.masks]
    for a, b in chosen.reshape(-1, 2):
        d = int(rng.integers(data.n_views))
        views[d][[a, b]] = views[d][[b, a]]
        masks[d][[a, b]] = masks[d][[b, a]]
    return MultiViewDataset(views, masks, labels)


def gen_synthetic_cca(
    n_instances: int,
    n_views: int,
    view_dims,
    k_star: int,
    anomaly_rate: float,
    noise_sd: float,
    rng: np.random.Generator,
) -> MultiViewDataset:
    """Generate linear-Gaussian multi-view data with injected inconsistencies.

    Normal instances use a single latent vector for all views; each anomaly
    draws a second latent vector and splits its views into two groups, one per
    latent vector. Projection entries are standard normal and observations get
    isotropic noise of standard deviation ``noise_sd``.
    """
    if k_star < 1:
        raise ValueError("k_star must be at least 1")
    view_dims = [int(m) for m in view_dims]
    if len(view_dims) != n_views:
        raise ValueError(f"need {n_views} view dims, got {len(view_dims)}")
    weights = [rng.standard_normal((m, k_star)) for m in view_dims]

    n_anom = int(round(anomaly_rate * n_instances))
    labels = np.zeros(n_instances, dtype=bool)
    if n_anom:
        labels[np.sort(rng.choice(n_instances, size=n_anom, replace=False))] = True

    z_primary = rng.standard_normal((n_instances, k_star))
    z_secondary = rng.standard_normal((n_instances, k_star))
    # Which views of each anomaly come from the second latent vector.
    use_secondary = np.zeros((n_instances, n_views), dtype=bool)
    for n in np.nonzero(labels)[0]:
        if n_views == 2:
            use_secondary[n, 1] = True
        else:
            size = int(rng.integers(1, n_views))
            use_secondary[n, rng.choice(n_views, size=size, replace=False)] = True

    views = []
    for d in range(n_views):
        z = np.where(use_secondary[:, d : d + 1], z_secondary, z_primary)
        noise = noise_sd * rng.standard_normal((n_instances, view_dims[d]))
        views.append(z @ weights[d].T + noise)
    return MultiViewDataset(views, labels=labels)


def gen_single_view_anomalies(
    n_normal: int = 95,
    n_anom: int = 5,
    view_dim: int = 5,
    k_latent: int = 3,
    variance_scale: float = math.sqrt(10.0),
    noise_sd: float = 1.0,
    rng: np.random.Generator | None = None,
) -> MultiViewDataset:
    """Generate two-view data whose anomalies are outliers but not inconsistent.

    Every instance, anomalous or not, uses a single latent vector for both
    views; anomalies draw theirs with covariance inflated by
    ``variance_scale``, so they sit far from the bulk in every view while the
    views stay mutually consistent.
    """
    if rng is None:
        rng = np.random.default_rng()
    n = n_normal + n_anom
    weights = [rng.standard_normal((view_dim, k_latent)) for _ in range(2)]
    labels = np.zeros(n, dtype=bool)
    labels[np.sort(rng.choice(n, size=n_anom, replace=False))] = True

    z = rng.standard_normal((n, k_latent))
    z[labels] *= math.sqrt(variance_scale)
    views = [
        z @ w.T + noise_sd * rng.standard_normal((n, view_dim)) for w in weights
    ]
    return MultiViewDataset(views, labels=labels)


def auc(scores, labels) -> float:
    """Area under the ROC curve by the rank statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    return (ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


@dataclass(frozen=True)
class ExperimentSpec:
    """One benchmark configuration, run once per seed.

    ``source`` is either a synthetic generator name ("synthetic-cca" or
    "single-view") or a path to a LIBSVM file, in which case features are
    randomly split into ``n_views`` views and swap anomalies are injected.
    ``missing_frac`` > 0 additionally hides observed cells and evaluates
    imputation error for the model, the single-latent baseline, and
    feature-mean imputation.
    """

    source: str
    seeds: tuple[int, ...]
    hyper: Hyperparameters
    config: InferenceConfig = field(default_factory=InferenceConfig)
    n_views: int = 2
    n_instances: int = 100
    view_dim: int = 10
    k_star: int = 5
    anomaly_rate: float = 0.2
    noise_sd: float | None = None  # per-source default: 0.1 synthetic-cca, 1.0 single-view
    variance_scale: float = math.sqrt(10.0)
    missing_frac: float = 0.0

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("need at least one seed")
        if not 0 <= self.anomaly_rate < 1:
            raise ValueError("anomaly_rate must lie in [0, 1)")
        if not 0 <= self.missing_frac <= 0.5:
            raise ValueError("missing_frac must lie in [0, 0.5]")


@dataclass
class SeedResult:
    seed: int
    auc: float | None = None
    auc_pcca: float | None = None
    mse: float | None = None
    mse_pcca: float | None = None
    mse_mean: float | None = None
    runtime: float = 0.0
    error: str | None = None


@dataclass
class MetricsReport:
    """Per-seed metrics plus mean and standard error per metric."""

    results: list[SeedResult]
    aggregates: dict[str, tuple[float, float]]

    METRICS = ("auc", "auc_pcca", "mse", "mse_pcca", "mse_mean")

    @classmethod
    def from_results(cls, results: list[SeedResult]) -> "MetricsReport":
        aggregates = {}
        for name in cls.METRICS:
            values = [getattr(r, name) for r in results if getattr(r, name) is not None]
            if not values:
                continue
            mean = float(np.mean(values))
            stderr = (
                float(np.std(values, ddof=1) / math.sqrt(len(values)))
                if len(values) > 1
                else 0.0
            )
            aggregates[name] = (mean, stderr)
        return cls(results=results, aggregates=aggregates)

    @property
    def all_failed(self) -> bool:
        return all(r.error is not None for r in self.results)


def _build_dataset(spec: ExperimentSpec, rng: np.random.Generator, features=None):
    if spec.source == "synthetic-cca":
        return gen_synthetic_cca(
            spec.n_instances,
            spec.n_views,
            [spec.view_dim] * spec.n_views,
            spec.k_star,
            spec.anomaly_rate,
            0.1 if spec.noise_sd is None else spec.noise_sd,
            rng,
        )
    if spec.source == "single-view":
        n_anom = int(round(spec.anomaly_rate * spec.n_instances))
        return gen_single_view_anomalies(
            n_normal=spec.n_instances - n_anom,
            n_anom=n_anom,
            view_dim=spec.view_dim,
            k_latent=spec.k_star,
            variance_scale=spec.variance_scale,
            noise_sd=1.0 if spec.noise_sd is None else spec.noise_sd,
            rng=rng,
        )
    if features is None:
        _, features = parse_libsvm(spec.source)
    data, _ = split_views(features, spec.n_views, rng)
    return inject_swap_anomalies(data, spec.anomaly_rate, rng)


def _run_seed(spec: ExperimentSpec, seed: int, features) -> SeedResult:
    start = time.perf_counter()
    result = SeedResult(seed=seed)
    try:
        rng = np.random.default_rng(seed)
        data = _build_dataset(spec, rng, features)
        config = replace(spec.config, seed=seed)
        truth = data
        cells = None
        if spec.missing_frac > 0:
            data, cells = sample_holdout(data, spec.missing_frac, rng)

        proj, trace = run_stochastic_em(data, spec.hyper, config)
        scores = anomaly_scores(trace).values
        pcca = pcca_baseline_scores(data, spec.hyper, config)
        labels = data.labels
        if labels is not None and 0 < labels.sum() < labels.size:
            result.auc = auc(scores, labels)
            result.auc_pcca = auc(pcca, labels)

        if cells:
            result.mse = holdout_mse(impute(data, proj, trace, spec.hyper), truth, cells)
            pcca_cfg = replace(config, sample_assignments=False)
            pcca_proj, pcca_trace = run_stochastic_em(data, spec.hyper, pcca_cfg)
            result.mse_pcca = holdout_mse(
                impute(data, pcca_proj, pcca_trace, spec.hyper), truth, cells
            )
            result.mse_mean = holdout_mse(mean_impute(data), truth, cells)
    except Exception as exc:  # noqa: BLE001 - per-seed failures must not abort the run
        result.error = f"{type(exc).__name__}: {exc}"
    result.runtime = time.perf_counter() - start
    return result


def run_experiment(spec: ExperimentSpec, n_jobs: int = 1) -> MetricsReport:
    """Run the experiment once per seed and aggregate the metrics.

    Seeds are independent and may run in parallel; results are always
    aggregated in seed-list order, so the report does not depend on
    ``n_jobs``. Per-seed failures are recorded in the report instead of
    aborting the remaining seeds.
    """
    features = None
    if spec.source not in ("synthetic-cca", "single-view"):
        _, features = parse_libsvm(spec.source)
    if n_jobs == 1:
        results = [_run_seed(spec, seed, features) for seed in spec.seeds]
    else:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_run_seed)(spec, seed, features) for seed in spec.seeds
        )
    return MetricsReport.from_results(results)


def _format_value(value) -> str:
    return "" if value is None else repr(float(value))


def write_report_csv(report: MetricsReport, path) -> None:
    """One row per seed plus mean and stderr rows. Runtimes are deliberately
    omitted so reruns with the same seeds are byte-identical."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "status"] + list(MetricsReport.METRICS))
        for r in report.results:
            writer.writerow(
                [r.seed, "error" if r.error else "ok"]
                + [_format_value(getattr(r, name)) for name in MetricsReport.METRICS]
            )
        for agg_row, idx in (("mean", 0), ("stderr", 1)):
            writer.writerow(
                [agg_row, ""]
                + [
                    _format_value(report.aggregates[name][idx])
                    if name in report.aggregates
                    else ""
                    for name in MetricsReport.METRICS
                ]
            )


def write_report_json(report: MetricsReport, path) -> None:
    payload = {
        "format": "mvreport/1",
        "per_seed": [
            {
                "seed": r.seed,
                "error": r.error,
                **{
                    name: getattr(r, name)
                    for name in MetricsReport.METRICS
                    if getattr(r, name) is not None
                },
            }
            for r in report.results
        ],
        "aggregates": {
            name: {"mean": mean, "stderr": stderr}
            for name, (mean, stderr) in report.aggregates.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
