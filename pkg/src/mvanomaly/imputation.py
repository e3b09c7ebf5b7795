"""Missing-value imputation under the fitted model and latent-dimension selection."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .inference import GibbsTrace, InferenceConfig, run_stochastic_em
from .model import (
    AssignmentState,
    Hyperparameters,
    MultiViewDataset,
    ProjectionSet,
    compute_latent_stats,
)


@dataclass
class ImputationResult:
    """Dataset with missing cells filled by posterior-predictive means.

    ``filled`` has observed cells passed through bit-exact and missing cells
    replaced. ``mean`` and ``variance`` hold the predictive mean and variance
    scale for every cell of every view (meaningful mainly at missing cells).
    """

    filled: MultiViewDataset
    mean: list[np.ndarray]
    variance: list[np.ndarray]


def _predictive_moments(
    data: MultiViewDataset,
    proj: ProjectionSet,
    state: AssignmentState,
    hyper: Hyperparameters,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    stats = compute_latent_stats(data, state, proj, hyper)
    cov = np.linalg.inv(stats.inv_c)
    noise_var = stats.b_prime / stats.a_prime
    means, variances = [], []
    for d in range(data.n_views):
        w = proj.weights[d]
        block_idx = stats.offsets[:-1] + state.s[:, d]
        mu_d = stats.mu[block_idx]
        means.append(mu_d @ w.T)
        spread = np.einsum("bkl,mk,ml->bm", cov[block_idx], w, w)
        variances.append(noise_var * (1.0 + spread))
    return means, variances


def impute(
    data: MultiViewDataset,
    proj: ProjectionSet,
    source: GibbsTrace | AssignmentState,
    hyper: Hyperparameters,
) -> ImputationResult:
    """Fill missing cells with posterior-predictive means.

    With a trace that stores assignments, the prediction for each cell is
    averaged over the retained sweeps (each sweep contributing the mean of the
    latent vector that generates the view under that sweep's assignments);
    with a single assignment state, the prediction uses that state alone.
    """
    for d, mask in enumerate(data.masks):
        if not mask.any():
            raise ValueError(f"view {d} has no observed cells; weights are unidentifiable")

    if isinstance(source, AssignmentState):
        states = [source]
    elif isinstance(source, GibbsTrace):
        if source.assignments is None:
            raise ValueError("trace does not store assignments; refit with store_assignments")
        states = [AssignmentState(s) for s in source.assignments]
    else:
        raise TypeError(f"source must be a GibbsTrace or AssignmentState, got {type(source)}")

    mean = [np.zeros(v.shape) for v in data.views]
    variance = [np.zeros(v.shape) for v in data.views]
    for state in states:
        sweep_mean, sweep_var = _predictive_moments(data, proj, state, hyper)
        for d in range(data.n_views):
            mean[d] += sweep_mean[d]
            variance[d] += sweep_var[d]
    for d in range(data.n_views):
        mean[d] /= len(states)
        variance[d] /= len(states)

    filled_views = [
        np.where(m, v, mu) for v, m, mu in zip(data.views, data.masks, mean)
    ]
    filled = MultiViewDataset(
        filled_views, [np.ones(v.shape, dtype=bool) for v in data.views], data.labels
    )
    return ImputationResult(filled=filled, mean=mean, variance=variance)


def mean_impute(data: MultiViewDataset) -> ImputationResult:
    """Baseline: fill each missing cell with its feature's observed mean."""
    mean, variance = [], []
    for v, m in zip(data.views, data.masks):
        counts = m.sum(axis=0)
        col_mean = np.where(counts > 0, np.where(m, v, 0.0).sum(axis=0) / np.maximum(counts, 1), 0.0)
        col_sq = np.where(
            counts > 0, np.where(m, v**2, 0.0).sum(axis=0) / np.maximum(counts, 1), 0.0
        )
        mean.append(np.tile(col_mean, (v.shape[0], 1)))
        variance.append(np.tile(np.maximum(col_sq - col_mean**2, 0.0), (v.shape[0], 1)))
    filled_views = [np.where(m, v, mu) for v, m, mu in zip(data.views, data.masks, mean)]
    filled = MultiViewDataset(
        filled_views, [np.ones(v.shape, dtype=bool) for v in data.views], data.labels
    )
    return ImputationResult(filled=filled, mean=mean, variance=variance)


def sample_holdout(
    data: MultiViewDataset, fraction: float, rng: np.random.Generator
) -> tuple[MultiViewDataset, list[tuple[int, int, int]]]:
    """Hide a random fraction of the observed cells.

    Cells that are already missing are never selected. Returns the masked
    dataset and the list of hidden (instance, view, feature) cells.
    """
    if not 0 < fraction <= 0.5:
        raise ValueError(f"holdout fraction must lie in (0, 0.5], got {fraction!r}")
    observed = [
        (n, d, m)
        for d in range(data.n_views)
        for n, m in zip(*np.nonzero(data.masks[d]))
    ]
    n_hide = max(1, int(round(fraction * len(observed))))
    picked = rng.choice(len(observed), size=n_hide, replace=False)
    cells = [observed[i] for i in np.sort(picked)]
    masks = [m.copy() for m in data.masks]
    for n, d, m in cells:
        masks[d][n, m] = False
    return MultiViewDataset(data.views, masks, data.labels), cells


def holdout_mse(
    result: ImputationResult,
    truth: MultiViewDataset,
    cells: list[tuple[int, int, int]],
) -> float:
    """Mean squared error of the imputed values on held-out cells."""
    if not cells:
        raise ValueError("no held-out cells")
    err = 0.0
    for n, d, m in cells:
        err += (result.mean[d][n, m] - truth.views[d][n, m]) ** 2
    return err / len(cells)


@dataclass
class DimSelection:
    """Selected latent dimensionality and the held-out MSE per candidate."""

    k: int
    mse_by_k: dict[int, float]


def select_latent_dim(
    data: MultiViewDataset,
    k_grid,
    hyper: Hyperparameters,
    config: InferenceConfig,
    holdout_fraction: float = 0.05,
    tie_tolerance: float = 0.02,
) -> DimSelection:
    """Pick the latent dimensionality by held-out imputation error.

    Hides a seeded random fraction of the observed cells once, fits the model
    for every candidate K on the masked data, and returns the smallest K whose
    held-out MSE is within ``tie_tolerance`` (relative) of the minimum.
    """
    k_values = sorted({int(k) for k in k_grid})
    if not k_values:
        raise ValueError("k_grid must be non-empty")
    if k_values[0] < 1:
        raise ValueError(f"latent dimensions must be >= 1, got {k_values[0]}")

    rng = np.random.default_rng(config.seed)
    masked, cells = sample_holdout(data, holdout_fraction, rng)
    cfg = replace(config, store_assignments=True)

    mse_by_k: dict[int, float] = {}
    for k in k_values:
        hyper_k = replace(hyper, k_latent=k)
        proj, trace = run_stochastic_em(masked, hyper_k, cfg)
        result = impute(masked, proj, trace, hyper_k)
        mse_by_k[k] = holdout_mse(result, data, cells)

    best = min(mse_by_k.values())
    for k in k_values:
        if mse_by_k[k] <= best * (1.0 + tie_tolerance):
            return DimSelection(k=k, mse_by_k=mse_by_k)
    raise AssertionError("unreachable: minimum is always within tolerance of itself")
