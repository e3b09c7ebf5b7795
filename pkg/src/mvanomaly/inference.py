"""Stochastic EM for the collapsed multi-view model.

The E-step resamples each view's latent-vector assignment by collapsed Gibbs
sampling; the M-step maximizes the joint log likelihood over the projection
matrices with L-BFGS. Anomaly scores are the fraction of retained sweeps in
which an instance used more than one latent vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .model import (
    _LOG_2PI,
    AssignmentState,
    Hyperparameters,
    LatentStats,
    MultiViewDataset,
    ProjectionSet,
    compute_latent_stats,
    marginal_log_likelihood_from_stats,
    partition_log_prior,
)


@dataclass(frozen=True)
class InferenceConfig:
    """Knobs of the stochastic EM loop.

    ``n_sweeps`` Gibbs sweeps are run in total and the last
    ``n_sweeps - burn_in`` are retained for scoring. Every ``mstep_every``
    sweeps the projection matrices are re-optimized for at most
    ``mstep_max_iters`` quasi-Newton iterations, stopping early when the
    max-abs gradient falls below ``mstep_grad_tol``. ``init_scale`` is the
    standard deviation of the Gaussian weight initialization (default
    1/sqrt(K)). With ``sample_assignments`` False the E-step is skipped and
    the model degenerates to probabilistic CCA with spherical noise.
    """

    n_sweeps: int = 500
    burn_in: int = 100
    mstep_every: int = 1
    mstep_max_iters: int = 20
    mstep_grad_tol: float = 1e-4
    seed: int = 0
    init_scale: float | None = None
    sample_assignments: bool = True
    random_scan: bool = False
    store_assignments: bool = True

    def __post_init__(self):
        if self.n_sweeps < 1:
            raise ValueError("n_sweeps must be at least 1")
        if not 0 <= self.burn_in < self.n_sweeps:
            raise ValueError("burn_in must satisfy 0 <= burn_in < n_sweeps")
        if self.mstep_every < 1:
            raise ValueError("mstep_every must be at least 1")
        if not self.mstep_grad_tol > 0:
            raise ValueError("mstep_grad_tol must be positive")
        if self.init_scale is not None and not self.init_scale > 0:
            raise ValueError("init_scale must be positive")


@dataclass
class GibbsTrace:
    """Per-retained-sweep record of the sampler.

    ``latent_counts[h, n]`` is the number of latent vectors used by instance n
    in retained sweep h; ``joint_log_lik[h]`` the joint log likelihood after
    that sweep; ``assignments`` optionally stores the full assignment arrays.
    """

    n_sweeps: int
    burn_in: int
    latent_counts: np.ndarray
    joint_log_lik: np.ndarray
    assignments: np.ndarray | None = None

    @property
    def n_retained(self) -> int:
        return self.latent_counts.shape[0]

    @property
    def n_instances(self) -> int:
        return self.latent_counts.shape[1]


@dataclass
class AnomalyScores:
    """Per-instance probability of using more than one latent vector."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if ((self.values < 0) | (self.values > 1)).any():
            raise ValueError("anomaly scores must lie in [0, 1]")


class ChainStats:
    """Mutable sufficient statistics kept in sync with an assignment state.

    Mirrors :func:`compute_latent_stats` block by block but supports O(K^3)
    incremental updates when a single view moves between latent vectors.
    The from-scratch computation is the correctness reference: after any
    sequence of updates the two must agree to floating-point accuracy.
    """

    def __init__(
        self,
        data: MultiViewDataset,
        state: AssignmentState,
        proj: ProjectionSet,
        hyper: Hyperparameters,
    ):
        self.data = data
        self.hyper = hyper
        self.cells_nd = data.observed_counts
        self.xtx_nd = data.squared_sums
        self.xtx_total = float(self.xtx_nd.sum())
        self.a_prime = hyper.a + 0.5 * data.n_observed_cells
        self.set_projections(proj)
        self.rebuild(state)

    def set_projections(self, proj: ProjectionSet) -> None:
        """Refresh per-view caches after the weights change (stats go stale)."""
        self.proj = proj
        self.grams = [w.T @ w for w in proj.weights]
        self.projections = [x @ w for x, w in zip(self.data.filled, proj.weights)]
        self.gram_fix: dict[tuple[int, int], np.ndarray] = {}
        for d, (w, mask) in enumerate(zip(proj.weights, self.data.masks)):
            if mask.all():
                continue
            for n in np.nonzero(~mask.all(axis=1))[0]:
                w_miss = w[~mask[n]]
                self.gram_fix[(int(n), d)] = w_miss.T @ w_miss

    def gram(self, n: int, d: int) -> np.ndarray:
        """Observed-row Gram matrix of view d for instance n."""
        fix = self.gram_fix.get((n, d))
        return self.grams[d] if fix is None else self.grams[d] - fix

    def rebuild(self, state: AssignmentState) -> None:
        """Recompute every block from scratch for the given assignments."""
        stats = compute_latent_stats(self.data, state, self.proj, self.hyper)
        self.inv_c: list[list[np.ndarray]] = []
        self.obs_proj: list[list[np.ndarray]] = []
        self.quad: list[list[float]] = []
        self.logdet: list[list[float]] = []
        off = stats.offsets
        for n in range(state.n_instances):
            lo, hi = int(off[n]), int(off[n + 1])
            self.inv_c.append([stats.inv_c[b].copy() for b in range(lo, hi)])
            self.obs_proj.append([stats.obs_proj[b].copy() for b in range(lo, hi)])
            self.quad.append([float(stats.quad[b]) for b in range(lo, hi)])
            self.logdet.append([float(stats.logdet_inv_c[b]) for b in range(lo, hi)])
        self.sum_quad = float(stats.quad.sum())
        self.sum_logdet = float(stats.logdet_inv_c.sum())
        self.n_blocks = stats.n_blocks

    @property
    def b_prime(self) -> float:
        return self.hyper.b + 0.5 * (self.xtx_total - self.sum_quad)

    def to_latent_stats(self) -> LatentStats:
        j_counts = np.fromiter((len(c) for c in self.inv_c), dtype=np.int64, count=len(self.inv_c))
        offsets = np.concatenate(([0], np.cumsum(j_counts)))
        k = self.hyper.k_latent
        n_blocks = int(offsets[-1])
        inv_c = np.zeros((n_blocks, k, k))
        obs_proj = np.zeros((n_blocks, k))
        quad = np.zeros(n_blocks)
        logdet = np.zeros(n_blocks)
        b = 0
        for n in range(len(self.inv_c)):
            for j in range(len(self.inv_c[n])):
                inv_c[b] = self.inv_c[n][j]
                obs_proj[b] = self.obs_proj[n][j]
                quad[b] = self.quad[n][j]
                logdet[b] = self.logdet[n][j]
                b += 1
        mu = np.linalg.solve(inv_c, obs_proj[..., None])[..., 0] if n_blocks else np.zeros((0, k))
        return LatentStats(
            offsets=offsets,
            inv_c=inv_c,
            mu=mu,
            obs_proj=obs_proj,
            quad=quad,
            logdet_inv_c=logdet,
            a_prime=self.a_prime,
            b_prime=self.b_prime,
        )

    def marginal_log_likelihood(self) -> float:
        n_cells = 2.0 * (self.a_prime - self.hyper.a)
        return (
            -0.5 * n_cells * _LOG_2PI
            + 0.5 * self.hyper.k_latent * self.n_blocks * math.log(self.hyper.r)
            + self.hyper.a * math.log(self.hyper.b)
            - self.a_prime * math.log(self.b_prime)
            + math.lgamma(self.a_prime)
            - math.lgamma(self.hyper.a)
            - 0.5 * self.sum_logdet
        )


def _chol_logdet_quad(inv_c: np.ndarray, h: np.ndarray) -> tuple[float, float]:
    """Log determinant of inv_c and the quadratic form h' inv_c^{-1} h."""
    chol = np.linalg.cholesky(inv_c)
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    y = solve_triangular(chol, h, lower=True, check_finite=False)
    return logdet, float(y @ y)


def resample_assignment(
    data: MultiViewDataset,
    state: AssignmentState,
    proj: ProjectionSet,
    hyper: Hyperparameters,
    stats: ChainStats,
    n: int,
    d: int,
    rng: np.random.Generator,
) -> tuple[int, np.ndarray]:
    """Resample the latent-vector assignment of view d of instance n.

    The view is detached from its block (deleting and compacting the block if
    it empties), the unnormalized log probability of every candidate block
    plus a fresh one is computed, one candidate is drawn, and the view is
    reattached. Returns the chosen block label and the unnormalized candidate
    log probabilities; each entry equals the log joint probability of the full
    data with that assignment minus the log joint probability with the view
    removed from the dataset.
    """
    k = hyper.k_latent
    n_views = state.n_views
    s_n = state.s[n]
    counts = state.counts[n]
    j_old = int(s_n[d])

    gram = stats.gram(n, d)
    pvec = stats.projections[d][n]
    m_obs = float(stats.cells_nd[n, d])
    xtx = float(stats.xtx_nd[n, d])

    inv_c_n = stats.inv_c[n]
    h_n = stats.obs_proj[n]
    quad_n = stats.quad[n]
    logdet_n = stats.logdet[n]

    # Detach the view from its current block.
    counts[j_old] -= 1
    if counts[j_old] == 0:
        counts.pop(j_old)
        inv_c_n.pop(j_old)
        h_n.pop(j_old)
        stats.sum_quad -= quad_n.pop(j_old)
        stats.sum_logdet -= logdet_n.pop(j_old)
        stats.n_blocks -= 1
        s_n[s_n > j_old] -= 1
    else:
        inv_c_n[j_old] = inv_c_n[j_old] - gram
        h_n[j_old] = h_n[j_old] - pvec
        logdet_new, quad_new = _chol_logdet_quad(inv_c_n[j_old], h_n[j_old])
        stats.sum_quad += quad_new - quad_n[j_old]
        stats.sum_logdet += logdet_new - logdet_n[j_old]
        quad_n[j_old] = quad_new
        logdet_n[j_old] = logdet_new

    n_existing = len(counts)
    a_full = stats.a_prime
    a_rem = a_full - 0.5 * m_obs
    b_rem = hyper.b + 0.5 * (stats.xtx_total - xtx - stats.sum_quad)

    base = (
        -0.5 * m_obs * _LOG_2PI
        + a_rem * math.log(b_rem)
        + math.lgamma(a_full)
        - math.lgamma(a_rem)
        - math.log(n_views - 1 + hyper.gamma_dp)
    )

    log_w = np.empty(n_existing + 1)
    cand: list[tuple[np.ndarray, np.ndarray, float, float]] = []
    for j in range(n_existing):
        inv_c_j = inv_c_n[j] + gram
        h_j = h_n[j] + pvec
        logdet_j, quad_j = _chol_logdet_quad(inv_c_j, h_j)
        b_j = b_rem + 0.5 * (xtx + quad_n[j] - quad_j)
        log_w[j] = (
            base
            + math.log(counts[j])
            - a_full * math.log(b_j)
            + 0.5 * (logdet_n[j] - logdet_j)
        )
        cand.append((inv_c_j, h_j, quad_j, logdet_j))

    inv_c_new = gram + hyper.r * np.eye(k)
    logdet_new, quad_new = _chol_logdet_quad(inv_c_new, pvec)
    b_new = b_rem + 0.5 * (xtx - quad_new)
    log_w[n_existing] = (
        base
        + math.log(hyper.gamma_dp)
        + 0.5 * k * math.log(hyper.r)
        - a_full * math.log(b_new)
        - 0.5 * logdet_new
    )
    cand.append((inv_c_new, pvec.copy(), quad_new, logdet_new))

    weights = np.exp(log_w - log_w.max())
    cum = np.cumsum(weights)
    j_pick = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), n_existing)

    inv_c_j, h_j, quad_j, logdet_j = cand[j_pick]
    if j_pick == n_existing:
        counts.append(1)
        inv_c_n.append(inv_c_j)
        h_n.append(h_j)
        quad_n.append(quad_j)
        logdet_n.append(logdet_j)
        stats.n_blocks += 1
    else:
        counts[j_pick] += 1
        stats.sum_quad -= quad_n[j_pick]
        stats.sum_logdet -= logdet_n[j_pick]
        inv_c_n[j_pick] = inv_c_j
        h_n[j_pick] = h_j
        quad_n[j_pick] = quad_j
        logdet_n[j_pick] = logdet_j
    stats.sum_quad += quad_j
    stats.sum_logdet += logdet_j
    s_n[d] = j_pick
    return j_pick, log_w


def gibbs_sweep(
    data: MultiViewDataset,
    state: AssignmentState,
    proj: ProjectionSet,
    hyper: Hyperparameters,
    stats: ChainStats,
    rng: np.random.Generator,
    random_scan: bool = False,
) -> None:
    """Resample every view's assignment once.

    The default scan order is instance-major, view-minor, which keeps runs
    reproducible; ``random_scan`` permutes the order using the same generator.
    """
    n, d = state.n_instances, state.n_views
    if random_scan:
        for idx in rng.permutation(n * d):
            resample_assignment(data, state, proj, hyper, stats, int(idx) // d, int(idx) % d, rng)
    else:
        for i in range(n):
            for j in range(d):
                resample_assignment(data, state, proj, hyper, stats, i, j, rng)


def _view_gradient(
    data: MultiViewDataset,
    state: AssignmentState,
    stats: LatentStats,
    proj: ProjectionSet,
    hyper: Hyperparameters,
    d: int,
    cov: np.ndarray,
) -> np.ndarray:
    """Gradient of the joint log likelihood w.r.t. one projection matrix."""
    w = proj.weights[d]
    block_idx = stats.offsets[:-1] + state.s[:, d]
    cov_d = cov[block_idx]
    mu_d = stats.mu[block_idx]
    ratio = stats.a_prime / stats.b_prime

    grad = -(w @ cov_d.sum(axis=0)) - ratio * (w @ (mu_d.T @ mu_d) - data.filled[d].T @ mu_d)
    mask = data.masks[d]
    if not mask.all():
        # Rows unobserved for an instance contribute nothing from it; the
        # zero-filled data already drops the x-side, fix the W-side here.
        for i in np.nonzero(~mask.all(axis=1))[0]:
            miss = ~mask[i]
            grad[miss] += w[miss] @ (cov_d[i] + ratio * np.outer(mu_d[i], mu_d[i]))
    return grad


def mstep_gradient(
    data: MultiViewDataset,
    state: AssignmentState,
    stats: LatentStats,
    proj: ProjectionSet,
    hyper: Hyperparameters,
    d: int,
) -> np.ndarray:
    """Exact gradient of the joint log likelihood w.r.t. projection matrix d.

    ``stats`` must be current for (state, proj). The log-determinant term only
    involves the block each view is actually assigned to, so the first sum
    runs over those blocks; the remaining blocks do not depend on W_d.
    """
    cov = np.linalg.inv(stats.inv_c)
    return _view_gradient(data, state, stats, proj, hyper, d, cov)


def _joint_and_gradients(
    data: MultiViewDataset,
    state: AssignmentState,
    proj: ProjectionSet,
    hyper: Hyperparameters,
    partition_term: float,
) -> tuple[float, list[np.ndarray]]:
    stats = compute_latent_stats(data, state, proj, hyper)
    value = marginal_log_likelihood_from_stats(stats, hyper) + partition_term
    cov = np.linalg.inv(stats.inv_c)
    grads = [
        _view_gradient(data, state, stats, proj, hyper, d, cov) for d in range(data.n_views)
    ]
    return value, grads


@dataclass
class MStepResult:
    proj: ProjectionSet
    value: float
    n_iter: int
    grad_max: float
    improved: bool


def mstep_optimize(
    data: MultiViewDataset,
    state: AssignmentState,
    stats: LatentStats | None,
    hyper: Hyperparameters,
    proj: ProjectionSet,
    config: InferenceConfig,
) -> MStepResult:
    """Maximize the joint log likelihood over all projection matrices.

    Runs bounded L-BFGS from the current weights and returns whichever of the
    start and end points has the higher joint log likelihood, so the objective
    never decreases. On any numerical failure the incoming weights are
    returned unchanged.
    """
    partition_term = partition_log_prior(state, hyper.gamma_dp)
    shapes = [w.shape for w in proj.weights]
    splits = np.cumsum([int(np.prod(s)) for s in shapes])[:-1]

    def unpack(x: np.ndarray) -> ProjectionSet:
        return ProjectionSet(
            [part.reshape(shape) for part, shape in zip(np.split(x, splits), shapes)]
        )

    def negative(x: np.ndarray) -> tuple[float, np.ndarray]:
        value, grads = _joint_and_gradients(data, state, unpack(x), hyper, partition_term)
        return -value, -np.concatenate([g.ravel() for g in grads])

    x0 = np.concatenate([w.ravel() for w in proj.weights])
    try:
        f0, g0 = negative(x0)
        res = minimize(
            negative,
            x0,
            jac=True,
            method="L-BFGS-B",
            options={
                "maxiter": config.mstep_max_iters,
                "ftol": 0.0,
                "gtol": config.mstep_grad_tol,
            },
        )
        improved = bool(np.isfinite(res.fun) and res.fun < f0)
        if improved:
            return MStepResult(
                proj=unpack(res.x),
                value=-float(res.fun),
                n_iter=int(res.nit),
                grad_max=float(np.abs(res.jac).max()),
                improved=True,
            )
        return MStepResult(
            proj=proj,
            value=-f0,
            n_iter=int(res.nit),
            grad_max=float(np.abs(g0).max()),
            improved=False,
        )
    except np.linalg.LinAlgError:
        return MStepResult(proj=proj, value=float("nan"), n_iter=0, grad_max=float("nan"), improved=False)


def run_stochastic_em(
    data: MultiViewDataset,
    hyper: Hyperparameters,
    config: InferenceConfig,
    callback=None,
) -> tuple[ProjectionSet, GibbsTrace]:
    """Fit the model by alternating collapsed Gibbs sweeps and M-steps.

    Weights start from i.i.d. Gaussian entries and every instance starts with
    a single latent vector, so extra latent vectors must earn their place
    through the likelihood. ``callback(sweep, state, proj, stats)`` is invoked
    after every retained sweep. Fixed seed and inputs give identical traces.
    """
    rng = np.random.default_rng(config.seed)
    k = hyper.k_latent
    init_scale = config.init_scale if config.init_scale is not None else 1.0 / math.sqrt(k)
    proj = ProjectionSet(
        [init_scale * rng.standard_normal((m, k)) for m in data.view_dims]
    )
    state = AssignmentState.single_block(data.n_instances, data.n_views)
    stats = ChainStats(data, state, proj, hyper)

    n_retained = config.n_sweeps - config.burn_in
    latent_counts = np.zeros((n_retained, data.n_instances), dtype=np.int64)
    joint_log_lik = np.zeros(n_retained)
    assignments = (
        np.zeros((n_retained, data.n_instances, data.n_views), dtype=np.int16)
        if config.store_assignments
        else None
    )

    for sweep in range(1, config.n_sweeps + 1):
        if config.sample_assignments:
            gibbs_sweep(data, state, proj, hyper, stats, rng, config.random_scan)
        if sweep % config.mstep_every == 0:
            result = mstep_optimize(data, state, None, hyper, proj, config)
            proj = result.proj
            stats.set_projections(proj)
            stats.rebuild(state)
        if sweep > config.burn_in:
            h = sweep - config.burn_in - 1
            latent_counts[h] = state.latent_counts()
            joint_log_lik[h] = (
                partition_log_prior(state, hyper.gamma_dp) + stats.marginal_log_likelihood()
            )
            if assignments is not None:
                assignments[h] = state.s
            if callback is not None:
                callback(sweep, state, proj, stats)

    trace = GibbsTrace(
        n_sweeps=config.n_sweeps,
        burn_in=config.burn_in,
        latent_counts=latent_counts,
        joint_log_lik=joint_log_lik,
        assignments=assignments,
    )
    return proj, trace


def anomaly_scores(trace: GibbsTrace) -> AnomalyScores:
    """Fraction of retained sweeps in which each instance used more than one
    latent vector."""
    if trace.n_retained < 1:
        raise ValueError("trace has no retained sweeps")
    return AnomalyScores(values=(trace.latent_counts > 1).mean(axis=0))


def pcca_baseline_scores(
    data: MultiViewDataset,
    hyper: Hyperparameters,
    config: InferenceConfig,
    normalize: bool = True,
) -> np.ndarray:
    """Reconstruction-error anomaly scores of the single-latent-vector model.

    Fits with assignments pinned to one latent vector per instance (the
    probabilistic-CCA degeneration, whose multi-latent anomaly scores would be
    identically zero) and scores each instance by its squared reconstruction
    error over observed cells, averaged over retained sweeps. With
    ``normalize`` the error is divided by the instance's total squared norm,
    which makes the score scale-free.
    """
    cfg = replace(config, sample_assignments=False, store_assignments=False)
    n = data.n_instances
    err = np.zeros(n)

    def accumulate(sweep, state, proj, stats):
        latent = stats.to_latent_stats()
        mu = latent.mu  # one block per instance, in instance order
        for d in range(data.n_views):
            resid = (data.filled[d] - mu @ proj.weights[d].T) * data.masks[d]
            err[:] += np.einsum("nm,nm->n", resid, resid)

    run_stochastic_em(data, hyper, cfg, callback=accumulate)
    err /= cfg.n_sweeps - cfg.burn_in
    if normalize:
        xtx = data.squared_sums.sum(axis=1)
        return err / np.maximum(xtx, np.finfo(float).tiny)
    return err
