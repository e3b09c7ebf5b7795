"""Collapsed multi-view latent variable model: domain types and closed-form probabilities.

Every instance owns one or more latent vectors; each of its views is generated
from one of them through a view-specific linear map with spherical noise. The
mixture weights, the latent vectors and the shared noise precision are
conjugate and integrated out analytically, so the model state reduces to the
per-view assignments plus the projection matrices. This module holds the data
types and the exact collapsed probability computations; sampling and
optimization live in :mod:`mvanomaly.inference`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Hyperparameters:
    """Prior parameters of the collapsed model.

    a, b      shape and rate of the Gamma prior on the shared noise precision
    r         precision of latent vectors relative to the noise precision
    gamma_dp  Dirichlet-process concentration; larger values make it easier
              for an instance to acquire extra latent vectors
    k_latent  dimensionality of the shared latent space
    """

    k_latent: int
    a: float = 1.0
    b: float = 1.0
    r: float = 1.0
    gamma_dp: float = 1.0

    def __post_init__(self):
        if not (isinstance(self.k_latent, (int, np.integer)) and self.k_latent >= 1):
            raise ValueError(f"k_latent must be a positive integer, got {self.k_latent!r}")
        for name in ("a", "b", "r", "gamma_dp"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be strictly positive, got {value!r}")


class MultiViewDataset:
    """N instances observed in D views, each view a real matrix with a mask.

    ``views[d]`` is an (N, M_d) array; ``masks[d]`` is a boolean array of the
    same shape, True where the cell is observed. Missing cells are ignored by
    every likelihood computation (their stored values are irrelevant).
    ``labels``, when present, mark injected anomalies and are used only for
    evaluation. Instances are treated as immutable after construction.
    """

    def __init__(self, views, masks=None, labels=None):
        self.views = [np.array(v, dtype=np.float64, copy=True, order="C") for v in views]
        if len(self.views) == 0:
            raise ValueError("dataset needs at least one view")
        n = self.views[0].shape[0] if self.views[0].ndim == 2 else -1
        for d, v in enumerate(self.views):
            if v.ndim != 2:
                raise ValueError(f"view {d} must be a 2-D matrix, got shape {v.shape}")
            if v.shape[0] != n:
                raise ValueError(f"view {d} has {v.shape[0]} rows, expected {n}")
            if v.shape[1] < 1:
                raise ValueError(f"view {d} has no features")
        if masks is None:
            self.masks = [np.ones(v.shape, dtype=bool) for v in self.views]
        else:
            self.masks = [np.array(m, dtype=bool, copy=True, order="C") for m in masks]
            if len(self.masks) != len(self.views):
                raise ValueError("need one mask per view")
            for d, (v, m) in enumerate(zip(self.views, self.masks)):
                if m.shape != v.shape:
                    raise ValueError(f"mask {d} shape {m.shape} != view shape {v.shape}")
        for d, (v, m) in enumerate(zip(self.views, self.masks)):
            if not np.isfinite(v[m]).all():
                raise ValueError(f"view {d} has non-finite observed values")
        if labels is not None:
            labels = np.asarray(labels, dtype=bool)
            if labels.shape != (n,):
                raise ValueError(f"labels must have length {n}, got shape {labels.shape}")
        self.labels = labels

    @property
    def n_instances(self) -> int:
        return self.views[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def view_dims(self) -> list[int]:
        return [v.shape[1] for v in self.views]

    @property
    def fully_observed(self) -> bool:
        return all(m.all() for m in self.masks)

    @cached_property
    def filled(self) -> list[np.ndarray]:
        """Views with missing cells zeroed, safe for projection sums."""
        return [np.where(m, v, 0.0) for v, m in zip(self.views, self.masks)]

    @cached_property
    def observed_counts(self) -> np.ndarray:
        """(N, D) number of observed cells per instance and view."""
        return np.stack([m.sum(axis=1) for m in self.masks], axis=1).astype(np.int64)

    @cached_property
    def squared_sums(self) -> np.ndarray:
        """(N, D) sum of squared observed values per instance and view."""
        return np.stack(
            [np.sum(np.where(m, v, 0.0) ** 2, axis=1) for v, m in zip(self.views, self.masks)],
            axis=1,
        )

    @property
    def n_observed_cells(self) -> int:
        return int(self.observed_counts.sum())

    def replace_views(self, views, masks=None) -> "MultiViewDataset":
        return MultiViewDataset(views, self.masks if masks is None else masks, self.labels)


@dataclass
class ProjectionSet:
    """One (M_d, K) linear map per view from latent space to observation space."""

    weights: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        if len(self.weights) == 0:
            raise ValueError("need at least one projection matrix")
        k = self.weights[0].shape[1] if self.weights[0].ndim == 2 else -1
        for d, w in enumerate(self.weights):
            if w.ndim != 2 or w.shape[1] != k:
                raise ValueError(f"projection {d} must have {k} columns, got shape {w.shape}")
            if not np.isfinite(w).all():
                raise ValueError(f"projection {d} has non-finite entries")

    @property
    def k_latent(self) -> int:
        return self.weights[0].shape[1]

    def copy(self) -> "ProjectionSet":
        return ProjectionSet([w.copy() for w in self.weights])


class AssignmentState:
    """Per-view latent-vector assignments with per-instance block bookkeeping.

    Labels are 0-based and compact: instance n uses labels 0..J_n-1 and every
    label is used by at least one view. ``counts[n][j]`` is the number of
    views of instance n assigned to latent vector j.
    """

    def __init__(self, assignments):
        s = np.array(assignments, dtype=np.int64, copy=True)
        if s.ndim != 2:
            raise ValueError(f"assignments must be (N, D), got shape {s.shape}")
        if s.shape[1] < 1:
            raise ValueError("assignments need at least one view")
        counts: list[list[int]] = []
        for n in range(s.shape[0]):
            row = s[n]
            if row.min(initial=0) < 0:
                raise ValueError(f"instance {n} has a negative label")
            bc = np.bincount(row, minlength=row.max(initial=0) + 1)
            if (bc == 0).any():
                raise ValueError(f"instance {n} labels are not compact: counts {bc.tolist()}")
            counts.append([int(c) for c in bc])
        self.s = s
        self.counts = counts

    @classmethod
    def single_block(cls, n_instances: int, n_views: int) -> "AssignmentState":
        """All views of every instance share one latent vector."""
        return cls(np.zeros((n_instances, n_views), dtype=np.int64))

    @classmethod
    def all_distinct(cls, n_instances: int, n_views: int) -> "AssignmentState":
        """Every view of every instance gets its own latent vector."""
        return cls(np.tile(np.arange(n_views, dtype=np.int64), (n_instances, 1)))

    @property
    def n_instances(self) -> int:
        return self.s.shape[0]

    @property
    def n_views(self) -> int:
        return self.s.shape[1]

    def latent_counts(self) -> np.ndarray:
        """(N,) number of latent vectors J_n in use per instance."""
        return np.fromiter((len(c) for c in self.counts), dtype=np.int64, count=len(self.counts))

    def total_blocks(self) -> int:
        return sum(len(c) for c in self.counts)

    def copy(self) -> "AssignmentState":
        out = AssignmentState.__new__(AssignmentState)
        out.s = self.s.copy()
        out.counts = [list(c) for c in self.counts]
        return out


@dataclass
class LatentStats:
    """Collapsed posterior statistics for every occupied (instance, block) pair.

    Blocks are stored flat in instance-major order; ``offsets[n]:offsets[n+1]``
    are the rows of instance n. ``inv_c`` holds the posterior precision of each
    latent vector up to the shared noise-precision scale, ``mu`` the posterior
    mean, and (a_prime, b_prime) the Gamma posterior of the noise precision.
    ``obs_proj`` and ``quad`` cache the per-block projected observations and
    the quadratic form mu' inv_c mu used by b_prime.
    """

    offsets: np.ndarray
    inv_c: np.ndarray
    mu: np.ndarray
    obs_proj: np.ndarray
    quad: np.ndarray
    logdet_inv_c: np.ndarray
    a_prime: float
    b_prime: float

    @property
    def n_blocks(self) -> int:
        return int(self.offsets[-1])

    def block_index(self, n: int, j: int) -> int:
        lo, hi = int(self.offsets[n]), int(self.offsets[n + 1])
        if not 0 <= j < hi - lo:
            raise IndexError(f"instance {n} has {hi - lo} latent vectors, no block {j}")
        return lo + j


def partition_log_prior(state: AssignmentState, gamma_dp: float) -> float:
    """Log prior probability of the per-instance view partitions.

    Each instance is an exchangeable partition of its D views with
    concentration ``gamma_dp``; the value depends only on block sizes.
    """
    if not gamma_dp > 0:
        raise ValueError(f"gamma_dp must be strictly positive, got {gamma_dp!r}")
    d = state.n_views
    log_gamma = math.log(gamma_dp)
    denom = float(np.log(gamma_dp + np.arange(d)).sum())
    total = 0.0
    for counts in state.counts:
        total += len(counts) * log_gamma + float(gammaln(np.asarray(counts)).sum()) - denom
    return total


def compute_latent_stats(
    data: MultiViewDataset,
    state: AssignmentState,
    proj: ProjectionSet,
    hyper: Hyperparameters,
) -> LatentStats:
    """Recompute all per-block posterior statistics from scratch.

    For views with missing cells, the projection matrix is restricted to the
    observed rows before forming Gram matrices and projections, and only
    observed cells count toward a_prime. Raises ``numpy.linalg.LinAlgError``
    if a posterior precision fails its Cholesky factorization, which cannot
    happen for finite inputs with r > 0.
    """
    k = hyper.k_latent
    n = data.n_instances
    if state.n_instances != n or state.n_views != data.n_views:
        raise ValueError("assignment state shape does not match dataset")
    for d, w in enumerate(proj.weights):
        if w.shape != (data.view_dims[d], k):
            raise ValueError(
                f"projection {d} has shape {w.shape}, expected {(data.view_dims[d], k)}"
            )

    j_counts = state.latent_counts()
    offsets = np.concatenate(([0], np.cumsum(j_counts)))
    n_blocks = int(offsets[-1])

    inv_c = np.zeros((n_blocks, k, k))
    inv_c[:] = hyper.r * np.eye(k)
    obs_proj = np.zeros((n_blocks, k))
    for d in range(data.n_views):
        w = proj.weights[d]
        block_idx = offsets[:-1] + state.s[:, d]
        np.add.at(inv_c, block_idx, w.T @ w)
        np.add.at(obs_proj, block_idx, data.filled[d] @ w)
        mask = data.masks[d]
        if not mask.all():
            for i in np.nonzero(~mask.all(axis=1))[0]:
                w_miss = w[~mask[i]]
                inv_c[block_idx[i]] -= w_miss.T @ w_miss

    if n_blocks:
        chol = np.linalg.cholesky(inv_c)
        logdet_inv_c = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        mu = np.linalg.solve(inv_c, obs_proj[..., None])[..., 0]
    else:
        logdet_inv_c = np.zeros(0)
        mu = np.zeros((0, k))
    quad = np.einsum("bk,bk->b", obs_proj, mu)

    a_prime = hyper.a + 0.5 * data.n_observed_cells
    b_prime = hyper.b + 0.5 * (float(data.squared_sums.sum()) - float(quad.sum()))
    return LatentStats(
        offsets=offsets,
        inv_c=inv_c,
        mu=mu,
        obs_proj=obs_proj,
        quad=quad,
        logdet_inv_c=logdet_inv_c,
        a_prime=a_prime,
        b_prime=b_prime,
    )


def marginal_log_likelihood_from_stats(stats: LatentStats, hyper: Hyperparameters) -> float:
    """Collapsed log likelihood of the observations given assignments and weights."""
    n_cells = 2.0 * (stats.a_prime - hyper.a)
    return (
        -0.5 * n_cells * _LOG_2PI
        + 0.5 * hyper.k_latent * stats.n_blocks * math.log(hyper.r)
        + hyper.a * math.log(hyper.b)
        - stats.a_prime * math.log(stats.b_prime)
        + math.lgamma(stats.a_prime)
        - math.lgamma(hyper.a)
        - 0.5 * float(stats.logdet_inv_c.sum())
    )


def marginal_log_likelihood(
    data: MultiViewDataset,
    state: AssignmentState,
    proj: ProjectionSet,
    hyper: Hyperparameters,
) -> float:
    """Log of the observation likelihood with latent vectors, mixture weights
    and the noise precision integrated out, at fixed assignments and weights."""
    stats = compute_latent_stats(data, state, proj, hyper)
    return marginal_log_likelihood_from_stats(stats, hyper)


def joint_log_likelihood(
    data: MultiViewDataset,
    state: AssignmentState,
    proj: ProjectionSet,
    hyper: Hyperparameters,
) -> float:
    """Log joint probability of observations and assignments."""
    return partition_log_prior(state, hyper.gamma_dp) + marginal_log_likelihood(
        data, state, proj, hyper
    )


def alpha_posterior(stats: LatentStats) -> tuple[float, float]:
    """Gamma posterior (shape, rate) of the shared noise precision."""
    return stats.a_prime, stats.b_prime


def latent_posterior(stats: LatentStats, n: int, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance scale of latent vector j of instance n.

    The returned covariance must still be divided by the noise precision; use
    the mean a_prime / b_prime of :func:`alpha_posterior` for a point estimate.
    """
    b = stats.block_index(n, j)
    chol = np.linalg.cholesky(stats.inv_c[b])
    inv_chol = solve_triangular(chol, np.eye(chol.shape[0]), lower=True, check_finite=False)
    cov = inv_chol.T @ inv_chol
    return stats.mu[b].copy(), 0.5 * (cov + cov.T)
