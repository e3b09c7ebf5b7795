"""Core model tests: partition prior, collapsed statistics, marginal likelihood."""

import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import gamma as gamma_dist

from mvanomaly import (
    AssignmentState,
    Hyperparameters,
    MultiViewDataset,
    ProjectionSet,
    alpha_posterior,
    compute_latent_stats,
    joint_log_likelihood,
    latent_posterior,
    marginal_log_likelihood,
    partition_log_prior,
)


def set_partitions(n):
    """All set partitions of range(n), as lists of blocks."""
    if n == 1:
        yield [[0]]
        return
    for part in set_partitions(n - 1):
        for i in range(len(part)):
            yield part[:i] + [part[i] + [n - 1]] + part[i + 1 :]
        yield part + [[n - 1]]


def state_from_blocks(blocks, n_views):
    s = np.zeros((1, n_views), dtype=int)
    for j, block in enumerate(blocks):
        for v in block:
            s[0, v] = j
    return AssignmentState(s)


def random_dataset(rng, n=4, dims=(3, 2, 4), missing=0.0):
    views = [rng.standard_normal((n, m)) for m in dims]
    masks = None
    if missing > 0:
        masks = [rng.random((n, m)) > missing for m in dims]
    return MultiViewDataset(views, masks)


def random_state(rng, n_instances, n_views):
    s = np.zeros((n_instances, n_views), dtype=int)
    for i in range(n_instances):
        labels = [0]
        for _ in range(n_views - 1):
            labels.append(int(rng.integers(0, max(labels) + 2)))
        relabel = {v: k for k, v in enumerate(dict.fromkeys(labels))}
        s[i] = [relabel[v] for v in labels]
    return AssignmentState(s)


class TestPartitionLogPrior:
    def test_two_views_together(self):
        state = AssignmentState([[0, 0]])
        assert partition_log_prior(state, 1.0) == pytest.approx(math.log(0.5), abs=1e-14)

    def test_two_views_apart(self):
        state = AssignmentState([[0, 1]])
        # together and apart are the only options; gamma=1 makes them equal
        assert partition_log_prior(state, 1.0) == pytest.approx(math.log(0.5), abs=1e-14)

    def test_three_views_together(self):
        state = AssignmentState([[0, 0, 0]])
        assert partition_log_prior(state, 1.0) == pytest.approx(math.log(1 / 3), abs=1e-14)

    @pytest.mark.parametrize("n_views", [2, 3, 4])
    @pytest.mark.parametrize("gamma_dp", [0.5, 1.0, 2.0])
    def test_sums_to_one_over_set_partitions(self, n_views, gamma_dp):
        total = sum(
            math.exp(partition_log_prior(state_from_blocks(blocks, n_views), gamma_dp))
            for blocks in set_partitions(n_views)
        )
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_invariant_under_view_permutation(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            state = random_state(rng, 1, 5)
            perm = rng.permutation(5)
            permuted = AssignmentState(state.s[:, perm])
            for gamma_dp in (0.4, 1.0, 3.0):
                assert partition_log_prior(permuted, gamma_dp) == pytest.approx(
                    partition_log_prior(state, gamma_dp), rel=1e-14
                )

    def test_sums_over_instances(self):
        one = AssignmentState([[0, 1, 1]])
        other = AssignmentState([[0, 0, 1]])
        both = AssignmentState([[0, 1, 1], [0, 0, 1]])
        assert partition_log_prior(both, 1.3) == pytest.approx(
            partition_log_prior(one, 1.3) + partition_log_prior(other, 1.3), rel=1e-14
        )

    def test_rejects_nonpositive_concentration(self):
        state = AssignmentState([[0, 0]])
        with pytest.raises(ValueError):
            partition_log_prior(state, 0.0)
        with pytest.raises(ValueError):
            partition_log_prior(state, -1.0)


class TestAssignmentState:
    def test_rejects_non_compact_labels(self):
        with pytest.raises(ValueError):
            AssignmentState([[0, 2]])  # label 1 unused

    def test_rejects_negative_labels(self):
        with pytest.raises(ValueError):
            AssignmentState([[0, -1]])

    def test_counts_and_latent_counts(self):
        state = AssignmentState([[0, 1, 0], [0, 0, 0]])
        assert state.counts == [[2, 1], [3]]
        assert state.latent_counts().tolist() == [2, 1]

    def test_single_block_and_all_distinct(self):
        assert AssignmentState.single_block(3, 4).latent_counts().tolist() == [1, 1, 1]
        assert AssignmentState.all_distinct(3, 4).latent_counts().tolist() == [4, 4, 4]


class TestComputeLatentStats:
    def test_identity_projection_zero_data(self):
        data = MultiViewDataset([np.zeros((1, 2))])
        proj = ProjectionSet([np.eye(2)])
        hyper = Hyperparameters(k_latent=2, r=1.0)
        stats = compute_latent_stats(data, AssignmentState([[0]]), proj, hyper)
        np.testing.assert_allclose(stats.inv_c[0], 2.0 * np.eye(2))
        np.testing.assert_allclose(stats.mu[0], np.zeros(2))

    def test_zero_projection_zero_data(self):
        data = MultiViewDataset([np.zeros((1, 2))])
        proj = ProjectionSet([np.zeros((2, 3))])
        hyper = Hyperparameters(k_latent=3)
        stats = compute_latent_stats(data, AssignmentState([[0]]), proj, hyper)
        assert stats.a_prime == pytest.approx(2.0)
        assert stats.b_prime == pytest.approx(1.0)
        np.testing.assert_allclose(stats.mu[0], np.zeros(3))
        np.testing.assert_allclose(stats.inv_c[0], np.eye(3))

    def test_b_prime_matches_ridge_residual(self):
        # b' - b is half the summed ridge-regularized least-squares residual,
        # one problem per latent vector: min_z sum_d ||x_d - W_d z||^2 + r||z||^2.
        rng = np.random.default_rng(42)
        for _ in range(10):
            data = random_dataset(rng, n=3, dims=(3, 3))
            state = random_state(rng, 3, 2)
            r = float(rng.uniform(0.3, 2.0))
            hyper = Hyperparameters(k_latent=2, r=r)
            proj = ProjectionSet([rng.standard_normal((3, 2)) for _ in range(2)])
            stats = compute_latent_stats(data, state, proj, hyper)

            residual = 0.0
            for n in range(3):
                blocks = {}
                for d, j in enumerate(state.s[n]):
                    blocks.setdefault(int(j), []).append(d)
                for views in blocks.values():
                    a = np.vstack([proj.weights[d] for d in views] + [math.sqrt(r) * np.eye(2)])
                    y = np.concatenate([data.views[d][n] for d in views] + [np.zeros(2)])
                    z, res, *_ = np.linalg.lstsq(a, y, rcond=None)
                    residual += float(np.sum((a @ z - y) ** 2))
            assert stats.b_prime == pytest.approx(hyper.b + 0.5 * residual, rel=1e-9)

    def test_b_prime_never_below_prior(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            data = random_dataset(rng, missing=0.3)
            state = random_state(rng, 4, 3)
            hyper = Hyperparameters(k_latent=2, b=float(rng.uniform(0.2, 3.0)))
            proj = ProjectionSet([rng.standard_normal((m, 2)) for m in (3, 2, 4)])
            stats = compute_latent_stats(data, state, proj, hyper)
            assert stats.b_prime >= hyper.b - 1e-12

    def test_inv_c_eigenvalues_at_least_r(self):
        rng = np.random.default_rng(6)
        data = random_dataset(rng, missing=0.2)
        state = random_state(rng, 4, 3)
        hyper = Hyperparameters(k_latent=2, r=0.8)
        proj = ProjectionSet([rng.standard_normal((m, 2)) for m in (3, 2, 4)])
        stats = compute_latent_stats(data, state, proj, hyper)
        for block in stats.inv_c:
            assert np.linalg.eigvalsh(block).min() >= hyper.r - 1e-10

    def test_adding_view_grows_precision_psd(self):
        rng = np.random.default_rng(7)
        data = random_dataset(rng, n=1, dims=(3, 4))
        hyper = Hyperparameters(k_latent=2)
        proj = ProjectionSet([rng.standard_normal((m, 2)) for m in (3, 4)])
        merged = compute_latent_stats(data, AssignmentState([[0, 0]]), proj, hyper)
        split = compute_latent_stats(data, AssignmentState([[0, 1]]), proj, hyper)
        gap = merged.inv_c[0] - split.inv_c[0]
        assert np.linalg.eigvalsh(gap).min() >= -1e-10

    def test_missing_rows_are_excluded(self):
        # masking a row must equal deleting it from both the data and the map
        rng = np.random.default_rng(8)
        x = rng.standard_normal((1, 4))
        w = rng.standard_normal((4, 2))
        mask = np.array([[True, False, True, True]])
        hyper = Hyperparameters(k_latent=2)
        masked = compute_latent_stats(
            MultiViewDataset([x], [mask]), AssignmentState([[0]]), ProjectionSet([w]), hyper
        )
        reduced = compute_latent_stats(
            MultiViewDataset([x[:, mask[0]]]),
            AssignmentState([[0]]),
            ProjectionSet([w[mask[0]]]),
            hyper,
        )
        np.testing.assert_allclose(masked.inv_c, reduced.inv_c, atol=1e-12)
        np.testing.assert_allclose(masked.mu, reduced.mu, atol=1e-12)
        assert masked.a_prime == reduced.a_prime
        assert masked.b_prime == pytest.approx(reduced.b_prime, rel=1e-12)


class TestMarginalLogLikelihood:
    def test_zero_projection_zero_data_constant(self):
        data = MultiViewDataset([np.zeros((1, 2))])
        proj = ProjectionSet([np.zeros((2, 3))])
        hyper = Hyperparameters(k_latent=3)
        value = marginal_log_likelihood(data, AssignmentState([[0]]), proj, hyper)
        assert value == pytest.approx(-math.log(2 * math.pi), abs=1e-12)

    def test_joint_is_partition_plus_marginal(self):
        rng = np.random.default_rng(9)
        data = random_dataset(rng)
        state = random_state(rng, 4, 3)
        hyper = Hyperparameters(k_latent=2, gamma_dp=1.7)
        proj = ProjectionSet([rng.standard_normal((m, 2)) for m in (3, 2, 4)])
        assert joint_log_likelihood(data, state, proj, hyper) == pytest.approx(
            partition_log_prior(state, hyper.gamma_dp)
            + marginal_log_likelihood(data, state, proj, hyper),
            rel=1e-14,
        )

    @staticmethod
    def quadrature_log_marginal(data, state, proj, hyper, n_grid=40000):
        """Independent check: exact Gaussian integral over the latent vectors
        composed with log-grid quadrature over the noise precision."""
        blocks = {}
        for d, j in enumerate(state.s[0]):
            blocks.setdefault(int(j), []).append(d)
        covs, xs = [], []
        for views in blocks.values():
            w = np.vstack([proj.weights[d][data.masks[d][0]] for d in views])
            x = np.concatenate([data.views[d][0][data.masks[d][0]] for d in views])
            covs.append(np.eye(len(x)) + w @ w.T / hyper.r)
            xs.append(x)

        def log_px_given_precision(alpha):
            total = 0.0
            for cov, x in zip(covs, xs):
                scaled = cov / alpha
                _, logdet = np.linalg.slogdet(scaled)
                quad = x @ np.linalg.solve(scaled, x)
                total += -0.5 * (len(x) * math.log(2 * math.pi) + logdet + quad)
            return total

        grid = np.exp(np.linspace(math.log(1e-8), math.log(1e8), n_grid))
        log_f = np.array(
            [
                gamma_dist.logpdf(al, hyper.a, scale=1.0 / hyper.b)
                + log_px_given_precision(al)
                for al in grid
            ]
        )
        return logsumexp(log_f + np.log(np.gradient(grid)))

    @pytest.mark.parametrize("assignment", [[[0, 0]], [[0, 1]]])
    def test_matches_quadrature_tiny_cases(self, assignment):
        rng = np.random.default_rng(11)
        for _ in range(3):
            data = MultiViewDataset([rng.standard_normal((1, 2)) for _ in range(2)])
            hyper = Hyperparameters(
                k_latent=1,
                a=float(rng.uniform(0.5, 3)),
                b=float(rng.uniform(0.5, 3)),
                r=float(rng.uniform(0.5, 2)),
            )
            proj = ProjectionSet([rng.standard_normal((2, 1)) for _ in range(2)])
            state = AssignmentState(assignment)
            exact = marginal_log_likelihood(data, state, proj, hyper)
            approx = self.quadrature_log_marginal(data, state, proj, hyper)
            assert exact == pytest.approx(approx, abs=1e-3)

    def test_pinned_single_block_equals_concatenated_views(self):
        # with every view on one latent vector the model is the same as a
        # single concatenated view run through the identical formula
        rng = np.random.default_rng(12)
        dims = (3, 2, 4)
        data = random_dataset(rng, n=5, dims=dims)
        hyper = Hyperparameters(k_latent=2)
        weights = [rng.standard_normal((m, 2)) for m in dims]
        pinned = marginal_log_likelihood(
            data, AssignmentState.single_block(5, 3), ProjectionSet(weights), hyper
        )
        stacked = marginal_log_likelihood(
            MultiViewDataset([np.hstack(data.views)]),
            AssignmentState.single_block(5, 1),
            ProjectionSet([np.vstack(weights)]),
            hyper,
        )
        assert pinned == pytest.approx(stacked, rel=1e-9, abs=1e-9)

    def test_all_distinct_logdet_decomposes_per_view(self):
        # with every view on its own latent vector the log-determinant sum
        # splits into independent per-view single-view terms
        rng = np.random.default_rng(13)
        dims = (3, 2, 4)
        data = random_dataset(rng, n=5, dims=dims)
        hyper = Hyperparameters(k_latent=2)
        weights = [rng.standard_normal((m, 2)) for m in dims]
        full = compute_latent_stats(
            data, AssignmentState.all_distinct(5, 3), ProjectionSet(weights), hyper
        )
        per_view = 0.0
        for d in range(3):
            single = compute_latent_stats(
                MultiViewDataset([data.views[d]]),
                AssignmentState.single_block(5, 1),
                ProjectionSet([weights[d]]),
                hyper,
            )
            per_view += float(single.logdet_inv_c.sum())
        assert float(full.logdet_inv_c.sum()) == pytest.approx(per_view, rel=1e-9)


class TestAlphaPosterior:
    def test_zero_projection_case(self):
        data = MultiViewDataset([np.zeros((1, 2))])
        proj = ProjectionSet([np.zeros((2, 3))])
        stats = compute_latent_stats(
            data, AssignmentState([[0]]), proj, Hyperparameters(k_latent=3)
        )
        assert alpha_posterior(stats) == (2.0, 1.0)

    def test_empty_dataset_recovers_prior(self):
        data = MultiViewDataset([np.zeros((0, 2))])
        proj = ProjectionSet([np.zeros((2, 1))])
        hyper = Hyperparameters(k_latent=1, a=1.7, b=0.4)
        stats = compute_latent_stats(
            data, AssignmentState(np.zeros((0, 1), dtype=int)), proj, hyper
        )
        assert alpha_posterior(stats) == (1.7, 0.4)

    def test_posterior_mean_maximizes_weighted_likelihood(self):
        # argmax over alpha of alpha * prior(alpha) * likelihood(alpha) is the
        # posterior mean; the likelihood here comes from the independent
        # Gaussian-integral route, not the collapsed formula
        rng = np.random.default_rng(14)
        data = MultiViewDataset([rng.standard_normal((1, 2)) for _ in range(2)])
        hyper = Hyperparameters(k_latent=1, a=1.3, b=0.8, r=1.1)
        proj = ProjectionSet([rng.standard_normal((2, 1)) for _ in range(2)])
        state = AssignmentState([[0, 0]])
        stats = compute_latent_stats(data, state, proj, hyper)
        shape, rate = alpha_posterior(stats)

        w = np.vstack([p[:] for p in proj.weights])
        x = np.concatenate([v[0] for v in data.views])
        cov = np.eye(len(x)) + w @ w.T / hyper.r

        def neg_log_weighted(log_alpha):
            alpha = math.exp(log_alpha)
            scaled = cov / alpha
            _, logdet = np.linalg.slogdet(scaled)
            quad = x @ np.linalg.solve(scaled, x)
            log_lik = -0.5 * (len(x) * math.log(2 * math.pi) + logdet + quad)
            log_prior = gamma_dist.logpdf(alpha, hyper.a, scale=1.0 / hyper.b)
            return -(math.log(alpha) + log_prior + log_lik)

        from scipy.optimize import minimize_scalar

        res = minimize_scalar(neg_log_weighted, bounds=(-10, 10), method="bounded")
        assert math.exp(res.x) == pytest.approx(shape / rate, rel=1e-4)


class TestLatentPosterior:
    def test_identity_projection_halves_observation(self):
        x = np.array([[2.0, -4.0]])
        data = MultiViewDataset([x])
        proj = ProjectionSet([np.eye(2)])
        hyper = Hyperparameters(k_latent=2, r=1.0)
        stats = compute_latent_stats(data, AssignmentState([[0]]), proj, hyper)
        mean, cov = latent_posterior(stats, 0, 0)
        np.testing.assert_allclose(mean, x[0] / 2.0)
        np.testing.assert_allclose(cov, np.eye(2) / 2.0)

    def test_zero_data_zero_mean(self):
        rng = np.random.default_rng(15)
        data = MultiViewDataset([np.zeros((1, 3)), np.zeros((1, 2))])
        proj = ProjectionSet([rng.standard_normal((3, 2)), rng.standard_normal((2, 2))])
        stats = compute_latent_stats(
            data, AssignmentState([[0, 0]]), proj, Hyperparameters(k_latent=2)
        )
        mean, _ = latent_posterior(stats, 0, 0)
        np.testing.assert_allclose(mean, np.zeros(2), atol=1e-14)

    def test_matches_direct_ridge_solution(self):
        rng = np.random.default_rng(16)
        dims = (3, 4)
        data = random_dataset(rng, n=2, dims=dims)
        weights = [rng.standard_normal((m, 2)) for m in dims]
        hyper = Hyperparameters(k_latent=2, r=0.6)
        state = AssignmentState([[0, 0], [0, 1]])
        stats = compute_latent_stats(data, state, ProjectionSet(weights), hyper)

        gram = sum(w.T @ w for w in weights) + hyper.r * np.eye(2)
        rhs = sum(w.T @ data.views[d][0] for d, w in enumerate(weights))
        np.testing.assert_allclose(
            latent_posterior(stats, 0, 0)[0], np.linalg.solve(gram, rhs), rtol=1e-10
        )

        mean_11, cov_11 = latent_posterior(stats, 1, 1)
        gram_1 = weights[1].T @ weights[1] + hyper.r * np.eye(2)
        np.testing.assert_allclose(
            mean_11, np.linalg.solve(gram_1, weights[1].T @ data.views[1][1]), rtol=1e-10
        )
        np.testing.assert_allclose(cov_11, np.linalg.inv(gram_1), rtol=1e-10)

    def test_unoccupied_block_rejected(self):
        data = MultiViewDataset([np.zeros((1, 2))])
        stats = compute_latent_stats(
            data, AssignmentState([[0]]), ProjectionSet([np.eye(2)]), Hyperparameters(k_latent=2)
        )
        with pytest.raises(IndexError):
            latent_posterior(stats, 0, 1)


class TestDatasetValidation:
    def test_rejects_mismatched_rows(self):
        with pytest.raises(ValueError):
            MultiViewDataset([np.zeros((2, 2)), np.zeros((3, 2))])

    def test_rejects_non_finite_observed(self):
        bad = np.array([[np.nan, 1.0]])
        with pytest.raises(ValueError):
            MultiViewDataset([bad])

    def test_nan_allowed_at_missing_cells(self):
        bad = np.array([[np.nan, 1.0]])
        data = MultiViewDataset([bad], [np.array([[False, True]])])
        assert data.n_observed_cells == 1

    def test_rejects_bad_label_length(self):
        with pytest.raises(ValueError):
            MultiViewDataset([np.zeros((2, 2))], labels=[True])

    def test_exchangeable_view_permutation_of_marginal(self):
        rng = np.random.default_rng(17)
        dims = (3, 2, 4)
        data = random_dataset(rng, n=4, dims=dims)
        state = random_state(rng, 4, 3)
        weights = [rng.standard_normal((m, 2)) for m in dims]
        hyper = Hyperparameters(k_latent=2)
        base = joint_log_likelihood(data, state, ProjectionSet(weights), hyper)
        perm = [2, 0, 1]
        permuted = joint_log_likelihood(
            MultiViewDataset([data.views[d] for d in perm]),
            AssignmentState(state.s[:, perm]),
            ProjectionSet([weights[d] for d in perm]),
            hyper,
        )
        assert permuted == pytest.approx(base, rel=1e-12)
