import json

import numpy as np
import pytest

from svmc.errors import GridTooLarge
from svmc.gp import (
    GpBelief,
    batch_moments,
    cloud_from_snapshot,
    export_velocity_field,
    gp_belief_update,
    gp_transition_moments,
    init_gp_cloud,
    init_inducing,
    mixture_mean_field,
    predictive_mixture,
    rollout,
    snapshot,
    svmc_gp_step,
)
from svmc.models import GaussianEmission, StateSpaceModel
from svmc.numerics import se_gram
from svmc.proposals import AffineProposal, conjugate_linear_proposal, propose_reparam
from svmc.smc import ParticleCloud, filtered_moments, select_ancestors
from svmc.svmc import SvmcConfig


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def scalar_grid():
    """One pseudo-input at 0 with unit kernel variance, so k = 1 there."""
    return init_inducing([[-1.0, 1.0]], [1], 1.0, 1.0)


def batch_posterior(grid, q, pairs):
    """Conjugate posterior over pseudo-outputs from all (x_prev, x_new) pairs at once."""
    kzz = grid.kzz.matrix
    prec = np.linalg.inv(kzz)
    rhs = np.zeros((grid.size, pairs[0][0].size))
    for xp, xn in pairs:
        kz = se_gram(xp[None], grid.points, grid.lengthscale, grid.variance)[0]
        a = np.linalg.solve(kzz, kz)
        c = grid.variance - kz @ a + q
        prec += np.outer(a, a) / c
        rhs += np.outer(a, xn - xp) / c
    gamma = np.linalg.inv(prec)
    return gamma @ rhs, gamma


def random_pairs(rng, T, d):
    x = np.cumsum(0.3 * rng.standard_normal((T + 1, d)), axis=0)
    return [(x[t], x[t + 1]) for t in range(T)]


class TestInducingGrid:
    def test_1d_grid(self):
        np.testing.assert_allclose(init_inducing([[-1, 1]], [3]).points[:, 0], [-1.0, 0.0, 1.0])

    def test_2d_size(self):
        assert init_inducing([[-1, 1], [0, 2]], [5, 5]).size == 25

    def test_prior_is_gram(self):
        g = init_inducing([[-1, 1], [-2, 2]], [3, 4], 0.7, 1.3)
        b = GpBelief.prior(g, 2, 0.1)
        np.testing.assert_allclose(b.gamma, se_gram(g.points, g.points, 0.7, 1.3), rtol=1e-15)
        np.testing.assert_array_equal(b.mu, 0.0)

    def test_too_large(self):
        with pytest.raises(GridTooLarge):
            init_inducing([[-1, 1], [-1, 1]], [21, 20])
        assert init_inducing([[-1, 1], [-1, 1]], [20, 20]).size == 400


class TestTransitionMoments:
    def test_prior_mean_is_identity(self, rng):
        g = init_inducing([[-2, 2], [-2, 2]], [4, 4])
        x = rng.standard_normal(2)
        v, s = gp_transition_moments(GpBelief.prior(g, 2, 0.1), x)
        np.testing.assert_array_equal(v, x)
        assert s > 0

    def test_scalar_hand_case(self):
        b = GpBelief(scalar_grid(), np.ones((1, 1)), np.ones((1, 1)), q=1.0)
        v, s = gp_transition_moments(b, np.zeros(1))
        np.testing.assert_allclose(v, [1.0], rtol=1e-14)
        np.testing.assert_allclose(s, 2.0, rtol=1e-14)

    def test_interpolation_at_pseudo_input(self, rng):
        g = init_inducing([[-2, 2]], [5])
        mu = rng.standard_normal((5, 1))
        b = GpBelief(g, mu, 1e-12 * np.eye(5), q=0.0)
        for j in range(5):
            v, s = gp_transition_moments(b, g.points[j])
            np.testing.assert_allclose(v, g.points[j] + mu[j], atol=1e-8)
            assert s < 1e-8

    def test_variance_bounds(self, rng):
        g = init_inducing([[-2, 2], [-2, 2]], [4, 4], 0.8, 1.5)
        b = GpBelief.prior(g, 2, 0.2, 1e-3)
        for xp, xn in random_pairs(rng, 10, 2):
            b = gp_belief_update(b, xp, xn)
        xs = 2 * rng.standard_normal((50, 2))
        m = batch_moments(b.repeat(50), xs)
        quad = np.einsum("nm,mk,nk->n", m.a, b.gamma + 1e-3 * np.eye(16), m.a)
        assert np.all(m.s >= b.q)
        assert np.all(m.s <= g.variance + b.q + quad + 1e-12)


class TestBeliefUpdate:
    def test_scalar_hand_case(self):
        b = GpBelief(scalar_grid(), np.zeros((1, 1)), np.ones((1, 1)), q=1.0)
        b = gp_belief_update(b, np.zeros(1), np.ones(1))
        np.testing.assert_allclose(b.gamma, [[0.5]], rtol=1e-14)
        np.testing.assert_allclose(b.mu, [[0.5]], rtol=1e-14)

    @pytest.mark.parametrize("d", [1, 2])
    def test_sequential_equals_batch(self, rng, d):
        g = init_inducing([[-3, 3]] * d, [6] if d == 1 else [4, 4], 1.0, 1.0)
        pairs = random_pairs(rng, 20, d)
        b = GpBelief.prior(g, d, 0.05)
        for xp, xn in pairs:
            b = gp_belief_update(b, xp, xn)
        mu, gamma = batch_posterior(g, 0.05, pairs)
        assert rel_fro(b.gamma, gamma) <= 1e-8
        assert rel_fro(b.mu, mu) <= 1e-8

    def test_sequential_with_diffusion(self, rng):
        g = init_inducing([[-3, 3], [-3, 3]], [4, 4])
        sz2, q = 1e-2, 0.05
        b = GpBelief.prior(g, 2, q, sz2)
        mu, gamma = b.mu.copy(), b.gamma.copy()
        for xp, xn in random_pairs(rng, 20, 2):
            b = gp_belief_update(b, xp, xn)
            # explicit-inverse recomputation of the same step
            kz = se_gram(xp[None], g.points, 1.0, 1.0)[0]
            a = np.linalg.solve(g.kzz.matrix, kz)
            c = 1.0 - kz @ a + q
            prior_prec = np.linalg.inv(gamma + sz2 * np.eye(16))
            gamma_new = np.linalg.inv(prior_prec + np.outer(a, a) / c)
            mu = gamma_new @ (prior_prec @ mu + np.outer(a, xn - xp) / c)
            gamma = gamma_new
            assert rel_fro(b.gamma, gamma) <= 1e-8
            assert rel_fro(b.mu, mu) <= 1e-8

    def test_consistent_observation_keeps_mean(self, rng):
        g = init_inducing([[-2, 2]], [5])
        b = GpBelief.prior(g, 1, 0.1)
        for xp, xn in random_pairs(rng, 8, 1):
            b = gp_belief_update(b, xp, xn)
        xp = rng.standard_normal(1)
        v, _ = gp_transition_moments(b, xp)
        b2 = gp_belief_update(b, xp, v)
        np.testing.assert_allclose(b2.mu, b.mu, atol=1e-12)

    def test_monotone_and_pd(self, rng):
        g = init_inducing([[-3, 3], [-3, 3]], [5, 5], 0.8, 1.0)
        b = GpBelief.prior(g, 2, 0.01)
        for xp, xn in random_pairs(rng, 100, 2):
            nb = gp_belief_update(b, xp, xn)
            assert np.linalg.eigvalsh(b.gamma - nb.gamma).min() >= -1e-10
            np.testing.assert_allclose(nb.gamma, nb.gamma.T, atol=1e-12)
            assert np.linalg.eigvalsh(nb.gamma).min() > 0
            b = nb

    def test_pd_with_diffusion(self, rng):
        g = init_inducing([[-3, 3], [-3, 3]], [5, 5], 0.8, 1.0)
        b = GpBelief.prior(g, 2, 1e-4, 1e-3)
        for xp, xn in random_pairs(rng, 300, 2):
            b = gp_belief_update(b, xp, xn)
        np.testing.assert_allclose(b.gamma, b.gamma.T, atol=1e-12)
        assert np.linalg.eigvalsh(b.gamma).min() > 0

    def test_static_data_has_no_correction(self, rng):
        g = init_inducing([[-2, 2]], [5])
        b = GpBelief.prior(g, 1, 0.01)
        x = np.array([0.3])
        for _ in range(50):
            b = gp_belief_update(b, x, x)
        v, _ = gp_transition_moments(b, x)
        kz = se_gram(x[None], g.points, 1.0, 1.0)[0]
        a = g.kzz.solve(kz)
        assert abs(v[0] - x[0]) <= 3 * np.sqrt(a @ b.gamma @ a)
        assert abs(v[0] - x[0]) < 1e-10


class TestMarginalizedWeight:
    def test_matches_augmented_monte_carlo(self, rng):
        """Closed-form N(x; v, s) equals E_z[N(x; x_prev + a^T z, c)] for M = 2, d = 1."""
        g = init_inducing([[-1, 1]], [2], 0.9, 1.0)
        sz2 = 0.05
        b = GpBelief(g, rng.standard_normal((2, 1)), np.array([[0.5, 0.1], [0.1, 0.3]]), q=0.2, sigma_z2=sz2)
        xp, xn = np.array([0.2]), np.array([0.7])
        v, s = gp_transition_moments(b, xp)
        closed = np.exp(-0.5 * (xn[0] - v[0]) ** 2 / s) / np.sqrt(2 * np.pi * s)
        m = batch_moments(b.repeat(1), xp[None])
        a, c = m.a[0], m.c[0]
        z = rng.multivariate_normal(b.mu[:, 0], b.gamma + sz2 * np.eye(2), size=100_000)
        dens = np.exp(-0.5 * (xn[0] - xp[0] - z @ a) ** 2 / c) / np.sqrt(2 * np.pi * c)
        assert abs(dens.mean() - closed) < 3 * dens.std(ddof=1) / np.sqrt(dens.size)


def gp_model(d_y=3):
    C = np.vstack([np.eye(2), np.ones((d_y - 2, 2))])
    return StateSpaceModel(None, GaussianEmission(C, R=0.1 * np.eye(d_y)))


class TestSvmcGpStep:
    def test_single_particle_is_streaming_regression(self, rng):
        model = gp_model()
        g = init_inducing([[-3, 3], [-3, 3]], [4, 4])
        cloud = init_gp_cloud(model, g, 1, 0.05, 0.0, rng)
        cfg = SvmcConfig(n_particles=1, n_sgd=0)
        states = [cloud.states[0]]
        for y in rng.standard_normal((20, 3)):
            cloud = svmc_gp_step(cloud, model, None, y, cfg, rng).cloud
            states.append(cloud.states[0])
        pairs = list(zip(states[:-1], states[1:]))
        mu, gamma = batch_posterior(g, 0.05, pairs)
        assert rel_fro(cloud.aux.gamma[0], gamma) <= 1e-8
        assert rel_fro(cloud.aux.mu[0], mu) <= 1e-8

    def test_vague_transition(self, rng):
        """With huge q the transition term is flat across particles."""
        model = gp_model()
        g = init_inducing([[-3, 3], [-3, 3]], [3, 3])
        cloud = init_gp_cloud(model, g, 30, 1e8, 0.0, rng)
        prop = AffineProposal(np.zeros(2), np.zeros(2), np.zeros(2))
        y = rng.standard_normal(3)
        cfg = SvmcConfig(n_particles=30, n_sgd=0)
        res = svmc_gp_step(cloud, model, prop, y, cfg, np.random.default_rng(1))
        # recompute emission - log r with the same draws
        r2 = np.random.default_rng(1)
        anc, _, _ = select_ancestors(cloud, "systematic", r2)
        eps = r2.standard_normal((30, 2))
        x, log_r, _ = propose_reparam(prop, cloud.states[anc], y, eps)
        np.testing.assert_array_equal(res.cloud.states, x)
        resid = res.cloud.log_weights - (model.emission.logpdf(x, y) - log_r)
        assert np.ptp(resid) < 1e-6

    def test_beliefs_follow_ancestors(self, rng):
        model = gp_model()
        g = init_inducing([[-3, 3], [-3, 3]], [3, 3])
        cloud = init_gp_cloud(model, g, 10, 0.1, 0.0, rng)
        b = cloud.aux
        mus = rng.standard_normal(b.mu.shape)
        cloud = ParticleCloud(cloud.states, np.where(np.arange(10) == 7, 0.0, -np.inf), 0, GpBelief(g, mus, b.gamma, b.q))
        res = svmc_gp_step(cloud, model, None, np.zeros(3), SvmcConfig(n_particles=10, n_sgd=0), rng)
        new = res.cloud.aux
        # every particle descends from particle 7 and was updated from its belief
        for i in range(10):
            ref = gp_belief_update(GpBelief(g, mus[7], b.gamma[7], b.q), cloud.states[7], res.cloud.states[i])
            np.testing.assert_allclose(new.mu[i], ref.mu, rtol=1e-10, atol=1e-12)

    def test_learns_constant_drift(self, rng):
        """Data moving at a constant velocity: the learned field points along it."""
        C = np.vstack([np.eye(2), np.ones((1, 2))])
        model = StateSpaceModel(None, GaussianEmission(C, R=1e-3 * np.eye(3)))
        g = init_inducing([[-3, 3], [-3, 3]], [6, 6], 1.0, 0.1)
        cloud = init_gp_cloud(model, g, 20, 1e-4, 0.0, rng)
        prop = conjugate_linear_proposal(C, 1e-3 * np.eye(3), 1e-3)
        cfg = SvmcConfig(n_particles=20, n_sgd=5, lr=1e-3)
        state = None
        x = np.array([-2.0, 0.0])
        for _ in range(100):
            x = x + np.array([0.04, 0.0])
            res = svmc_gp_step(cloud, model, prop, model.emission.sample(x, rng), cfg, rng, opt_state=state)
            cloud, prop, state = res.cloud, res.proposal, res.opt_state
        pts = np.array([[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
        disp = mixture_mean_field(cloud, pts) - pts
        np.testing.assert_allclose(disp, np.tile([0.04, 0.0], (3, 1)), atol=0.015)


class TestPredictiveMixture:
    def _two_point_cloud(self):
        g = scalar_grid()
        b = GpBelief(g, np.array([[[1.0]], [[-1.0]]]), np.full((2, 1, 1), 0.5), q=0.5)
        return ParticleCloud(np.zeros((2, 1)), np.zeros(2), 0, b)

    def test_single_particle(self, rng):
        g = init_inducing([[-2, 2], [-2, 2]], [3, 3])
        b = GpBelief.prior(g, 2, 0.1)
        b = gp_belief_update(b, rng.standard_normal(2), rng.standard_normal(2))
        cloud = ParticleCloud(np.zeros((1, 2)), np.zeros(1), 0, b.repeat(1))
        xs = rng.standard_normal(2)
        mean, cov = predictive_mixture(cloud, xs)
        v, s = gp_transition_moments(b, xs)
        np.testing.assert_allclose(mean, v, rtol=1e-13)
        np.testing.assert_allclose(cov, s * np.eye(2), rtol=1e-13)

    def test_two_particles(self):
        mean, cov = predictive_mixture(self._two_point_cloud(), np.zeros(1))
        np.testing.assert_allclose(mean, [0.0], atol=1e-15)
        np.testing.assert_allclose(cov, [[2.0]], rtol=1e-14)

    def test_monte_carlo(self, rng):
        g = init_inducing([[-2, 2], [-2, 2]], [3, 3])
        n = 5
        b = GpBelief.prior(g, 2, 0.1).repeat(n)
        b = GpBelief(g, rng.standard_normal(b.mu.shape), b.gamma, 0.1)
        cloud = ParticleCloud(np.zeros((n, 2)), rng.standard_normal(n), 0, b)
        xs = np.array([0.3, -0.4])
        mean, cov = predictive_mixture(cloud, xs)
        m = batch_moments(b, np.tile(xs, (n, 1)), sigma_z2=0.0)
        w = np.exp(cloud.log_weights - cloud.log_weights.max())
        w /= w.sum()
        k = rng.choice(n, size=100_000, p=w)
        draws = m.v[k] + np.sqrt(m.s[k])[:, None] * rng.standard_normal((100_000, 2))
        se = np.sqrt(np.diag(cov) / draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 3 * se)
        np.testing.assert_allclose(np.cov(draws.T), cov, rtol=0.03, atol=0.01)


class TestRollout:
    def test_zero_horizon(self, rng):
        model = gp_model()
        g = init_inducing([[-2, 2], [-2, 2]], [3, 3])
        cloud = init_gp_cloud(model, g, 10, 0.1, 0.0, rng)
        cloud = ParticleCloud(cloud.states, rng.standard_normal(10), 0, cloud.aux)
        r = rollout(cloud, 0, rng)
        m, c = filtered_moments(cloud)
        np.testing.assert_allclose(r.means[0], m, rtol=1e-13)
        np.testing.assert_allclose(r.covs[0], c, rtol=1e-12, atol=1e-15)

    def test_prior_belief_is_constant(self, rng):
        g = init_inducing([[-2, 2], [-2, 2]], [3, 3], 1.0, 1e-14)
        cloud = init_gp_cloud(gp_model(), g, 5, 0.0, 0.0, rng)
        r = rollout(cloud, 30, rng)
        np.testing.assert_allclose(r.trajectories, np.repeat(cloud.states[:, None], 31, axis=1), atol=1e-5)

    def test_frozen_beliefs(self, rng):
        g = init_inducing([[-2, 2], [-2, 2]], [3, 3])
        cloud = init_gp_cloud(gp_model(), g, 4, 0.1, 0.0, rng)
        before = cloud.aux.mu.copy()
        rollout(cloud, 10, rng)
        np.testing.assert_array_equal(cloud.aux.mu, before)


class TestSnapshot:
    def test_round_trip(self, rng):
        model = gp_model()
        g = init_inducing([[-2, 2], [-2, 2]], [3, 3], 0.8, 0.5)
        cloud = init_gp_cloud(model, g, 6, 0.1, 1e-4, rng)
        for y in rng.standard_normal((5, 3)):
            cloud = svmc_gp_step(cloud, model, None, y, SvmcConfig(n_particles=6, n_sgd=0), rng).cloud
        back = cloud_from_snapshot(json.loads(json.dumps(snapshot(cloud))))
        for x in rng.standard_normal((3, 2)):
            a, b = predictive_mixture(cloud, x), predictive_mixture(back, x)
            np.testing.assert_allclose(a[0], b[0], rtol=1e-14)
            np.testing.assert_allclose(a[1], b[1], rtol=1e-14)

    def test_prior_field_is_zero(self, rng):
        g = init_inducing([[-2, 2], [-2, 2]], [3, 3])
        cloud = init_gp_cloud(gp_model(), g, 4, 0.1, 0.0, rng)
        field = export_velocity_field(snapshot(cloud), [[-2, 2], [-1, 1]], [7, 5])
        assert field.shape == (35, 4)
        np.testing.assert_array_equal(field[:, 2:], 0.0)
