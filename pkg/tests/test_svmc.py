import numpy as np
import pytest

from conftest import central_diff, rel_err
from svmc.errors import DomainError
from svmc.models import GaussianEmission, LinearDynamics, StateSpaceModel, StudentTEmission, VrnnDynamics, transition_logpdf_and_grad
from svmc.numerics import LOG_2PI
from svmc.proposals import (
    SCALE_FLOOR,
    AffineProposal,
    LinearProposal,
    MlpProposal,
    conjugate_linear_proposal,
    propose_reparam,
    proposal_from_dict,
)
from svmc.smc import initial_cloud, smc_step
from svmc.svmc import AdamState, SvmcConfig, adam_step, clip_by_global_norm, elbo_objective_and_grad, reparam_objective, svmc_step


def make_proposal(family, rng, d_x, d_y):
    if family == "affine":
        return AffineProposal(rng.standard_normal(d_x), rng.standard_normal(d_x), 0.3 * rng.standard_normal(d_x))
    if family == "linear":
        p = LinearProposal.init(d_x, d_y)
        return p.with_params(p.params + 0.3 * rng.standard_normal(p.params.size))
    p = MlpProposal.init(d_x, d_y, 6, rng, residual=bool(rng.integers(2)))
    return p.with_params(p.params + 0.3 * rng.standard_normal(p.params.size))


def random_model(rng, d_x=3, d_y=4, student=False, vrnn=False):
    if vrnn:
        dyn = VrnnDynamics(rng.standard_normal((d_x, d_x)) / np.sqrt(d_x), 2.5, 0.025, 0.001, 0.1 * np.eye(d_x), True)
    else:
        dyn = LinearDynamics(0.5 * rng.standard_normal((d_x, d_x)), np.diag(rng.uniform(0.3, 1.5, d_x)), True)
    C, b = rng.standard_normal((d_y, d_x)), 0.3 * rng.standard_normal(d_y)
    if student:
        em = StudentTEmission(C, b, True, nu=2.0, sigma=0.7)
    else:
        em = GaussianEmission(C, b, True, R=np.diag(rng.uniform(0.5, 2.0, d_y)))
    return StateSpaceModel(dyn, em)


class TestProposeReparam:
    def test_affine_identity(self, rng):
        e = rng.standard_normal((1, 3))
        x, lr, _ = propose_reparam(AffineProposal.init(3), np.zeros((1, 3)), np.zeros(2), e)
        np.testing.assert_array_equal(x, e)
        np.testing.assert_allclose(lr, -0.5 * np.sum(e * e) - 1.5 * LOG_2PI, rtol=1e-14)

    def test_mlp_zero_weights(self, rng):
        p = MlpProposal.init(2, 3, 5, rng)
        p = p.with_params(np.zeros_like(p.params))
        p = MlpProposal(p.W1, p.b1, p.Wm, np.array([0.7, -0.2]), p.Ws, np.array([0.5, -50.0]))
        e = rng.standard_normal((4, 2))
        x, _, tape = propose_reparam(p, rng.standard_normal((4, 2)), rng.standard_normal(3), e)
        np.testing.assert_allclose(tape.mean, np.tile([0.7, -0.2], (4, 1)))
        np.testing.assert_allclose(tape.scale, np.tile([np.exp(0.5), SCALE_FLOOR], (4, 1)), rtol=1e-14)
        np.testing.assert_allclose(x, tape.mean + tape.scale * e, rtol=1e-14)

    def test_pathwise_scale_derivative(self, rng):
        p = AffineProposal(rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3))
        f, e = rng.standard_normal((2, 1, 3))
        _, _, tape = propose_reparam(p, f, None, e)

        def x_of(s):
            return propose_reparam(AffineProposal(p.mu, p.beta, s), f, None, e)[0][0]

        jac = np.stack([central_diff(lambda s: x_of(s)[k], p.log_scale) for k in range(3)])
        np.testing.assert_allclose(jac, np.diag((tape.scale * e)[0]), atol=1e-8)

    def test_log_density_matches_gaussian(self, rng):
        p = make_proposal("mlp", rng, 3, 2)
        f, y = rng.standard_normal((5, 3)), rng.standard_normal(2)
        e = rng.standard_normal((5, 3))
        x, lr, tape = propose_reparam(p, f, y, e)
        ref = np.sum(-0.5 * ((x - tape.mean) / tape.scale) ** 2 - np.log(tape.scale) - 0.5 * LOG_2PI, axis=1)
        np.testing.assert_allclose(lr, ref, rtol=1e-12)

    def test_non_finite_parameters(self):
        with pytest.raises(DomainError):
            propose_reparam(AffineProposal(np.array([np.nan]), np.ones(1), np.zeros(1)), np.zeros((1, 1)), None, np.zeros((1, 1)))

    @pytest.mark.parametrize("family", ["affine", "linear", "mlp"])
    def test_dict_round_trip(self, rng, family):
        p = make_proposal(family, rng, 2, 3)
        back = proposal_from_dict(p.to_dict())
        np.testing.assert_array_equal(back.params, p.params)
        assert type(back) is type(p)


class TestElboGradient:
    @pytest.mark.parametrize("family", ["affine", "linear", "mlp"])
    @pytest.mark.parametrize("student", [False, True])
    def test_finite_differences(self, rng, family, student):
        for _ in range(5):
            model = random_model(rng, student=student, vrnn=family == "mlp")
            prop = make_proposal(family, rng, 3, 4)
            xp, y = rng.standard_normal((4, 3)), rng.standard_normal(4)
            seed = int(rng.integers(1 << 31))

            def obj(m, p):
                return elbo_objective_and_grad(m, xp, p, y, np.random.default_rng(seed))[0]

            _, g = elbo_objective_and_grad(model, xp, prop, y, np.random.default_rng(seed), L=4)
            fd = central_diff(lambda v: obj(model, prop.with_params(v)), prop.params)
            assert rel_err(g["proposal"], fd) < 1e-5
            fd = central_diff(lambda v: obj(StateSpaceModel(model.dynamics.with_params(v), model.emission), prop), model.dynamics.params)
            assert rel_err(g["dynamics"], fd) < 1e-5
            fd = central_diff(lambda v: obj(StateSpaceModel(model.dynamics, model.emission.with_params(v)), prop), model.emission.params)
            assert rel_err(g["emission"], fd) < 1e-5

    def test_frozen_model_gets_zero(self, rng):
        model = StateSpaceModel(LinearDynamics(np.eye(2), np.eye(2)), GaussianEmission(np.eye(2), R=np.eye(2)))
        _, g = elbo_objective_and_grad(model, rng.standard_normal((4, 2)), AffineProposal.init(2), np.ones(2), rng)
        np.testing.assert_array_equal(g["dynamics"], 0.0)
        np.testing.assert_array_equal(g["emission"], 0.0)

    def test_weight_cancellation(self, rng):
        """A proposal equal to the transition leaves only the emission terms."""
        q = 0.6
        A = 0.5 * rng.standard_normal((2, 2))
        model = StateSpaceModel(LinearDynamics(A, q * np.eye(2)), GaussianEmission(np.eye(2), R=np.eye(2)))
        prop = AffineProposal(np.zeros(2), np.ones(2), np.full(2, 0.5 * np.log(q)))
        xp, y = rng.standard_normal((4, 2)), rng.standard_normal(2)
        obj, _ = elbo_objective_and_grad(model, xp, prop, y, np.random.default_rng(1))
        x = xp @ A.T + np.sqrt(q) * np.random.default_rng(1).standard_normal((4, 2))
        np.testing.assert_allclose(obj, model.emission.logpdf(x, y).sum(), rtol=1e-12)

    def test_optimal_proposal_has_no_pathwise_gradient(self, rng):
        """Exact posterior proposal: log w is constant in eps and its x-gradient vanishes."""
        a, q, c, r, y = 0.8, 0.5, 1.3, 0.4, np.array([0.9])
        model = StateSpaceModel(LinearDynamics([[a]], [[q]]), GaussianEmission([[c]], R=[[r]]))
        prop = conjugate_linear_proposal([[c]], [[r]], q)
        xp = rng.standard_normal((50, 1))
        f = a * xp
        e = rng.standard_normal((50, 1))
        x, log_r, tape = propose_reparam(prop, f, y, e)
        le, gx_e, _ = model.emission.logpdf_and_grad(x, y)
        lt, _, gx_t, _ = transition_logpdf_and_grad(model, xp, x)
        log_w = le + lt - log_r
        # closed form p(y_t | x_{t-1}) = N(y; c a x_{t-1}, c^2 q + r)
        s2 = c * c * q + r
        ref = -0.5 * (y[0] - c * f[:, 0]) ** 2 / s2 - 0.5 * np.log(2 * np.pi * s2)
        np.testing.assert_allclose(log_w, ref, rtol=1e-10)
        np.testing.assert_allclose(gx_e + gx_t + e / tape.scale, 0.0, atol=1e-10)

    def test_permutation_invariance(self, rng):
        prop = make_proposal("mlp", rng, 3, 4)
        model = random_model(rng)
        f, e = rng.standard_normal((2, 6, 3))
        y = rng.standard_normal(4)
        perm = rng.permutation(6)

        def run(ff, ee):
            Q = model.dynamics.Q

            def tr(x):
                r_ = x - ff
                al = Q.solve(r_.T).T
                return -0.5 * np.sum(r_ * al, axis=1), -al, al

            return reparam_objective(prop, ff, ee, y, model.emission, tr)

        a, b = run(f, e), run(f[perm], e[perm])
        np.testing.assert_allclose(a[0], b[0], rtol=1e-12)
        np.testing.assert_allclose(a[2], b[2], rtol=1e-10, atol=1e-12)


class TestAdam:
    @pytest.mark.parametrize("g", [1e-3, -0.5, 7.0])
    def test_first_step_is_lr(self, g):
        new, _ = adam_step(np.array([2.0]), np.array([g]), AdamState.zeros(1, lr=1e-3))
        np.testing.assert_allclose(abs(new[0] - 2.0), 1e-3, atol=1e-6)
        assert np.sign(new[0] - 2.0) == np.sign(g)

    def test_zero_gradient(self, rng):
        p = rng.standard_normal(5)
        new, _ = adam_step(p, np.zeros(5), AdamState.zeros(5))
        np.testing.assert_array_equal(new, p)

    def test_deterministic(self, rng):
        p, g = rng.standard_normal((2, 5))
        st = AdamState.zeros(5)
        a, sa = adam_step(p, g, st)
        b, sb = adam_step(p, g, st)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(sa.v, sb.v)

    def test_clip(self):
        (g,) = clip_by_global_norm([np.array([30.0, 40.0])], 10.0)
        np.testing.assert_allclose(g, [6.0, 8.0])
        (g,) = clip_by_global_norm([np.array([3.0, 4.0])], 10.0)
        np.testing.assert_array_equal(g, [3.0, 4.0])


class TestSvmcStep:
    def _setup(self, rng):
        model = random_model(rng, 2, 3)
        model = StateSpaceModel(
            LinearDynamics(model.dynamics.A, model.dynamics.Q), GaussianEmission(model.emission.C, R=model.emission.R)
        )
        cloud = initial_cloud(model, 40, rng)
        return model, cloud, make_proposal("mlp", rng, 2, 3), rng.standard_normal(3)

    def test_no_sgd_is_smc_step(self, rng):
        model, cloud, prop, y = self._setup(rng)
        res = svmc_step(cloud, model, prop, y, SvmcConfig(n_particles=40, n_sgd=0), np.random.default_rng(4))
        ref, _ = smc_step(cloud, model, prop, y, "systematic", np.random.default_rng(4))
        np.testing.assert_array_equal(res.cloud.states, ref.states)
        np.testing.assert_array_equal(res.cloud.log_weights, ref.log_weights)
        assert res.proposal is prop

    def test_zero_lr_keeps_parameters(self, rng):
        model, cloud, prop, y = self._setup(rng)
        cfg = SvmcConfig(n_particles=40, n_sgd=5, lr=0.0)
        res = svmc_step(cloud, model, prop, y, cfg, np.random.default_rng(4), np.random.default_rng(5))
        np.testing.assert_array_equal(res.proposal.params, prop.params)
        ref, _ = smc_step(cloud, model, prop, y, "systematic", np.random.default_rng(4))
        np.testing.assert_array_equal(res.cloud.states, ref.states)
        np.testing.assert_array_equal(res.cloud.log_weights, ref.log_weights)

    def test_parameters_move_and_warm_start(self, rng):
        model, cloud, prop, y = self._setup(rng)
        cfg = SvmcConfig(n_particles=40, n_sgd=3)
        res = svmc_step(cloud, model, prop, y, cfg, np.random.default_rng(4))
        assert not np.array_equal(res.proposal.params, prop.params)
        assert res.opt_state["proposal"].step == 3
        res2 = svmc_step(res.cloud, model, res.proposal, y, cfg, np.random.default_rng(5), opt_state=res.opt_state)
        assert res2.opt_state["proposal"].step == 6

    def test_scale_floor_holds(self, rng):
        """Near-noiseless observations push the scale down; it never crosses the floor."""
        model = StateSpaceModel(LinearDynamics(np.eye(1), np.eye(1)), GaussianEmission(np.eye(1), R=1e-10 * np.eye(1)))
        prop = AffineProposal(np.zeros(1), np.ones(1), np.full(1, np.log(2e-4)))
        cfg = SvmcConfig(n_particles=20, n_sgd=20, lr=0.05)
        cloud, state = initial_cloud(model, 20, rng), None
        for t in range(20):
            res = svmc_step(cloud, model, prop, np.zeros(1), cfg, rng, opt_state=state)
            cloud, prop, state = res.cloud, res.proposal, res.opt_state
            _, _, tape = propose_reparam(prop, np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)))
            assert tape.scale.min() >= SCALE_FLOOR

    def test_improves_on_bootstrap(self, rng):
        """Informative observations: adapted proposal beats the bootstrap on log-ML."""
        model = StateSpaceModel(LinearDynamics(0.9 * np.eye(2), np.eye(2)), GaussianEmission(np.eye(2), R=0.05 * np.eye(2)))
        ys = rng.standard_normal((25, 2))
        cfg = SvmcConfig(n_particles=50, n_sgd=20, lr=0.05)
        bpf = svm = 0.0
        c1, c2 = initial_cloud(model, 50, np.random.default_rng(0)), initial_cloud(model, 50, np.random.default_rng(0))
        prop, state = AffineProposal.init(2), None
        for y in ys:
            c1, d1 = smc_step(c1, model, None, y, "systematic", rng)
            res = svmc_step(c2, model, prop, y, cfg, rng, opt_state=state)
            c2, prop, state = res.cloud, res.proposal, res.opt_state
            bpf += d1.log_ml_increment
            svm += res.diagnostics.log_ml_increment
        assert svm > bpf
