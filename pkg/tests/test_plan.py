import numpy as np
import pytest
from scipy import stats as sstats

from mfdplan import env as E
from mfdplan.model import (AnalyticScoreModel, ModelConfig, Normalizer,
                           ScoreModel, ValueConfig, ValueModel, analytic_score)
from mfdplan.plan import (ParticleSystem, PlanConfig, branch, execute, inpaint,
                          plan, project_actions, reverse_step, sample_reverse)
from mfdplan.schedule import make_subdivision, make_vp_schedule, work_full

SCHED = make_vp_schedule(0.1, 20.0, 1.0, 1e-3, 200)


class OracleModel(AnalyticScoreModel):
    """Analytic score plus a model config so plan() can infer D_tau."""

    def __init__(self, schedule, d_s, d_a, h):
        super().__init__(schedule)
        self.cfg = ModelConfig(d_s=d_s, d_a=d_a, H=h)


def small_ps(n=4, dim=6, t=1.0, seed=0):
    rng = np.random.default_rng(seed)
    return ParticleSystem(trajs=rng.standard_normal((n, dim)), t=t, level=0,
                          agents=np.arange(n))


class TestReverseStep:
    def test_eta_zero_identical_to_guidance_disabled(self):
        ps = small_ps()
        noise = np.random.default_rng(1).standard_normal(ps.trajs.shape)
        score = lambda t, x: analytic_score(SCHED, t, x)
        poison = lambda t, x: 1e9 * np.ones_like(x)
        a = reverse_step(score, SCHED, ps, SCHED.dt, noise, guide_fn=poison, eta=0.0)
        b = reverse_step(score, SCHED, ps, SCHED.dt, noise, guide_fn=None, eta=0.0)
        assert np.array_equal(a.trajs, b.trajs)

    def test_zero_everything_keeps_particles(self):
        class StillSchedule:
            t_min = 0.0

            def beta(self, t):
                return 0.0

        ps = small_ps(t=0.5)
        noise = np.ones_like(ps.trajs)
        out = reverse_step(lambda t, x: np.zeros_like(x), StillSchedule(), ps,
                           0.01, noise)
        assert np.array_equal(out.trajs, ps.trajs)

    def test_step_below_t_min_rejected(self):
        ps = small_ps(t=SCHED.t_min + 1e-4)
        with pytest.raises(ValueError):
            reverse_step(lambda t, x: x, SCHED, ps, SCHED.dt,
                         np.zeros_like(ps.trajs))

    def test_work_counts_particles(self):
        ps = small_ps(n=7)
        out = reverse_step(lambda t, x: np.zeros_like(x), SCHED, ps, SCHED.dt,
                           np.zeros_like(ps.trajs))
        assert out.work == 7

    def test_guidance_linear_in_eta(self):
        # the Euler update is affine in the score shift:
        # out(eta2) - out(eta1) = dt * beta * (eta2 - eta1) * grad
        ps = small_ps()
        noise = np.zeros_like(ps.trajs)
        grad = np.random.default_rng(2).standard_normal(ps.trajs.shape)
        score = lambda t, x: analytic_score(SCHED, t, x)
        gfn = lambda t, x: grad
        outs = [reverse_step(score, SCHED, ps, SCHED.dt, noise, guide_fn=gfn,
                             eta=e).trajs for e in (0.5, 0.75)]
        beta = SCHED.beta(ps.t)
        assert outs[1] - outs[0] == pytest.approx(SCHED.dt * beta * 0.25 * grad,
                                                  rel=1e-12)


class TestSamplerOracle:
    def test_moments_and_ks(self):
        x = sample_reverse(lambda t, z: analytic_score(SCHED, t, z), SCHED,
                           10_000, 2, seed=7)
        assert np.abs(x.mean(axis=0)).max() < 0.04
        assert x.var(axis=0).min() > 0.9 and x.var(axis=0).max() < 1.1
        for c in range(2):
            assert sstats.kstest(x[:, c], "norm").pvalue > 0.01


class TestInpaint:
    def test_idempotent_and_local(self):
        ps = small_ps(n=4, dim=6)
        obs = np.random.default_rng(3).standard_normal((4, 2))
        a = inpaint(ps, obs, 2)
        b = inpaint(a, obs, 2)
        assert np.array_equal(a.trajs, b.trajs)
        assert np.array_equal(a.trajs[:, 2:], ps.trajs[:, 2:])
        assert np.array_equal(a.trajs[:, :2], obs)

    def test_noop_when_observation_matches(self):
        ps = small_ps(n=3, dim=5)
        obs = ps.trajs[:, :2].copy()
        out = inpaint(ps, obs, 2)
        assert np.array_equal(out.trajs, ps.trajs)

    def test_shape_mismatch(self):
        ps = small_ps()
        with pytest.raises(ValueError):
            inpaint(ps, np.zeros((4, 3, 1)), 3)


class TestBranch:
    def _setup(self):
        sub = make_subdivision(8, 2, 2, 200, 0.1)
        om = OracleModel(SCHED, 2, 2, 1)  # d_tau = 6
        ps = ParticleSystem(trajs=np.arange(12.0).reshape(2, 6), t=0.5, level=0,
                            agents=np.array([0, 1]))
        return sub, om, ps

    def test_zero_noise_zero_delta_copies(self):
        sub, om, ps = self._setup()
        out = branch(ps, om, SCHED, sub, delta=0.0,
                     new_agents=np.array([2, 3]), child_noise=np.zeros((2, 6)))
        assert out.trajs.shape == (4, 6)
        assert np.array_equal(out.trajs[:2], ps.trajs)
        assert np.array_equal(out.trajs[2:], ps.trajs)
        assert out.level == 1

    def test_counts_and_parent_block(self):
        sub, om, ps = self._setup()
        noise = np.random.default_rng(0).standard_normal((2, 6))
        out = branch(ps, om, SCHED, sub, delta=0.1,
                     new_agents=np.array([2, 3]), child_noise=noise)
        assert out.trajs.shape == (4, 6)
        assert np.array_equal(out.trajs[:2], ps.trajs)  # Id block preserved
        eta_k = SCHED.sigma(0.5) * np.sqrt(SCHED.dt)
        # oracle has zero interaction: children = parent + eta_k * noise
        assert out.trajs[2:] == pytest.approx(ps.trajs + eta_k * noise)

    def test_branch_work_charge(self):
        sub, om, ps = self._setup()
        out = branch(ps, om, SCHED, sub, 0.0, np.array([2, 3]), np.zeros((2, 6)))
        assert out.work == pytest.approx(sub.c_psi * 2)

    def test_final_level_rejected(self):
        sub, om, _ = self._setup()
        ps = ParticleSystem(trajs=np.zeros((8, 6)), t=0.2, level=2,
                            agents=np.arange(8))
        with pytest.raises(ValueError):
            branch(ps, om, SCHED, sub, 0.1, np.arange(8), np.zeros((8, 6)))


class TestPlan:
    def test_flat_k0_work_counter(self):
        om = OracleModel(SCHED, 2, 2, 1)
        sub = make_subdivision(8, 1, 0, 200, 0.1)
        obs = np.random.default_rng(0).standard_normal((8, 2))
        res = plan(om, SCHED, sub, obs, PlanConfig(eta=0.0), seed=1)
        assert res.work == 200 * 8

    def test_hierarchical_work_counter_paper_value(self):
        om = OracleModel(SCHED, 2, 2, 1)
        sub = make_subdivision(16, 2, 4, 200, 0.10)
        obs = np.random.default_rng(1).standard_normal((16, 2))
        res = plan(om, SCHED, sub, obs, PlanConfig(eta=0.0), seed=2)
        assert res.work == pytest.approx(77.59375 * 16, rel=1e-12)
        assert res.work == pytest.approx(work_full(sub, 16), rel=1e-12)

    def test_observed_s0_carried_bitwise(self):
        om = OracleModel(SCHED, 2, 2, 1)
        sub = make_subdivision(8, 2, 1, 200, 0.1)
        obs = np.random.default_rng(2).standard_normal((8, 2))
        res = plan(om, SCHED, sub, obs, PlanConfig(eta=0.0), seed=3)
        assert np.array_equal(res.trajs[:, :2], obs)

    def test_content_mode_permutation_equivariance(self):
        om = OracleModel(SCHED, 2, 2, 1)
        sub = make_subdivision(8, 2, 1, 200, 0.1)
        obs = np.random.default_rng(4).standard_normal((8, 2))
        cfg = PlanConfig(eta=0.0, rng_mode="content")
        base = plan(om, SCHED, sub, obs, cfg, seed=5).trajs
        rng = np.random.default_rng(6)
        for _ in range(8):
            perm = rng.permutation(8)
            out = plan(om, SCHED, sub, obs[perm], cfg, seed=5).trajs
            assert np.array_equal(out, base[perm])

    def test_normalizer_roundtrip_in_outputs(self):
        om = OracleModel(SCHED, 2, 2, 1)
        sub = make_subdivision(4, 1, 0, 200, 0.1)
        obs = np.random.default_rng(7).standard_normal((4, 2))
        norm = Normalizer(mean=np.arange(6.0), scale=np.full(6, 2.0))
        res = plan(om, SCHED, sub, obs, PlanConfig(eta=0.0), seed=8,
                   normalizer=norm)
        assert np.array_equal(res.trajs[:, :2], obs)
        assert np.isfinite(res.trajs).all()


class TestProjectActions:
    def test_exact_one_hot_passthrough(self):
        spec = E.ising_spec(4)
        trajs = np.zeros((4, spec.d_tau))
        a_idx = E.action_slices(spec)[0]
        trajs[:, a_idx] = [0.0, 1.0]
        acts = project_actions(trajs, spec)
        assert np.array_equal(acts, np.tile([0.0, 1.0], (4, 1)))

    def test_argmax(self):
        spec = E.EnvSpec(name="ising", d_s=1, d_a=3, action_kind="discrete",
                         H=1, gamma=1.0, N=1, side=1)
        trajs = np.zeros((1, spec.d_tau))
        trajs[0, E.action_slices(spec)[0]] = [0.2, 0.9, -0.1]
        acts = project_actions(trajs, spec)
        assert np.array_equal(acts[0], [0.0, 1.0, 0.0])

    def test_tie_breaks_lowest_index(self):
        spec = E.EnvSpec(name="ising", d_s=1, d_a=2, action_kind="discrete",
                         H=1, gamma=1.0, N=1, side=1)
        trajs = np.zeros((1, spec.d_tau))
        trajs[0, E.action_slices(spec)[0]] = [0.5, 0.5]
        acts = project_actions(trajs, spec)
        assert np.array_equal(acts[0], [1.0, 0.0])

    def test_continuous_identity(self):
        spec = E.gs_spec(4, H=2)
        trajs = np.random.default_rng(0).standard_normal((4, spec.d_tau))
        acts = project_actions(trajs, spec)
        assert np.array_equal(acts, trajs[:, E.action_slices(spec)[0]])


class TestExecute:
    def test_ising_one_plan_per_round(self):
        spec = E.ising_spec(4, coupling=2.0)
        om = OracleModel(SCHED, spec.d_s, spec.d_a, spec.H)
        sub = make_subdivision(4, 2, 1, 100, 0.1)
        sched = make_vp_schedule(0.1, 20.0, 1.0, 1e-3, 100)
        rec = execute(spec, om, sched, sub, PlanConfig(eta=0.0), seed=0)
        assert rec["work"].shape == (1,)
        assert rec["rewards"].shape == (1, 4)

    def test_gs_plan_count_and_diagnostics(self):
        spec = E.gs_spec(4, H=5)
        om = OracleModel(SCHED, spec.d_s, spec.d_a, spec.H)
        sub = make_subdivision(4, 2, 1, 100, 0.1)
        sched = make_vp_schedule(0.1, 20.0, 1.0, 1e-3, 100)
        rec = execute(spec, om, sched, sub, PlanConfig(eta=0.0), seed=1)
        assert rec["work"].shape == (5,)
        assert rec["transition_errors"].shape == (5,)
        assert np.isfinite(rec["transition_errors"]).all()
        from mfdplan.evaluation import transition_error

        assert transition_error(rec, spec) == pytest.approx(
            rec["transition_errors"].mean())

    def test_transition_error_zero_for_exact_dynamics(self):
        # assemble a trajectory that replays the deterministic dynamics
        spec = E.gs_spec(4, H=3)
        rng = np.random.default_rng(5)
        states = [rng.standard_normal((4, 4))]
        actions = []
        for h in range(3):
            a = rng.standard_normal((4, 4))
            actions.append(a)
            states.append(E.expected_next_state(spec, states[-1], a))
        trajs = E.assemble_traj(spec, np.stack(states), np.stack(actions))
        from mfdplan.plan import transition_error_of

        assert transition_error_of(spec, trajs) == pytest.approx(0.0, abs=1e-12)

    def test_transition_error_constant_offset(self):
        spec = E.gs_spec(4, H=2)
        rng = np.random.default_rng(6)
        states = [rng.standard_normal((4, 4))]
        actions = []
        for h in range(2):
            a = rng.standard_normal((4, 4))
            actions.append(a)
            states.append(E.expected_next_state(spec, states[-1], a) + 0.5)
        # careful: the second step evolves from the offset state, so only
        # check the one-step residual on a single-step trajectory
        spec1 = E.gs_spec(4, H=1)
        trajs = E.assemble_traj(spec1, np.stack(states[:2]), np.stack(actions[:1]))
        from mfdplan.plan import transition_error_of

        assert transition_error_of(spec1, trajs) == pytest.approx(
            0.5 * np.sqrt(4), rel=1e-12)
