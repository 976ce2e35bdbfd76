"""Forward process, PF-ODE, solvers, analytic scores, and marginal agreement."""

import numpy as np
import pytest

from nrdm.autodiff import Tensor, finite_difference_grad
from nrdm.dynamics import (DiscreteSchedule, OuSchedule, ParameterizedSchedule,
                           ScoreOracle, Trajectory, VeSchedule, VpSchedule,
                           analytic_score, analytic_score_t, ddpm_forward,
                           euler_solve, forward_sde_step, heun_solve, make_rng,
                           pf_ode_rhs, sde_solve, sde_vs_pfode_marginal_check)

MIX = ScoreOracle(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.array([1.0, 1.0]))


class DriftOnly(OuSchedule):
    """dz = -z dt (no noise), for deterministic-flow checks."""

    def drift(self, z, t):
        return -np.asarray(z)

    def sigma(self, t):
        return 0.0


# ---- Euler-Maruyama step -------------------------------------------------------


def test_sde_step_drift_only():
    assert np.allclose(forward_sde_step(1.0, 0.0, 0.1, DriftOnly(), 0.0).array, 0.9)


def test_sde_step_hand_value():
    class S(DriftOnly):
        def sigma(self, t):
            return 1.0

    out = forward_sde_step(1.0, 0.0, 0.04, S(), 1.0)
    assert np.allclose(out.array, 1.16)


def test_sde_step_zero_dt_identity():
    z = np.array([0.3, -0.7])
    assert forward_sde_step(z, 0.5, 0.0, OuSchedule(), np.ones(2)).tolist() == z.tolist()


def test_sde_step_rejects_negative_dt():
    with pytest.raises(ValueError):
        forward_sde_step(1.0, 0.0, -0.1, OuSchedule(), 0.0)


# ---- discrete forward process -----------------------------------------------------


def test_ddpm_no_noise_at_unit_retention():
    sched = DiscreteSchedule(np.array([1.0, 0.5, 1e-5]))
    assert ddpm_forward(2.0, 0, sched, 123.0).item() == 2.0


def test_ddpm_pure_noise_at_zero_retention():
    sched = DiscreteSchedule(np.array([1.0, 0.5, 1e-12]))
    assert abs(ddpm_forward(2.0, 2, sched, 1.0).item() - 1.0) < 1e-5


def test_ddpm_hand_value():
    sched = DiscreteSchedule(np.array([1.0, 0.25, 1e-5]))
    out = ddpm_forward(2.0, 1, sched, 1.0)
    assert abs(out.item() - (0.5 * 2.0 + np.sqrt(0.75))) < 1e-12


def test_ddpm_index_out_of_range():
    sched = DiscreteSchedule.default(16)
    with pytest.raises(IndexError):
        ddpm_forward(1.0, 16, sched, 0.0)


def test_ddpm_variance_matches_retention():
    # Var over noise of x_t equals 1 - alpha_bar; sample check within 3 SE
    sched = DiscreteSchedule.default(100)
    rng = make_rng(0)
    n = 20000
    idx = 60
    eps = rng.standard_normal(n)
    xt = np.array([ddpm_forward(0.7, idx, sched, e).item() for e in eps[:2000]])
    want = 1.0 - sched.alpha_bar[idx]
    se = want * np.sqrt(2.0 / (len(xt) - 1))
    assert abs(np.var(xt, ddof=1) - want) < 3 * se


def test_default_table_shape_and_monotonicity():
    sched = DiscreteSchedule.default(1000)
    assert sched.steps == 1000
    assert sched.alpha_bar[0] == 0.9999 and sched.alpha_bar[-1] == 1e-5
    assert np.all(np.diff(sched.alpha_bar) <= 0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        DiscreteSchedule(np.array([0.5, 0.9, 1e-5]))  # increasing start
    with pytest.raises(ValueError):
        DiscreteSchedule(np.array([1.0, 0.5, 0.9]))   # non-monotone / bad tail


def test_schedule_csv_roundtrip(tmp_path):
    path = tmp_path / "table.csv"
    path.write_text("t,alpha_bar\n0.0,0.9999\n0.5,0.5\n1.0,0.00001\n")
    sched = DiscreteSchedule.from_csv(path)
    assert sched.alpha_bar.tolist() == [0.9999, 0.5, 1e-5]
    bad = tmp_path / "bad.csv"
    bad.write_text("time,ab\n0,1\n")
    with pytest.raises(ValueError):
        DiscreteSchedule.from_csv(bad)
    nonmono = tmp_path / "nonmono.csv"
    nonmono.write_text("t,alpha_bar\n0.0,0.9999\n0.5,0.9999\n1.0,0.00001\n")
    with pytest.raises(ValueError):
        DiscreteSchedule.from_csv(nonmono)


# ---- probability-flow right-hand side -----------------------------------------------


def test_pf_rhs_zero_everything():
    class Z(OuSchedule):
        def drift(self, z, t):
            return np.zeros_like(z)

        def sigma(self, t):
            return 0.0

    out = pf_ode_rhs(np.array([1.0]), 0.2, Z(), lambda z, t: 100 * z)
    assert out.tolist() == [0.0]


def test_pf_rhs_ou_stationary_cancellation():
    ou = OuSchedule()
    for z in (-2.0, 0.3, 1.7):
        out = pf_ode_rhs(np.array([z]), 0.5, ou, lambda zz, tt: -zz)
        assert np.allclose(out.array, 0.0)


def test_pf_rhs_substitution():
    class S(OuSchedule):
        def drift(self, z, t):
            return np.zeros_like(z)

        def sigma(self, t):
            return np.sqrt(2.0)

    out = pf_ode_rhs(np.array([0.3]), 0.1, S(), lambda z, t: -z)
    assert np.allclose(out.array, [0.3])


# ---- fixed-step solvers ------------------------------------------------------------


def test_euler_one_step_linear():
    traj = euler_solve(lambda z, t: -z, 1.0, 0.0, 1.0, 1)
    assert traj.final == 0.0


def test_euler_hundred_steps_near_exponential():
    traj = euler_solve(lambda z, t: -z, 1.0, 0.0, 1.0, 100)
    assert abs(traj.final - 0.36603) < 1e-4
    assert abs(traj.final - np.exp(-1)) < 2e-3


def test_heun_ten_steps_close():
    traj = heun_solve(lambda z, t: -z, 1.0, 0.0, 1.0, 10)
    assert abs(traj.final - np.exp(-1)) < 1e-3


def test_zero_rhs_constant_trajectory():
    traj = euler_solve(lambda z, t: 0.0 * z, np.array([2.0]), 0.0, 1.0, 7)
    assert np.all(traj.states == 2.0)


def test_solver_rejects_zero_steps():
    with pytest.raises(ValueError):
        euler_solve(lambda z, t: z, 1.0, 0.0, 1.0, 0)


@pytest.mark.parametrize("solve,lo,hi", [(euler_solve, 1.7, 2.3), (heun_solve, 3.4, 4.6)])
def test_solver_order_richardson(solve, lo, hi):
    exact = np.exp(-1)

    def err(steps):
        return abs(solve(lambda z, t: -z, 1.0, 0.0, 1.0, steps).final - exact)

    for steps in (20, 40, 80):
        ratio = err(steps) / err(2 * steps)
        assert lo < ratio < hi, (steps, ratio)


def test_reverse_integration_times_stored_ascending():
    traj = euler_solve(lambda z, t: -z, 1.0, 1.0, 0.0, 10)
    assert np.all(np.diff(traj.times) > 0)
    assert traj.initial != traj.final
    assert traj.t_start == 1.0 and traj.t_end == 0.0


def test_trajectory_alignment_validation():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.5]), np.zeros((3, 1)), 0.0, 0.5)
    with pytest.raises(ValueError):
        Trajectory(np.array([0.5, 0.0]), np.zeros((2, 1)), 0.0, 0.5)


# ---- analytic scores ----------------------------------------------------------------


def test_score_single_gaussian():
    assert analytic_score(ScoreOracle.single(0.0, 1.0), [2.0]).tolist() == [-2.0]


def test_score_symmetric_mixture_zero_at_center():
    assert np.allclose(analytic_score(MIX, [0.0]).array, 0.0)


def test_score_mixture_hand_value():
    want = -2 * np.exp(-2) / (1 + np.exp(-2))
    assert abs(analytic_score(MIX, [1.0]).item() - want) < 1e-12


def test_score_matches_log_density_gradient():
    oracle = ScoreOracle(np.array([0.3, 0.7]), np.array([[0.0, 1.0], [-1.0, 0.5]]),
                         np.array([0.5, 1.5]))
    rng = make_rng(3)
    for z in rng.normal(size=(5, 2)):
        fd = finite_difference_grad(
            lambda v: float(oracle.log_density(v.array[None, :])[0]), Tensor(z), 1e-5)
        ad = oracle.score(z[None, :])[0]
        assert np.max(np.abs(ad - fd.array)) / max(np.max(np.abs(fd.array)), 1e-8) < 1e-6


def test_score_t_at_zero_equals_plain_score():
    ou = OuSchedule()
    z = np.array([[0.4, -0.2]])
    o2 = ScoreOracle(np.array([0.5, 0.5]), np.array([[-1.0, 0.0], [1.0, 0.0]]),
                     np.array([0.4, 0.4]))
    assert np.allclose(o2.score_t(z, 0.0, ou), o2.score(z))


def test_vp_preserves_unit_gaussian_score():
    vp = VpSchedule()
    oracle = ScoreOracle.single(0.0, 1.0)
    for t in (0.1, 0.4, 0.7, 0.99):
        s = analytic_score_t(oracle, [0.7], t, vp)
        assert np.allclose(s.array, [-0.7], atol=1e-12)


def test_mixture_score_approaches_gaussian_limit_near_terminal_time():
    vp = VpSchedule()
    o2 = ScoreOracle(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.array([0.3, 0.3]))
    for z in (-1.0, 0.2, 1.5):
        s = analytic_score_t(o2, [z], 0.999, vp).item()
        assert abs(s - (-z)) < 0.05


def test_score_t_rejects_parameterized_schedule():
    sched = ParameterizedSchedule(dim=1)
    with pytest.raises(ValueError):
        analytic_score_t(MIX, [0.0], 0.5, sched)


def test_oracle_validation():
    with pytest.raises(ValueError):
        ScoreOracle(np.array([0.6, 0.6]), np.array([[0.0], [1.0]]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        ScoreOracle(np.array([1.0]), np.array([[0.0]]), np.array([-1.0]))


def test_vp_pushforward_preserves_standard_normal_samples():
    vp = VpSchedule()
    rng = make_rng(5)
    n = 20000
    x0 = rng.standard_normal((n, 2))
    for t in (0.3, 0.9):
        zt = vp.perturb(x0, np.full(n, t), rng.standard_normal((n, 2)))
        cov = np.cov(zt.T)
        assert np.max(np.abs(cov - np.eye(2))) < 3 * np.sqrt(2.0 / n) + 0.01


# ---- marginal equivalence ------------------------------------------------------------


def test_ou_pf_ode_matches_closed_form_gaussian_flow():
    # per-sample closed form: z(t) = m(t) + sqrt(v(t)/v0) (z0 - m0)
    ou = OuSchedule()
    oracle = ScoreOracle.single(0.7, 0.25)
    m0, v0 = 0.7, 0.25

    def closed(z0, t):
        m = m0 * np.exp(-0.5 * t)
        v = v0 * np.exp(-t) + 1.0 - np.exp(-t)
        return m + np.sqrt(v / v0) * (z0 - m0)

    z0 = np.linspace(-1.0, 2.0, 9)[:, None]
    want = closed(z0, 1.0)

    def rhs(z, t):
        return pf_ode_rhs(z, t, ou, lambda zz, tt: oracle.score_t(zz, tt, ou)).array

    got_euler = euler_solve(rhs, z0, 0.0, 1.0, 200).final
    got_heun = heun_solve(rhs, z0, 0.0, 1.0, 200).final
    rel_e = np.max(np.abs(got_euler - want)) / np.max(np.abs(want))
    rel_h = np.max(np.abs(got_heun - want)) / np.max(np.abs(want))
    assert rel_e < 1e-2
    assert rel_h < 1e-3


def test_marginal_check_zero_noise_identical_flows():
    oracle = ScoreOracle.single(0.5, 0.3)
    report = sde_vs_pfode_marginal_check(oracle, DriftOnly(), 500,
                                         np.linspace(0.1, 1.0, 5), seed=2, substeps=40)
    assert report.max_mean < 1e-2 and report.max_cov < 1e-2


def test_marginal_check_stationary_gaussian():
    n = 4000
    report = sde_vs_pfode_marginal_check(ScoreOracle.single(0.0, 1.0), OuSchedule(),
                                         n, np.linspace(0.1, 1.0, 8), seed=3)
    assert report.max_mean < 3 * np.sqrt(2.0 / n)


def test_sde_solve_is_seed_deterministic():
    a = sde_solve(OuSchedule(), np.zeros((10, 1)), 0.0, 1.0, 20, seed=9)
    b = sde_solve(OuSchedule(), np.zeros((10, 1)), 0.0, 1.0, 20, seed=9)
    assert a.states.tobytes() == b.states.tobytes()


def test_ve_schedule_zero_drift_and_variance_growth():
    ve = VeSchedule(sigma_min=0.01, sigma_max=8.0)
    z = np.array([1.0, -2.0])
    assert ve.drift(z, 0.5).tolist() == [0.0, 0.0]
    assert float(ve.added_var(0.0)) == 0.0
    ts = np.linspace(0.1, 1.0, 5)
    assert np.all(np.diff(ve.added_var(ts)) > 0)
    assert abs(float(ve.added_var(1.0)) - (8.0 ** 2 - 0.01 ** 2)) < 1e-9
    rng = make_rng(10)
    prior = ve.prior_sample((20000,), rng)
    assert abs(np.std(prior) - 8.0) < 0.2
    # sigma(t)^2 equals d added_var / dt for the geometric ramp
    h = 1e-6
    dv = (float(ve.added_var(0.5 + h)) - float(ve.added_var(0.5 - h))) / (2 * h)
    assert abs(ve.sigma(0.5) ** 2 - dv) / dv < 1e-6


def test_parameterized_schedule_gate_signs():
    sched = ParameterizedSchedule(dim=3, rng=make_rng(11))
    for t in (0.0, 0.5, 1.0):
        alpha = sched.alpha_gate(np.array([t]))
        assert alpha.shape == (1, 3)
        assert np.all(alpha <= 0)
        assert np.all(sched.sigma(np.array([t])) >= 0)
    out = pf_ode_rhs(np.ones((1, 3)), 0.5, sched, lambda z, t: -z)
    assert out.shape == (1, 3)
