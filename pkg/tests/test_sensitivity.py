"""Sensitivity ODEs, closed-form decay, adjoint agreement, depth profiles."""

import numpy as np
import pytest

from nrdm.autodiff import forward_op
from nrdm.dynamics import euler_solve
from nrdm.residual import Mapper, MapperSpec, StackModel, with_pinned_gates
from nrdm.sensitivity import (GraphOdeMapper, LinearOdeMapper,
                              adjoint_vs_autodiff_check,
                              integrate_sensitivity_gated,
                              integrate_sensitivity_vanilla,
                              sensitivity_ode_rhs_gated,
                              sensitivity_ode_rhs_vanilla, sensitivity_report)


def sq_loss(out):
    return forward_op("sum", [forward_op("square", [out])])


def flat_trajectory(steps=1000):
    return euler_solve(lambda z, t: 0.0 * z, np.array([0.0]), 0.0, 1.0, steps)


# ---- right-hand sides ---------------------------------------------------------


def test_rhs_vanilla_linear():
    out = sensitivity_ode_rhs_vanilla([1.0], [0.0], 0.0, LinearOdeMapper(1.0))
    assert out.tolist() == [-1.0]


def test_rhs_vanilla_constant_mapper():
    out = sensitivity_ode_rhs_vanilla([3.0], [1.0], 0.0, LinearOdeMapper(0.0))
    assert out.tolist() == [0.0]


def test_rhs_vanilla_square_jacobian():
    class Square:
        def vjp(self, z, t, v):
            return 2.0 * np.asarray(z) * np.asarray(v)

    out = sensitivity_ode_rhs_vanilla([2.0], [3.0], 0.0, Square())
    assert out.tolist() == [-12.0]


def test_rhs_gated_reduces_to_vanilla_at_identity_gates():
    rng = np.random.default_rng(0)
    m = LinearOdeMapper(0.8)
    for _ in range(5):
        s, z = rng.normal(size=(1,)), rng.normal(size=(1,))
        a = sensitivity_ode_rhs_gated(s, z, 0.3, m, 1.0, 0.0).array
        b = sensitivity_ode_rhs_vanilla(s, z, 0.3, m).array
        assert a.tobytes() == b.tobytes()


def test_rhs_gated_hand_value():
    out = sensitivity_ode_rhs_gated([1.0], [0.0], 0.0, LinearOdeMapper(1.0), 0.5, 0.25)
    assert np.allclose(out.array, [-0.75])


def test_rhs_gated_zero_gates_freeze():
    out = sensitivity_ode_rhs_gated([2.0], [1.0], 0.0, LinearOdeMapper(5.0), 0.0, 0.0)
    assert out.tolist() == [0.0]


# ---- integrated traces ----------------------------------------------------------


def test_vanilla_trace_exponential_decay():
    trace = integrate_sensitivity_vanilla([1.0], flat_trajectory(), LinearOdeMapper(1.0))
    assert abs(trace.final[0] - np.exp(-1)) < 1e-3


def test_vanilla_trace_constant_for_zero_jacobian():
    trace = integrate_sensitivity_vanilla([1.0], flat_trajectory(100), LinearOdeMapper(0.0))
    assert np.all(trace.values == 1.0)


def test_vanilla_trace_strictly_decreasing_forward():
    trace = integrate_sensitivity_vanilla([1.0], flat_trajectory(100), LinearOdeMapper(1.0))
    assert np.all(np.diff(trace.values[:, 0]) < 0)


def test_gated_trace_closed_form():
    trace = integrate_sensitivity_gated([1.0], flat_trajectory(), LinearOdeMapper(1.0),
                                        0.5, 0.25)
    assert abs(trace.final[0] - np.exp(-0.75)) < 1e-3


def test_gated_identity_gates_bitwise_equal_to_vanilla():
    traj = flat_trajectory(200)
    a = integrate_sensitivity_vanilla([1.0], traj, LinearOdeMapper(0.7))
    b = integrate_sensitivity_gated([1.0], traj, LinearOdeMapper(0.7), 1.0, 0.0)
    assert a.values.tobytes() == b.values.tobytes()
    assert b.gated and not a.gated


def test_gating_suppresses_decay():
    traj = flat_trajectory(500)
    vanilla = integrate_sensitivity_vanilla([1.0], traj, LinearOdeMapper(1.0))
    gated = integrate_sensitivity_gated([1.0], traj, LinearOdeMapper(1.0), 0.25, 0.0)
    assert gated.final[0] > vanilla.final[0]
    assert abs(gated.final[0] - np.exp(-0.25)) < 1e-3
    assert np.all(gated.values[1:, 0] >= vanilla.values[1:, 0])


def test_euler_richardson_ratio_for_sensitivity():
    exact = np.exp(-1)

    def err(steps):
        trace = integrate_sensitivity_vanilla([1.0], flat_trajectory(steps),
                                              LinearOdeMapper(1.0))
        return abs(trace.final[0] - exact)

    for steps in (50, 100, 200):
        assert 1.7 < err(steps) / err(2 * steps) < 2.3


def test_time_dependent_gates_accepted():
    trace = integrate_sensitivity_gated([1.0], flat_trajectory(400), LinearOdeMapper(1.0),
                                        lambda t: 0.5, lambda t: 0.25)
    assert abs(trace.final[0] - np.exp(-0.75)) < 2e-3


def test_backward_integration_direction():
    trace = integrate_sensitivity_vanilla([1.0], flat_trajectory(200),
                                          LinearOdeMapper(1.0), direction="backward")
    # ds/dt = -s integrated from t=1 down to t=0 grows toward t=0
    assert trace.values[0, 0] > trace.values[-1, 0]
    assert abs(trace.values[0, 0] - np.exp(1)) < 2e-2


def test_graph_ode_mapper_matches_linear():
    m = Mapper(MapperSpec("linear-scalar", 2), scalar_init=0.6)
    gm = GraphOdeMapper(m)
    lm = LinearOdeMapper(0.6)
    z, v = np.array([0.4, -1.0]), np.array([1.0, 2.0])
    assert np.allclose(gm(z), lm(z))
    assert np.allclose(gm.vjp(z, None, v), lm.vjp(z, None, v))


# ---- adjoint vs autodiff ---------------------------------------------------------


def test_adjoint_linear_stack_exact():
    model = StackModel.build("flow", 6, 1, "linear-scalar", scalar_init=0.5,
                             alpha_init=0.9, beta_init=0.1)
    gap = adjoint_vs_autodiff_check(model, np.array([[1.3]]), sq_loss)
    assert gap < 1e-12


def test_adjoint_random_mlp_stack():
    rng = np.random.default_rng(1)
    model = StackModel.build("flow", 8, 3, "mlp2", conditioning="concat",
                             out_scale=0.4, rng=rng)
    gap = adjoint_vs_autodiff_check(model, rng.normal(size=(2, 3)), sq_loss, t=0.3)
    assert gap < 1e-8


def test_adjoint_identity_stack_passes_loss_gradient_through():
    model = StackModel.build("flow", 4, 2, "mlp2", alpha_init=0.0, beta_init=0.0,
                             rng=np.random.default_rng(2))
    from nrdm.autodiff import Tape, backward
    z0 = np.array([[0.5, -0.4]])
    tape = Tape()
    pn = model.bind(tape)
    z = tape.leaf(z0)
    out, _ = model.forward(tape, pn, z, None)
    g = backward(sq_loss(out), wrt=[z])[z].array
    assert np.allclose(g, 2.0 * z0)
    assert adjoint_vs_autodiff_check(model, z0, sq_loss) < 1e-12


@pytest.mark.parametrize("fashion", ["flow", "u"])
@pytest.mark.parametrize("variant", ["v0", "v1", "v2", "v3", "v4"])
def test_adjoint_matrix_medium_depth(fashion, variant):
    rng = np.random.default_rng(hash((fashion, variant)) % 2 ** 31)
    model = StackModel.build(fashion, 8, 3, "mlp2", variant=variant,
                             conditioning="concat", out_scale=0.3,
                             alpha_init=0.9, beta_init=0.05, rng=rng)
    gap = adjoint_vs_autodiff_check(model, rng.normal(size=(2, 3)), sq_loss, t=0.5)
    assert gap < 1e-7


# ---- per-depth report -------------------------------------------------------------


def test_report_flat_for_identity_stack():
    model = StackModel.build("flow", 6, 2, "mlp2", alpha_init=0.0, beta_init=0.0,
                             rng=np.random.default_rng(3))
    rep = sensitivity_report(model, np.random.default_rng(4).normal(size=(8, 2)),
                             sq_loss)
    assert np.allclose(rep.normalized, 1.0)


def test_report_monotone_for_contractive_ungated_stack():
    model = StackModel.build("flow", 8, 1, "linear-scalar", scalar_init=-0.3)
    rep = sensitivity_report(model, np.array([[1.0]]), sq_loss)
    # each unit multiplies the state gradient by 0.7, so sensitivity falls
    # toward depth 0
    assert np.all(np.diff(rep.normalized) > 0)
    assert rep.normalized[-1] == 1.0
    assert abs(rep.normalized[0] - 0.7 ** 7) < 1e-12


def test_report_rows_and_gate_columns():
    model = StackModel.build("flow", 3, 2, "affine", alpha_init=0.5, beta_init=0.2,
                             rng=np.random.default_rng(5))
    rep = sensitivity_report(model, np.ones((4, 2)), sq_loss, step=17)
    rows = rep.rows()
    assert len(rows) == 3
    assert {r["step"] for r in rows} == {17}
    assert rows[0]["alpha"] == 0.5 and rows[0]["beta"] == 0.2
    assert set(rows[0]) == {"step", "depth", "alpha", "beta",
                            "sensitivity_norm", "normalized"}


def test_report_on_u_stack():
    model = StackModel.build("u", 4, 2, "mlp2", rng=np.random.default_rng(6))
    rep = sensitivity_report(model, np.ones((4, 2)), sq_loss)
    assert len(rep.depths) == 3  # encoder unit inputs
    assert rep.normalized.max() == 1.0


def test_pinned_gate_copy_changes_profile_of_gated_model():
    model = StackModel.build("flow", 5, 1, "linear-scalar", scalar_init=-0.4,
                             alpha_init=0.5, beta_init=0.0)
    gated = sensitivity_report(model, np.array([[1.0]]), sq_loss)
    ungated = sensitivity_report(with_pinned_gates(model), np.array([[1.0]]), sq_loss)
    # alpha=0.5 halves the contraction: per-unit factor 0.8 vs 0.6
    assert gated.min_normalized > ungated.min_normalized
