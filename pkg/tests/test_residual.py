"""Gated unit semantics, stack compositions, variants, and their gradients."""

import numpy as np
import pytest

from nrdm.autodiff import Tape, Tensor, backward, finite_difference_grad, forward_op
from nrdm.residual import (GateParams, Mapper, MapperSpec, ScoreNet, StackModel,
                           flow_stack_forward, gating_residual_ode_rhs,
                           mrs_forward, time_embedding, u_stack_forward,
                           variant_forward, with_pinned_gates)


def linear_mapper(a: float, width: int = 1) -> Mapper:
    return Mapper(MapperSpec("linear-scalar", width), scalar_init=a)


def gates(alpha: float, beta: float) -> GateParams:
    return GateParams(Tensor([alpha]), Tensor([beta]))


class _SquareMapper(Mapper):
    """f(z) = z*z, for hand-checkable single-unit arithmetic."""

    def __init__(self, width=1):
        self.spec = MapperSpec("linear-scalar", width)
        self.p = {}

    def apply(self, tape, pn, prefix, z, emb):
        return forward_op("square", [z])


# ---- single unit ---------------------------------------------------------------


def test_mrs_zero_gates_is_identity():
    out = mrs_forward([1.0, 2.0], linear_mapper(3.0, width=2), gates(0.0, 0.0))
    assert out.tolist() == [1.0, 2.0]


def test_mrs_vanilla_residual():
    out = mrs_forward([1.0], linear_mapper(2.0), gates(1.0, 0.0))
    assert out.tolist() == [3.0]


def test_mrs_hand_example_with_square_mapper():
    out = mrs_forward([0.5], _SquareMapper(), gates(2.0, 0.1))
    assert np.allclose(out.array, [1.1])


def test_mrs_width_mismatch():
    with pytest.raises(Exception) as err:
        mrs_forward([1.0, 2.0, 3.0], linear_mapper(1.0, width=2), gates(1.0, 0.0))
    assert "width" in str(err.value)


# ---- variants ------------------------------------------------------------------


def test_variant_v3_equals_v0_at_identity_gates_bit_exact():
    rng = np.random.default_rng(0)
    m = Mapper(MapperSpec("mlp2", 4), rng=rng)
    g = gates(1.0, 0.0)
    z = rng.normal(size=(3, 4))
    a = variant_forward(z, m, g, "v0").array
    b = variant_forward(z, m, g, "v3").array
    assert a.tobytes() == b.tobytes()


def test_variant_v4_equals_v0_at_zero_shift_bit_exact():
    rng = np.random.default_rng(1)
    m = Mapper(MapperSpec("affine", 3), rng=rng)
    g = gates(0.37, 0.0)
    z = rng.normal(size=(2, 3))
    assert variant_forward(z, m, g, "v0").array.tobytes() == \
        variant_forward(z, m, g, "v4").array.tobytes()


def test_variant_v1_hand_example():
    out = variant_forward([1.0], linear_mapper(1.0), gates(2.0, 1.0), "v1")
    assert np.allclose(out.array, [4.0])  # 1 + f(2*1 + 1)


def test_variant_v2_hand_value():
    out = variant_forward([2.0], linear_mapper(3.0), gates(0.5, 0.25), "v2")
    assert np.allclose(out.array, [0.5 * 2.0 + 6.0 + 0.25])


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        variant_forward([1.0], linear_mapper(1.0), gates(1.0, 0.0), "v9")


def test_v3_build_pins_gates():
    m = StackModel.build("flow", 3, 2, "affine", variant="v3",
                         alpha_init=0.3, beta_init=0.7)
    for g in m.gates:
        assert g.alpha.tolist() == [1.0] and g.beta.tolist() == [0.0]
    assert m.frozen_names() == {f"u{i:02d}.gate.{k}" for i in range(3)
                                for k in ("alpha", "beta")}


# ---- flow stacks ----------------------------------------------------------------


def test_flow_doubling_recursion():
    model = StackModel.build("flow", 2, 1, "linear-scalar", scalar_init=1.0)
    out, states = flow_stack_forward([1.0], model)
    assert out.tolist() == [4.0]
    assert [s.tolist() for s in states] == [[1.0], [2.0], [4.0]]


def test_flow_zero_gates_identity_chain():
    model = StackModel.build("flow", 5, 3, "mlp2", alpha_init=0.0, beta_init=0.0,
                             rng=np.random.default_rng(3))
    z0 = np.array([0.3, -1.2, 2.0])
    out, states = flow_stack_forward(z0, model)
    assert out.tolist() == z0.tolist()
    for s in states:
        assert s.tolist() == z0.tolist()


def test_flow_depth_one_reduces_to_single_unit():
    rng = np.random.default_rng(4)
    model = StackModel.build("flow", 1, 2, "affine", alpha_init=0.8, beta_init=0.1,
                             rng=rng)
    z0 = np.array([0.5, -0.5])
    out, _ = flow_stack_forward(z0, model)
    unit = mrs_forward(z0, model.mappers[0], model.gates[0])
    assert out.tolist() == unit.tolist()


def test_flow_rejects_u_model():
    model = StackModel.build("u", 2, 1, "linear-scalar")
    with pytest.raises(ValueError):
        flow_stack_forward([1.0], model)


# ---- u-shaped stacks ---------------------------------------------------------------


def test_u_zero_readout_returns_input():
    model = StackModel.build("u", 2, 1, "linear-scalar", scalar_init=5.0)
    for g in (model.gates[0][1],):
        g.alpha = Tensor([0.0])
        g.beta = Tensor([0.0])
    out, _, _ = u_stack_forward([1.0], model)
    assert out.tolist() == [1.0]


def test_u_hand_recursion_depth_two():
    model = StackModel.build("u", 2, 1, "linear-scalar", scalar_init=1.0)
    model.mappers[0][0].p["a"] = Tensor([2.0])  # read-in doubles
    out, enc, dec = u_stack_forward([1.0], model)
    assert [e.tolist() for e in enc] == [[1.0], [2.0]]
    assert [d.tolist() for d in dec] == [[3.0], [2.0]]
    assert out.tolist() == [3.0]


def test_u_depth_four_hand_recursion_and_pairing():
    # linear read-in a=2, read-out a=1, unit gates: encoder states 1,2,4,8;
    # decoder: d3=8, d2=4+8, d1=2+12, d0=1+14
    model = StackModel.build("u", 4, 1, "linear-scalar", scalar_init=1.0)
    for ml, mr in model.mappers:
        ml.p["a"] = Tensor([2.0])
    out, enc, dec = u_stack_forward([1.0], model)
    assert [e.tolist() for e in enc] == [[1.0], [2.0], [4.0], [8.0]]
    assert [d.tolist() for d in dec] == [[15.0], [14.0], [12.0], [8.0]]
    assert out.tolist() == [15.0]


def test_u_zero_gates_identity_on_output():
    model = StackModel.build("u", 4, 3, "mlp2", alpha_init=0.0, beta_init=0.0,
                             rng=np.random.default_rng(5))
    z0 = np.array([1.0, -2.0, 0.5])
    out, _, dec = u_stack_forward(z0, model)
    assert out.tolist() == z0.tolist()


def test_u_requires_depth_two():
    with pytest.raises(ValueError):
        StackModel.build("u", 1, 1, "linear-scalar")


def test_u_each_encoder_state_feeds_exactly_one_decoder_skip():
    # with read-out f == 0 the decoder output at level i is exactly s_i
    model = StackModel.build("u", 4, 2, "mlp2", rng=np.random.default_rng(6))
    for _, mr in model.mappers:
        mr.p["w2"] = Tensor(np.zeros_like(mr.p["w2"].array))
        mr.p["b2"] = Tensor(np.zeros_like(mr.p["b2"].array))
    z0 = np.random.default_rng(7).normal(size=(2,))
    _, enc, dec = u_stack_forward(z0, model)
    for e, d in zip(enc, dec):
        assert np.allclose(e.array, d.array)


# ---- discrete-to-continuous consistency ----------------------------------------------


def closed_form_gated_linear(z0, alpha, beta, a):
    c = beta / (alpha * a)
    return (z0 + c) * np.exp(alpha * a) - c


@pytest.mark.parametrize("alpha,beta,a", [(1.0, 0.0, -0.9), (0.7, 0.3, 0.5)])
def test_flow_stack_converges_to_gating_ode(alpha, beta, a):
    z0 = 1.3
    exact = closed_form_gated_linear(z0, alpha, beta, a)
    errors = []
    for L in (16, 32, 64, 128):
        model = StackModel.build("flow", L, 1, "linear-scalar", scalar_init=a,
                                 alpha_init=alpha / L, beta_init=beta / L)
        out, _ = flow_stack_forward([z0], model)
        errors.append(abs(out.item() - exact))
    ratios = [errors[i] / errors[i + 1] for i in range(3)]
    for r in ratios:
        assert 1.7 < r < 2.3, ratios


# ---- continuous-depth rhs ---------------------------------------------------------


def test_ode_rhs_zero_gates_stationary():
    out = gating_residual_ode_rhs([1.0, 2.0], 0.5, lambda z, t: z + 1.0, 0.0, 0.0)
    assert out.tolist() == [0.0, 0.0]


def test_ode_rhs_direct_substitution():
    out = gating_residual_ode_rhs([2.0], 0.0, lambda z, t: -z, 1.0, 0.0)
    assert out.tolist() == [-2.0]


def test_ode_rhs_hand_value():
    out = gating_residual_ode_rhs([2.0], 1.0, lambda z, t: z * z, 0.5, 0.1)
    assert np.allclose(out.array, [2.1])


def test_ode_rhs_rejects_time_outside_unit_interval():
    with pytest.raises(ValueError):
        gating_residual_ode_rhs([1.0], 1.5, lambda z, t: z, 1.0, 0.0)


# ---- differentiability through stacks ------------------------------------------------


def _stack_loss_value(model, z, t=None):
    out, _ = model.apply(z, t)
    return float(np.mean(out.array ** 2))


@pytest.mark.parametrize("fashion", ["flow", "u"])
@pytest.mark.parametrize("kind,cond", [("mlp2", "concat"), ("affine", "none"),
                                       ("mlp2", "film")])
def test_stack_gradients_match_finite_differences(fashion, kind, cond):
    rng = np.random.default_rng(hash((fashion, kind, cond)) % 2 ** 31)
    model = StackModel.build(fashion, 3, 3, kind, conditioning=cond,
                             alpha_init=0.8, beta_init=0.1, out_scale=0.5, rng=rng)
    z = rng.normal(size=(2, 3))
    t = 0.3 if cond != "none" else None

    tape = Tape()
    pn = model.bind(tape)
    z_node = tape.leaf(z)
    emb = None
    if cond != "none":
        emb = tape.leaf(time_embedding(np.full(2, t)))
    out, _ = model.forward(tape, pn, z_node, emb)
    loss = forward_op("mean", [forward_op("square", [out])])
    grads = backward(loss, wrt=[z_node] + list(pn.values()))

    # input gradient
    fd = finite_difference_grad(lambda v: _stack_loss_value(model, v.array, t),
                                Tensor(z), 1e-5).array
    ad = grads[z_node].array
    assert np.max(np.abs(ad - fd)) / max(np.max(np.abs(fd)), 1e-8) < 1e-5

    # a representative slice of parameters: every gate plus first mapper params
    params = model.params()
    chosen = [n for n in params if "gate" in n]
    chosen += [n for n in params if n.startswith("u00.")][:4]
    for name in chosen:
        orig = params[name]

        def f(v, name=name):
            model.set_param(name, v)
            val = _stack_loss_value(model, z, t)
            model.set_param(name, orig)
            return val

        fd = finite_difference_grad(f, orig, 1e-5).array
        ad = grads[pn[name]].array
        assert np.max(np.abs(ad - fd)) / max(np.max(np.abs(fd)), 1e-6) < 1e-5, name


# ---- misc model plumbing ---------------------------------------------------------------


def test_per_channel_gate_mode_shapes():
    model = StackModel.build("flow", 2, 4, "affine", gate_mode="channel")
    assert model.gates[0].alpha.shape == (4,)
    out, _ = flow_stack_forward(np.ones(4), model)
    assert out.shape == (4,)


def test_gate_shape_mismatch_rejected():
    with pytest.raises(Exception):
        GateParams(Tensor([1.0]), Tensor([0.0, 0.0]))


def test_time_embedding_shape_and_range():
    emb = time_embedding(np.array([0.0, 0.5, 1.0]), 32)
    assert emb.shape == (3, 32)
    assert np.all(np.abs(emb) <= 1.0)


def test_with_pinned_gates_shares_mappers_but_pins_gates():
    rng = np.random.default_rng(8)
    model = StackModel.build("flow", 3, 2, "mlp2", alpha_init=0.2, beta_init=0.4,
                             rng=rng)
    pinned = with_pinned_gates(model, 1.0, 0.0)
    assert pinned.gates[0].alpha.tolist() == [1.0]
    assert pinned.mappers[0].p["w1"] is model.mappers[0].p["w1"]
    z = rng.normal(size=(2, 2))
    a, _ = pinned.apply(z)
    model.gates[0].alpha, model.gates[0].beta = Tensor([1.0]), Tensor([0.0])
    model.gates[1].alpha, model.gates[1].beta = Tensor([1.0]), Tensor([0.0])
    model.gates[2].alpha, model.gates[2].beta = Tensor([1.0]), Tensor([0.0])
    b, _ = model.apply(z)
    assert a.array.tobytes() == b.array.tobytes()


def test_scorenet_forward_shapes_and_score_fn():
    rng = np.random.default_rng(9)
    stack = StackModel.build("flow", 2, 8, "mlp2", conditioning="concat", rng=rng)
    net = ScoreNet(2, stack, rng=rng)
    z = rng.normal(size=(5, 2))
    out = net.apply(z, 0.5)
    assert out.shape == (5, 2)
    fn = net.score_fn()
    assert np.allclose(fn(z, 0.5), out)


def test_class_conditional_embedding_changes_output_and_trains():
    rng = np.random.default_rng(11)
    stack = StackModel.build("flow", 2, 8, "mlp2", conditioning="concat", rng=rng)
    net = ScoreNet(2, stack, rng=rng, n_classes=3)
    z = rng.normal(size=(4, 2))
    out_a = net.apply(z, 0.5, labels=[0, 0, 0, 0])
    out_b = net.apply(z, 0.5, labels=[1, 1, 1, 1])
    assert not np.allclose(out_a, out_b)

    tape = Tape()
    pn = net.bind(tape)
    out, _ = net.forward(tape, pn, tape.leaf(z), 0.5, labels=[0, 1, 2, 0])
    loss = forward_op("mean", [forward_op("square", [out])])
    g = backward(loss, wrt=[pn["cls.table"]])[pn["cls.table"]].array
    assert g.shape == (3, 32)
    # every label appeared in the batch, so every embedding row gets gradient
    assert all(np.linalg.norm(g[k]) > 0 for k in range(3))


def test_unconditional_model_rejects_labels():
    stack = StackModel.build("flow", 2, 4, "mlp2", conditioning="concat")
    net = ScoreNet(2, stack)
    with pytest.raises(ValueError):
        net.apply(np.ones((2, 2)), 0.5, labels=[0, 1])
