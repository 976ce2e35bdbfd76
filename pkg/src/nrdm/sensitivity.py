"""Residual-sensitivity machinery.

The sensitivity of the loss to an intermediate state decays along deep stacks;
this module provides the continuous sensitivity ODEs (plain and gate-modulated),
their Euler integration along recorded trajectories, an independent discrete
adjoint that cross-checks reverse-mode autodiff, and the per-depth profile
report used to visualize decay during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, as_array, backward, forward_op, vjp
from .dynamics import Trajectory
from .residual import Mapper, ScoreNet, StackModel, gated_update, time_embedding

__all__ = [
    "SensitivityTrace",
    "SensitivityReport",
    "GraphOdeMapper",
    "LinearOdeMapper",
    "sensitivity_ode_rhs_vanilla",
    "sensitivity_ode_rhs_gated",
    "integrate_sensitivity_vanilla",
    "integrate_sensitivity_gated",
    "adjoint_vs_autodiff_check",
    "sensitivity_report",
]


class LinearOdeMapper:
    """f(z) = a * z with an exact Jacobian, for closed-form checks."""

    def __init__(self, a: float):
        self.a = float(a)

    def __call__(self, z, t=None) -> np.ndarray:
        return self.a * as_array(z)

    def vjp(self, z, t, v) -> np.ndarray:
        return self.a * as_array(v)


class GraphOdeMapper:
    """Wraps a feature mapper so the ODE machinery can query values and
    vector-Jacobian products through the autodiff tape."""

    def __init__(self, mapper: Mapper):
        self.mapper = mapper

    def _run(self, z, t):
        tape = Tape()
        pn = {f"f.{k}": tape.leaf(v) for k, v in self.mapper.p.items()}
        z_arr = np.atleast_2d(as_array(z))
        z_node = tape.leaf(z_arr)
        emb = None
        if self.mapper.spec.conditioning != "none":
            if t is None:
                raise ValueError("time-conditioned mapper needs t")
            emb = tape.leaf(time_embedding(np.broadcast_to(np.asarray(t, float),
                                                           (z_arr.shape[0],))))
        out = self.mapper.apply(tape, pn, "f.", z_node, emb)
        return z_node, out

    def __call__(self, z, t=None) -> np.ndarray:
        _, out = self._run(z, t)
        res = out.value.array
        return res[0] if as_array(z).ndim == 1 else res

    def vjp(self, z, t, v) -> np.ndarray:
        z_node, out = self._run(z, t)
        seed = np.atleast_2d(as_array(v))
        grad = vjp(out, [z_node], seed)[0].array
        return grad[0] if as_array(z).ndim == 1 else grad


def _gate_at(gate, t: float) -> np.ndarray:
    return np.asarray(gate(t) if callable(gate) else gate, dtype=np.float64)


def sensitivity_ode_rhs_vanilla(s, z, t, mapper) -> Tensor:
    """Plain sensitivity flow: ds/dt = -s . df(z,t)/dz as a VJP."""
    return Tensor(-as_array(mapper.vjp(z, t, s)))


def sensitivity_ode_rhs_gated(s, z, t, mapper, alpha, beta) -> Tensor:
    """Gate-modulated sensitivity flow: ds/dt = -(alpha s) . df/dz - beta s."""
    a = _gate_at(alpha, t)
    b = _gate_at(beta, t)
    s_arr = as_array(s)
    return Tensor(-as_array(mapper.vjp(z, t, a * s_arr)) - b * s_arr)


@dataclass
class SensitivityTrace:
    """Sensitivity values along a trajectory; times stored ascending."""

    times: np.ndarray
    values: np.ndarray
    kind: str = "state"      # "state" or "parameter"
    gated: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[0] != self.times.size:
            raise ValueError("values count must equal times count")

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]


def _integrate(s_init, trajectory: Trajectory, rhs, direction: str) -> tuple[np.ndarray, np.ndarray]:
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be forward or backward, got {direction!r}")
    ts = trajectory.times
    zs = trajectory.states
    if zs.shape[0] != ts.size:
        raise ValueError("trajectory states do not cover the integration nodes")
    order = range(ts.size) if direction == "forward" else range(ts.size - 1, -1, -1)
    idx = list(order)
    s = np.array(as_array(s_init), dtype=np.float64, copy=True)
    values = np.empty((ts.size,) + s.shape)
    values[idx[0]] = s
    for a, b in zip(idx[:-1], idx[1:]):
        dt = ts[b] - ts[a]
        s = s + dt * as_array(rhs(s, zs[a], float(ts[a])))
        values[b] = s
    return ts.copy(), values


def integrate_sensitivity_vanilla(s_init, trajectory: Trajectory, mapper,
                                  direction: str = "forward") -> SensitivityTrace:
    """Euler integration of the plain sensitivity ODE along recorded states."""
    ts, vals = _integrate(
        s_init, trajectory,
        lambda s, z, t: sensitivity_ode_rhs_vanilla(s, z, t, mapper),
        direction)
    return SensitivityTrace(ts, vals, "state", gated=False)


def integrate_sensitivity_gated(s_init, trajectory: Trajectory, mapper, alpha, beta,
                                direction: str = "forward") -> SensitivityTrace:
    """Euler integration of the gate-modulated sensitivity ODE."""
    ts, vals = _integrate(
        s_init, trajectory,
        lambda s, z, t: sensitivity_ode_rhs_gated(s, z, t, mapper, alpha, beta),
        direction)
    return SensitivityTrace(ts, vals, "state", gated=True)


# ---- discrete adjoint vs reverse-mode autodiff ------------------------------


def _loss_grad_at(loss_fn, value: Tensor) -> np.ndarray:
    tape = Tape()
    leaf = tape.leaf(value)
    loss = loss_fn(leaf)
    return backward(loss, wrt=[leaf])[leaf].array


def _unit_replay(variant, mapper: Mapper, gate, branch_val, skip_val, emb_val, seed):
    """Re-run one unit standalone and return VJPs at (skip, branch, params, gates)."""
    tape = Tape()
    pn = {f"f.{k}": tape.leaf(v) for k, v in mapper.p.items()}
    a_node = tape.leaf(gate.alpha)
    b_node = tape.leaf(gate.beta)
    branch = tape.leaf(branch_val)
    skip = tape.leaf(skip_val) if skip_val is not None else None
    emb = tape.leaf(emb_val) if emb_val is not None else None
    out, _ = gated_update(tape, variant, branch,
                          lambda x: mapper.apply(tape, pn, "f.", x, emb),
                          a_node, b_node, skip=skip)
    targets = ([skip] if skip is not None else []) + [branch, a_node, b_node] + list(pn.values())
    grads = vjp(out, targets, np.asarray(seed, dtype=np.float64))
    grads = [g.array for g in grads]
    offset = 1 if skip is not None else 0
    named = {}
    for (k, _), g in zip(mapper.p.items(), grads[offset + 3:]):
        named[f"f.{k}"] = g
    named["gate.alpha"] = grads[offset + 1]
    named["gate.beta"] = grads[offset + 2]
    skip_grad = grads[0] if skip is not None else None
    return skip_grad, grads[offset], named


def _encoder_replay(mapper: Mapper, gate, s_val, emb_val, seed):
    """Standalone VJP through one read-in branch s -> alpha f(s) + beta."""
    tape = Tape()
    pn = {f"f.{k}": tape.leaf(v) for k, v in mapper.p.items()}
    a_node = tape.leaf(gate.alpha)
    b_node = tape.leaf(gate.beta)
    s_node = tape.leaf(s_val)
    emb = tape.leaf(emb_val) if emb_val is not None else None
    f_out = mapper.apply(tape, pn, "f.", s_node, emb)
    out = forward_op("broadcast-add", [forward_op("mul", [f_out, a_node]), b_node])
    targets = [s_node, a_node, b_node] + list(pn.values())
    grads = [g.array for g in vjp(out, targets, np.asarray(seed, dtype=np.float64))]
    named = {f"f.{k}": g for (k, _), g in zip(mapper.p.items(), grads[3:])}
    named["gate.alpha"] = grads[1]
    named["gate.beta"] = grads[2]
    return grads[0], named


def _autodiff_reference(model: StackModel, z_arr, t, loss_fn):
    tape = Tape()
    pn = model.bind(tape)
    z_node = tape.leaf(z_arr)
    emb = None
    if model.conditioning != "none":
        emb = tape.leaf(time_embedding(np.broadcast_to(np.asarray(t, float),
                                                       (z_arr.shape[0],))))
    out, trace = model.forward(tape, pn, z_node, emb)
    loss = loss_fn(out)
    grads = backward(loss, wrt=[z_node] + list(pn.values()))
    named = {name: grads[node].array for name, node in pn.items()}
    emb_val = emb.value if emb is not None else None
    return grads[z_node].array, named, out.value, trace, emb_val


def _rel_gap(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def adjoint_vs_autodiff_check(model: StackModel, z0, loss_fn, t=None) -> float:
    """Max relative gap between reverse-mode autodiff and the discrete adjoint.

    The adjoint side re-derives dL/dz0 and every parameter gradient by walking
    the stack unit by unit with standalone vector-Jacobian products, never
    touching the full forward tape.
    """
    z_arr = np.atleast_2d(as_array(z0))
    ad_z0, ad_params, out_val, trace, emb_val = _autodiff_reference(model, z_arr, t, loss_fn)

    param_acc: dict[str, np.ndarray] = {}

    def add_param(base: str, named: dict):
        for k, g in named.items():
            key = base + k
            if key in param_acc:
                param_acc[key] = param_acc[key] + g
            else:
                param_acc[key] = g

    s = _loss_grad_at(loss_fn, out_val)
    if model.fashion == "flow":
        state_vals = [n.value.array for n in trace.states]
        for i in range(model.depth - 1, -1, -1):
            skip_grad, branch_grad, named = _unit_replay(
                model.variant, model.mappers[i], model.gates[i],
                state_vals[i], state_vals[i], emb_val, s)
            add_param(f"u{i:02d}.", named)
            s = skip_grad + branch_grad  # state feeds both the skip and the mapper
        adj_z0 = s
    else:
        L = model.depth
        enc_vals = [n.value.array for n in trace.states]
        dec_vals = [n.value.array for n in trace.dec_states]
        gd = {0: s}
        gs = {i: None for i in range(L)}

        def acc(d, i, g):
            d[i] = g if d[i] is None else d[i] + g

        for i in range(L - 1):
            _, mr = model.mappers[i]
            _, gr = model.gates[i]
            skip_grad, branch_grad, named = _unit_replay(
                model.variant, mr, gr, dec_vals[i + 1], enc_vals[i], emb_val, gd[i])
            add_param(f"u{i:02d}.r", named)  # keys become u00.rf.* / u00.rgate.*
            acc(gs, i, skip_grad)
            gd[i + 1] = branch_grad
        acc(gs, L - 1, gd[L - 1])
        for i in range(L - 2, -1, -1):
            ml, _ = model.mappers[i]
            gl, _ = model.gates[i]
            s_grad, named = _encoder_replay(ml, gl, enc_vals[i], emb_val, gs[i + 1])
            add_param(f"u{i:02d}.l", named)
            acc(gs, i, s_grad)
        adj_z0 = gs[0]

    worst = _rel_gap(ad_z0, adj_z0)
    for name, g in ad_params.items():
        adj_g = param_acc.get(name)
        if adj_g is None:
            adj_g = np.zeros_like(g)
        worst = max(worst, _rel_gap(g, adj_g))
    return worst


# ---- per-depth sensitivity profile -------------------------------------------


@dataclass
class SensitivityReport:
    """Per-depth gradient magnitudes with the gate values active at each depth."""

    step: int
    depths: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    norms: np.ndarray
    normalized: np.ndarray

    def rows(self) -> list[dict]:
        return [
            {"step": self.step, "depth": int(d), "alpha": float(a), "beta": float(b),
             "sensitivity_norm": float(n), "normalized": float(m)}
            for d, a, b, n, m in zip(self.depths, self.alphas, self.betas,
                                     self.norms, self.normalized)
        ]

    @property
    def min_normalized(self) -> float:
        return float(np.min(self.normalized))


def sensitivity_report(model, batch, loss_fn, step: int = 0, t=None) -> SensitivityReport:
    """Profile of ||dL/dz_i||_2 over depth, normalized by its maximum.

    Works on a stack directly or on a score net (profiled over its stack
    states). The gate columns carry each unit's current scalar gate values
    (channel gates are averaged).
    """
    tape = Tape()
    z_arr = np.atleast_2d(as_array(batch))
    if isinstance(model, ScoreNet):
        pn = model.bind(tape)
        z_node = tape.leaf(z_arr)
        out, trace = model.forward(tape, pn, z_node, t if t is not None else 0.0)
        stack = model.stack
    else:
        stack = model
        pn = model.bind(tape)
        z_node = tape.leaf(z_arr)
        emb = None
        if model.conditioning != "none":
            emb = tape.leaf(time_embedding(np.broadcast_to(np.asarray(t, float),
                                                           (z_arr.shape[0],))))
        out, trace = model.forward(tape, pn, z_node, emb)
    loss = loss_fn(out)
    # profile over each unit's input state; depth i pairs with unit i's gates
    states = trace.states[:-1]
    gates = stack.gates if stack.fashion == "flow" else [g[0] for g in stack.gates]
    state_grads = vjp(loss, states, np.ones(loss.value.shape))
    norms = np.array([float(np.linalg.norm(g.array)) for g in state_grads])
    peak = norms.max()
    normalized = norms / peak if peak > 0 else np.zeros_like(norms)
    alphas = np.array([float(np.mean(g.alpha.array)) for g in gates[:len(states)]])
    betas = np.array([float(np.mean(g.beta.array)) for g in gates[:len(states)]])
    return SensitivityReport(step, np.arange(len(states)), alphas, betas, norms, normalized)
