"""Gated residual stacking units and their flow-shaped and U-shaped compositions.

Each unit wraps a small feature mapper f with two learnable gates (a scale on
the mapped branch and an additive shift). Stacks of these units form the score
networks used throughout; the five residual variants differ only in where the
gates enter the update.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, ShapeError, Tape, Tensor, as_array, forward_op

__all__ = [
    "time_embedding",
    "MapperSpec",
    "Mapper",
    "GateParams",
    "StackModel",
    "ScoreNet",
    "VARIANTS",
    "mrs_forward",
    "variant_forward",
    "flow_stack_forward",
    "u_stack_forward",
    "gating_residual_ode_rhs",
    "gated_update",
    "with_pinned_gates",
]

VARIANTS = ("v0", "v1", "v2", "v3", "v4")
EMB_DIM = 32


def time_embedding(t, dim: int = EMB_DIM) -> np.ndarray:
    """Sinusoidal embedding of times in [0, 1], shape (n, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass
class MapperSpec:
    """Shape and wiring of the feature mapper wrapped by one unit.

    kind: "affine", "mlp2" (two layers with tanh or silu), or "linear-scalar"
    (a single learnable scale, used by the analytic tests). Input and output
    width are equal; the residual addition requires it.
    """

    kind: str
    width: int
    hidden: int | None = None
    activation: str = "tanh"
    conditioning: str = "none"  # none | concat | film
    emb_dim: int = EMB_DIM
    out_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("affine", "mlp2", "linear-scalar"):
            raise ValueError(f"unknown mapper kind {self.kind!r}")
        if self.activation not in ("tanh", "silu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.conditioning not in ("none", "concat", "film"):
            raise ValueError(f"unknown conditioning {self.conditioning!r}")
        if self.kind == "linear-scalar" and self.conditioning != "none":
            raise ValueError("linear-scalar mappers are unconditioned")
        if self.kind == "affine" and self.conditioning == "film":
            raise ValueError("film conditioning requires an mlp2 mapper")
        if self.hidden is None:
            self.hidden = self.width


class Mapper:
    """A concrete feature mapper: parameter tensors plus graph construction."""

    def __init__(self, spec: MapperSpec, rng: np.random.Generator | None = None,
                 scalar_init: float = 1.0):
        self.spec = spec
        self.p: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = rng or np.random.default_rng(0)
        w, h, e = spec.width, spec.hidden, spec.emb_dim
        if spec.kind == "linear-scalar":
            self.p["a"] = Tensor([scalar_init])
        elif spec.kind == "affine":
            self.p["w"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(w), (w, w)) * spec.out_scale)
            self.p["b"] = Tensor.zeros((w,))
            if spec.conditioning == "concat":
                self.p["u"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(e), (e, w)) * spec.out_scale)
        else:  # mlp2
            self.p["w1"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(w), (w, h)))
            self.p["b1"] = Tensor.zeros((h,))
            if spec.conditioning == "concat":
                self.p["u1"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(e), (e, h)))
            elif spec.conditioning == "film":
                self.p["fs"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(e), (e, h)))
                self.p["fb"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(e), (e, h)))
            self.p["w2"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(h), (h, w)) * spec.out_scale)
            self.p["b2"] = Tensor.zeros((w,))

    def apply(self, tape: Tape, pn, prefix: str, z: Node, emb: Node | None) -> Node:
        """Build the mapper's graph on ``tape``; returns the output node."""
        spec = self.spec
        if spec.conditioning != "none" and emb is None:
            raise ValueError(f"mapper {prefix!r} needs a time embedding")
        if spec.kind == "linear-scalar":
            return forward_op("mul", [z, pn[prefix + "a"]])
        if spec.kind == "affine":
            out = forward_op("affine", [z, pn[prefix + "w"], pn[prefix + "b"]])
            if spec.conditioning == "concat":
                out = forward_op("add", [out, forward_op("matmul", [emb, pn[prefix + "u"]])])
            return out
        # mlp2
        pre = forward_op("affine", [z, pn[prefix + "w1"], pn[prefix + "b1"]])
        if spec.conditioning == "concat":
            pre = forward_op("add", [pre, forward_op("matmul", [emb, pn[prefix + "u1"]])])
        hid = forward_op(spec.activation, [pre])
        if spec.conditioning == "film":
            scale = forward_op("matmul", [emb, pn[prefix + "fs"]])
            shift = forward_op("matmul", [emb, pn[prefix + "fb"]])
            hid = forward_op("add", [forward_op("add", [hid, forward_op("mul", [hid, scale])]), shift])
        return forward_op("affine", [hid, pn[prefix + "w2"], pn[prefix + "b2"]])


@dataclass
class GateParams:
    """The learnable gate pair of one unit: residual scale and additive shift.

    Shape is (1,) in scalar mode or (width,) in per-channel mode; branch marks
    whether this is a unified gate or one side of a U-shaped unit.
    """

    alpha: Tensor
    beta: Tensor
    branch: str = "unified"

    def __post_init__(self):
        if self.alpha.shape != self.beta.shape:
            raise ShapeError(
                f"gate shapes differ: alpha {self.alpha.shape} vs beta {self.beta.shape}")
        if self.branch not in ("unified", "left", "right"):
            raise ValueError(f"unknown gate branch {self.branch!r}")

    @staticmethod
    def init(width: int, mode: str = "scalar", alpha: float = 1.0, beta: float = 0.0,
             branch: str = "unified") -> "GateParams":
        shape = (1,) if mode == "scalar" else (width,)
        return GateParams(Tensor(np.full(shape, alpha)), Tensor(np.full(shape, beta)), branch)


@dataclass
class UnitRecord:
    """Nodes recorded during one unit application, for sensitivity penalties."""

    state: Node          # the unit's input state
    f_out: Node | None   # mapper output (None when the variant has no branch gate use)
    alpha: Node
    beta: Node
    name: str


@dataclass
class StackTrace:
    """All intermediate nodes of one stack forward pass."""

    states: list      # flow: z_0..z_L; u-shaped: encoder states s_0..s_{L-1}
    dec_states: list = field(default_factory=list)  # u-shaped: d_0..d_{L-1}
    records: list = field(default_factory=list)

    def state_values(self) -> list[Tensor]:
        return [n.value for n in self.states]


def gated_update(tape: Tape, variant: str, branch_in: Node, f_out_fn, alpha: Node,
                  beta: Node, skip: Node | None):
    """One residual update. ``branch_in`` feeds the mapper, ``skip`` carries the
    identity path (None for a pure read-in branch). Returns (out, f_out)."""
    if variant == "v1":
        gated_in = forward_op("broadcast-add", [forward_op("mul", [branch_in, alpha]), beta])
        f_out = f_out_fn(gated_in)
        out = f_out if skip is None else forward_op("add", [skip, f_out])
        return out, f_out
    f_out = f_out_fn(branch_in)
    if variant == "v0":
        branch = forward_op("broadcast-add", [forward_op("mul", [f_out, alpha]), beta])
        out = branch if skip is None else forward_op("add", [skip, branch])
    elif variant == "v2":
        if skip is None:
            branch = forward_op("broadcast-add", [f_out, beta])
            out = branch
        else:
            out = forward_op("broadcast-add",
                             [forward_op("add", [forward_op("mul", [skip, alpha]), f_out]), beta])
    elif variant == "v3":
        out = f_out if skip is None else forward_op("add", [skip, f_out])
    elif variant == "v4":
        branch = forward_op("mul", [f_out, alpha])
        out = branch if skip is None else forward_op("add", [skip, branch])
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return out, f_out


class StackModel:
    """A depth-L stack of gated residual units, flow-shaped or U-shaped.

    Flow fashion applies the units sequentially. U-shaped fashion runs a
    gated read-in chain s_{i+1} = a_i f_i(s_i) + b_i for i < L-1, mirrors at
    the bottleneck (d_{L-1} = s_{L-1}), then decodes with skip connections
    d_i = s_i + a_i f_i(d_{i+1}) + b_i down to d_0. Unit L-1 of a U-shaped
    stack is the bottleneck and owns no parameters.
    """

    def __init__(self, fashion: str, depth: int, width: int, mappers, gates,
                 variant: str = "v0", gate_mode: str = "scalar",
                 conditioning: str = "none"):
        if fashion not in ("flow", "u"):
            raise ValueError(f"unknown stack fashion {fashion!r}")
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if fashion == "u" and depth < 2:
            raise ValueError(f"u-shaped stacks need depth >= 2, got {depth}")
        self.fashion = fashion
        self.depth = depth
        self.width = width
        self.variant = variant
        self.gate_mode = gate_mode
        self.conditioning = conditioning
        self.mappers = mappers  # flow: [Mapper]*L; u: [(left, right)]*(L-1)
        self.gates = gates      # flow: [GateParams]*L; u: [(left, right)]*(L-1)

    @classmethod
    def build(cls, fashion: str, depth: int, width: int, mapper_kind: str = "mlp2",
              variant: str = "v0", gate_mode: str = "scalar", conditioning: str = "none",
              activation: str = "tanh", hidden: int | None = None, out_scale: float = 1.0,
              scalar_init: float = 1.0, alpha_init: float = 1.0, beta_init: float = 0.0,
              rng: np.random.Generator | None = None) -> "StackModel":
        rng = rng or np.random.default_rng(0)
        if variant == "v3":
            alpha_init, beta_init = 1.0, 0.0  # plain residual pins both gates
        elif variant == "v4":
            beta_init = 0.0  # rezero-style pins the shift
        spec = MapperSpec(mapper_kind, width, hidden=hidden, activation=activation,
                          conditioning=conditioning, out_scale=out_scale)
        if fashion == "flow":
            mappers = [Mapper(spec, rng, scalar_init) for _ in range(depth)]
            gates = [GateParams.init(width, gate_mode, alpha_init, beta_init)
                     for _ in range(depth)]
        else:
            mappers = [(Mapper(spec, rng, scalar_init), Mapper(spec, rng, scalar_init))
                       for _ in range(depth - 1)]
            gates = [(GateParams.init(width, gate_mode, alpha_init, beta_init, "left"),
                      GateParams.init(width, gate_mode, alpha_init, beta_init, "right"))
                     for _ in range(depth - 1)]
        return cls(fashion, depth, width, mappers, gates, variant, gate_mode, conditioning)

    # ---- parameter registry -------------------------------------------------

    def params(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        if self.fashion == "flow":
            for i, (m, g) in enumerate(zip(self.mappers, self.gates)):
                for k, v in m.p.items():
                    out[f"{prefix}u{i:02d}.f.{k}"] = v
                out[f"{prefix}u{i:02d}.gate.alpha"] = g.alpha
                out[f"{prefix}u{i:02d}.gate.beta"] = g.beta
        else:
            for i, ((ml, mr), (gl, gr)) in enumerate(zip(self.mappers, self.gates)):
                for k, v in ml.p.items():
                    out[f"{prefix}u{i:02d}.lf.{k}"] = v
                for k, v in mr.p.items():
                    out[f"{prefix}u{i:02d}.rf.{k}"] = v
                out[f"{prefix}u{i:02d}.lgate.alpha"] = gl.alpha
                out[f"{prefix}u{i:02d}.lgate.beta"] = gl.beta
                out[f"{prefix}u{i:02d}.rgate.alpha"] = gr.alpha
                out[f"{prefix}u{i:02d}.rgate.beta"] = gr.beta
        return out

    def set_param(self, name: str, value: Tensor, prefix: str = "") -> None:
        local = name[len(prefix):]
        unit, rest = local.split(".", 1)
        i = int(unit[1:])
        if self.fashion == "flow":
            m, g = self.mappers[i], self.gates[i]
            if rest.startswith("f."):
                m.p[rest[2:]] = value
            elif rest == "gate.alpha":
                g.alpha = value
            elif rest == "gate.beta":
                g.beta = value
            else:
                raise KeyError(name)
        else:
            (ml, mr), (gl, gr) = self.mappers[i], self.gates[i]
            if rest.startswith("lf."):
                ml.p[rest[3:]] = value
            elif rest.startswith("rf."):
                mr.p[rest[3:]] = value
            elif rest == "lgate.alpha":
                gl.alpha = value
            elif rest == "lgate.beta":
                gl.beta = value
            elif rest == "rgate.alpha":
                gr.alpha = value
            elif rest == "rgate.beta":
                gr.beta = value
            else:
                raise KeyError(name)

    def frozen_names(self, prefix: str = "") -> set[str]:
        """Gate parameters pinned by the variant (v3 pins both, v4 pins beta)."""
        frozen: set[str] = set()
        if self.variant not in ("v3", "v4"):
            return frozen
        for name in self.params(prefix):
            if self.variant == "v3" and ("gate.alpha" in name or "gate.beta" in name):
                frozen.add(name)
            elif self.variant == "v4" and "gate.beta" in name:
                frozen.add(name)
        return frozen

    def bind(self, tape: Tape, prefix: str = "") -> dict[str, Node]:
        return {name: tape.leaf(t) for name, t in self.params(prefix).items()}

    # ---- graph construction -------------------------------------------------

    def _check_width(self, z: Node) -> None:
        if z.value.shape[-1] != self.width:
            raise ShapeError(
                f"input width {z.value.shape[-1]} does not match stack width {self.width}")

    def forward(self, tape: Tape, pn, z: Node, emb: Node | None = None,
                prefix: str = "") -> tuple[Node, StackTrace]:
        self._check_width(z)
        if self.fashion == "flow":
            return self._forward_flow(tape, pn, z, emb, prefix)
        return self._forward_u(tape, pn, z, emb, prefix)

    def _forward_flow(self, tape, pn, z, emb, prefix):
        trace = StackTrace(states=[z])
        cur = z
        for i, (m, g) in enumerate(zip(self.mappers, self.gates)):
            base = f"{prefix}u{i:02d}."
            alpha, beta = pn[base + "gate.alpha"], pn[base + "gate.beta"]
            out, f_out = gated_update(
                tape, self.variant, cur,
                lambda x, m=m, base=base: m.apply(tape, pn, base + "f.", x, emb),
                alpha, beta, skip=cur)
            trace.records.append(UnitRecord(cur, f_out, alpha, beta, base[:-1]))
            cur = out
            trace.states.append(cur)
        return cur, trace

    def _forward_u(self, tape, pn, z, emb, prefix):
        L = self.depth
        enc = [z]
        records = []
        for i in range(L - 1):
            base = f"{prefix}u{i:02d}."
            ml, _ = self.mappers[i]
            gl, _ = self.gates[i]
            alpha, beta = pn[base + "lgate.alpha"], pn[base + "lgate.beta"]
            f_out = ml.apply(tape, pn, base + "lf.", enc[-1], emb)
            s_next = forward_op("broadcast-add", [forward_op("mul", [f_out, alpha]), beta])
            records.append(UnitRecord(enc[-1], f_out, alpha, beta, base + "l"))
            enc.append(s_next)
        dec = [None] * L
        dec[L - 1] = enc[L - 1]
        for i in range(L - 2, -1, -1):
            base = f"{prefix}u{i:02d}."
            _, mr = self.mappers[i]
            alpha, beta = pn[base + "rgate.alpha"], pn[base + "rgate.beta"]
            out, f_out = gated_update(
                tape, self.variant, dec[i + 1],
                lambda x, mr=mr, base=base: mr.apply(tape, pn, base + "rf.", x, emb),
                alpha, beta, skip=enc[i])
            records.append(UnitRecord(dec[i + 1], f_out, alpha, beta, base + "r"))
            dec[i] = out
        trace = StackTrace(states=enc, dec_states=dec, records=records)
        return dec[0], trace

    def unit_sequence(self) -> list:
        """(mapper, gate, label) triples in forward application order."""
        if self.fashion == "flow":
            return [(m, g, f"u{i:02d}") for i, (m, g) in
                    enumerate(zip(self.mappers, self.gates))]
        seq = [(ml, gl, f"u{i:02d}.l") for i, ((ml, _), (gl, _)) in
               enumerate(zip(self.mappers, self.gates))]
        for i in range(self.depth - 2, -1, -1):
            (_, mr), (_, gr) = self.mappers[i], self.gates[i]
            seq.append((mr, gr, f"u{i:02d}.r"))
        return seq

    # ---- value-level evaluation ---------------------------------------------

    def apply(self, z, t=None) -> tuple[Tensor, StackTrace]:
        """Evaluate on plain values (batched); builds and discards a private tape."""
        tape = Tape()
        pn = self.bind(tape)
        z_node = tape.leaf(np.atleast_2d(as_array(z)))
        emb = None
        if self.conditioning != "none":
            if t is None:
                raise ValueError("time-conditioned stack needs t")
            n = z_node.value.shape[0]
            emb = tape.leaf(time_embedding(np.broadcast_to(np.asarray(t, float), (n,))))
        out, trace = self.forward(tape, pn, z_node, emb)
        return out.value, trace


class ScoreNet:
    """Score network: affine lift into the stack width, gated residual stack,
    affine projection back to the data dimension.

    When built with ``n_classes``, integer labels select rows of a learned
    embedding table that is added to the time embedding (toy class-conditional
    mode).
    """

    def __init__(self, dim: int, stack: StackModel, rng: np.random.Generator | None = None,
                 out_scale: float = 0.1, n_classes: int = 0):
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.stack = stack
        self.n_classes = n_classes
        w = stack.width
        self.p_in = OrderedDict(
            w=Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, w))),
            b=Tensor.zeros((w,)))
        self.p_out = OrderedDict(
            w=Tensor(rng.normal(0.0, 1.0 / np.sqrt(w), (w, dim)) * out_scale),
            b=Tensor.zeros((dim,)))
        if n_classes:
            emb_dim = EMB_DIM if stack.conditioning == "none" else \
                (stack.mappers[0] if stack.fashion == "flow"
                 else stack.mappers[0][0]).spec.emb_dim
            self.p_cls = OrderedDict(
                table=Tensor(rng.normal(0.0, 0.1, (n_classes, emb_dim))))
        else:
            self.p_cls = OrderedDict()

    def params(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for k, v in self.p_in.items():
            out[f"in.{k}"] = v
        for k, v in self.p_cls.items():
            out[f"cls.{k}"] = v
        out.update(self.stack.params(prefix="stack."))
        for k, v in self.p_out.items():
            out[f"out.{k}"] = v
        return out

    def set_param(self, name: str, value: Tensor) -> None:
        if name.startswith("in."):
            self.p_in[name[3:]] = value
        elif name.startswith("cls."):
            self.p_cls[name[4:]] = value
        elif name.startswith("out."):
            self.p_out[name[4:]] = value
        elif name.startswith("stack."):
            self.stack.set_param(name, value, prefix="stack.")
        else:
            raise KeyError(name)

    def frozen_names(self) -> set[str]:
        return self.stack.frozen_names(prefix="stack.")

    def gate_names(self) -> set[str]:
        return {n for n in self.params() if "gate" in n}

    def bind(self, tape: Tape) -> dict[str, Node]:
        return {name: tape.leaf(t) for name, t in self.params().items()}

    def forward(self, tape: Tape, pn, z: Node, t, labels=None) -> tuple[Node, StackTrace]:
        n = z.value.shape[0]
        emb = None
        if self.stack.conditioning != "none":
            emb = tape.leaf(time_embedding(np.broadcast_to(np.asarray(t, float), (n,))))
            if labels is not None:
                if not self.n_classes:
                    raise ValueError("model was built without class conditioning")
                onehot = np.zeros((n, self.n_classes))
                onehot[np.arange(n), np.asarray(labels, dtype=int)] = 1.0
                cls_emb = forward_op("matmul", [tape.leaf(onehot), pn["cls.table"]])
                emb = forward_op("add", [emb, cls_emb])
        lifted = forward_op("affine", [z, pn["in.w"], pn["in.b"]])
        hid, trace = self.stack.forward(tape, pn, lifted, emb, prefix="stack.")
        out = forward_op("affine", [hid, pn["out.w"], pn["out.b"]])
        return out, trace

    def apply(self, z, t, labels=None) -> np.ndarray:
        """Value-level batched evaluation, for samplers and reports."""
        tape = Tape()
        pn = self.bind(tape)
        z_node = tape.leaf(np.atleast_2d(as_array(z)))
        out, _ = self.forward(tape, pn, z_node, t, labels)
        return out.value.array

    def score_fn(self, labels=None):
        return lambda z, t: self.apply(z, t, labels)


# ---- value-level single-unit and whole-stack operations ----------------------

def _single_unit_value(variant: str, z, mapper: Mapper, gate: GateParams, t=None,
                       skip: bool = True) -> Tensor:
    tape = Tape()
    pn = {f"f.{k}": tape.leaf(v) for k, v in mapper.p.items()}
    pn["gate.alpha"] = tape.leaf(gate.alpha)
    pn["gate.beta"] = tape.leaf(gate.beta)
    z_arr = np.atleast_2d(as_array(z))
    z_node = tape.leaf(z_arr)
    emb = None
    if mapper.spec.conditioning != "none":
        if t is None:
            raise ValueError("time-conditioned mapper needs t")
        emb = tape.leaf(time_embedding(np.broadcast_to(np.asarray(t, float), (z_arr.shape[0],))))
    out, _ = gated_update(tape, variant, z_node,
                           lambda x: mapper.apply(tape, pn, "f.", x, emb),
                           pn["gate.alpha"], pn["gate.beta"],
                           skip=z_node if skip else None)
    res = out.value.array
    return Tensor(res[0] if np.asarray(as_array(z)).ndim == 1 else res)


def mrs_forward(z, mapper: Mapper, gate: GateParams, t=None) -> Tensor:
    """One gated residual unit: z + alpha * f(z) + beta."""
    if np.atleast_2d(as_array(z)).shape[-1] != mapper.spec.width:
        raise ShapeError(
            f"input width {np.atleast_2d(as_array(z)).shape[-1]} does not match "
            f"mapper width {mapper.spec.width}")
    return _single_unit_value("v0", z, mapper, gate, t)


def variant_forward(z, mapper: Mapper, gate: GateParams, variant: str, t=None) -> Tensor:
    """Apply one of the five residual-update variants."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return _single_unit_value(variant, z, mapper, gate, t)


def flow_stack_forward(z0, model: StackModel, t=None) -> tuple[Tensor, list[Tensor]]:
    """Run a flow-shaped stack; returns the final state and all L+1 states."""
    if model.fashion != "flow":
        raise ValueError("flow_stack_forward expects a flow-shaped model")
    squeeze = np.asarray(as_array(z0)).ndim == 1
    out, trace = model.apply(np.atleast_2d(as_array(z0)), t)
    states = [Tensor(s.value.array[0]) if squeeze else s.value for s in trace.states]
    return (Tensor(out.array[0]) if squeeze else out), states


def u_stack_forward(z0, model: StackModel, t=None) -> tuple[Tensor, list[Tensor], list[Tensor]]:
    """Run a U-shaped stack; returns (output, encoder states, decoder states)."""
    if model.fashion != "u":
        raise ValueError("u_stack_forward expects a u-shaped model")
    if model.depth < 2:
        raise ValueError(f"u-shaped stacks need depth >= 2, got {model.depth}")
    squeeze = np.asarray(as_array(z0)).ndim == 1
    out, trace = model.apply(np.atleast_2d(as_array(z0)), t)

    def fix(node):
        return Tensor(node.value.array[0]) if squeeze else node.value

    enc = [fix(s) for s in trace.states]
    dec = [fix(d) for d in trace.dec_states]
    return (Tensor(out.array[0]) if squeeze else out), enc, dec


def gating_residual_ode_rhs(z, t: float, mapper_fn, alpha_t, beta_t) -> Tensor:
    """Continuous-depth limit of gated stacking: dz/dt = alpha(t) F(z,t) + beta(t)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    a = alpha_t(t) if callable(alpha_t) else alpha_t
    b = beta_t(t) if callable(beta_t) else beta_t
    z_arr = as_array(z)
    return Tensor(np.asarray(a) * as_array(mapper_fn(z_arr, t)) + np.asarray(b))


def with_pinned_gates(model, alpha: float = 1.0, beta: float = 0.0):
    """Copy of a stack or score net with every gate pinned to fixed values.

    Mapper parameter tensors are shared (immutable), so the copy evaluates the
    same feature maps with the residual gating switched to (alpha, beta).
    """
    if isinstance(model, ScoreNet):
        clone = ScoreNet.__new__(ScoreNet)
        clone.dim = model.dim
        clone.n_classes = model.n_classes
        clone.p_in = OrderedDict(model.p_in)
        clone.p_out = OrderedDict(model.p_out)
        clone.p_cls = OrderedDict(model.p_cls)
        clone.stack = with_pinned_gates(model.stack, alpha, beta)
        return clone
    stack: StackModel = model
    shape = (1,) if stack.gate_mode == "scalar" else (stack.width,)

    def pin(branch):
        return GateParams(Tensor(np.full(shape, alpha)), Tensor(np.full(shape, beta)), branch)

    if stack.fashion == "flow":
        gates = [pin("unified") for _ in stack.gates]
        mappers = [Mapper.__new__(Mapper) for _ in stack.mappers]
        for copy, orig in zip(mappers, stack.mappers):
            copy.spec = orig.spec
            copy.p = OrderedDict(orig.p)
    else:
        gates = [(pin("left"), pin("right")) for _ in stack.gates]
        mappers = []
        for ml, mr in stack.mappers:
            cl, cr = Mapper.__new__(Mapper), Mapper.__new__(Mapper)
            cl.spec, cl.p = ml.spec, OrderedDict(ml.p)
            cr.spec, cr.p = mr.spec, OrderedDict(mr.p)
            mappers.append((cl, cr))
    return StackModel(stack.fashion, stack.depth, stack.width, mappers, gates,
                      stack.variant, stack.gate_mode, stack.conditioning)
