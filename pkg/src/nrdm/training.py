"""Losses, optimizers, EMA, checkpointing, and the toy score-model training loops.

The training objective pairs a score-matching data term with an optional
gate-sensitivity penalty: for each unit, the gated diagonal of the mapper
Jacobian should track the shift gate. Targets come either from the analytic
perturbed-data score (crisply testable) or from the standard denoising
estimate.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (NonFiniteError, Node, ShapeError, Tape, Tensor,
                       as_array, backward, forward_op, vjp)
from .dynamics import Schedule, ScoreOracle, make_rng
from .residual import ScoreNet, StackModel, StackTrace

__all__ = [
    "DivergenceError",
    "CheckpointError",
    "TrainSettings",
    "OptimState",
    "EmaState",
    "Checkpoint",
    "loss_simple",
    "loss_score_matching",
    "loss_sensitivity_reg",
    "gate_sensitivity_penalty",
    "unit_input_states",
    "optimizer_step",
    "ema_update",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_arch",
    "arch_of",
    "train_score_model",
    "finetune_gates",
    "eval_score_loss",
    "ema_model",
    "load_params",
]

CHECKPOINT_MAGIC = b"NRDM1"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training loss exploded or became non-finite."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed, truncated, or of an unsupported version."""


# ---- losses ------------------------------------------------------------------


def _mse(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"loss operands differ in shape: {a.value.shape} vs {b.value.shape}")
    return forward_op("mean", [forward_op("square", [forward_op("sub", [a, b])])])


def _as_pair(a, b):
    """Lift value-level operands onto a scratch tape; pass nodes through."""
    if isinstance(a, Node) and isinstance(b, Node):
        return a, b, False
    tape = Tape()
    return tape.leaf(as_array(a)), tape.leaf(as_array(b)), True


def loss_simple(eps, eps_pred):
    """Mean squared noise-prediction error (mean over batch and elements)."""
    a, b, value_level = _as_pair(eps, eps_pred)
    out = _mse(a, b)
    return out.value.item() if value_level else out


def loss_score_matching(f_out, score_target):
    """Mean squared deviation of the network output from the score target."""
    a, b, value_level = _as_pair(f_out, score_target)
    out = _mse(a, b)
    return out.value.item() if value_level else out


def _unit_diag(record, probe: np.ndarray, exact: bool) -> np.ndarray:
    """Diagonal of d f / d state for one unit, per sample.

    Probe mode uses a single Rademacher vector (exact whenever the Jacobian is
    diagonal); exact mode assembles the diagonal column by column and is meant
    for small widths in tests.
    """
    f_out, state = record.f_out, record.state
    shape = f_out.value.shape
    if exact:
        width = shape[-1]
        diag = np.empty(shape)
        for j in range(width):
            seed = np.zeros(shape)
            seed[..., j] = 1.0
            (g,) = vjp(f_out, [state], seed, stop_index=state.index)
            diag[..., j] = g.array[..., j]
        return diag
    seed = np.broadcast_to(probe, shape).copy()
    (g,) = vjp(f_out, [state], seed, stop_index=state.index)
    return probe * g.array


def gate_sensitivity_penalty(records, probe: np.ndarray, exact: bool = False) -> Node | None:
    """Graph node for the gate regularizer, summed over units.

    The Jacobian diagonals enter as constants (no gradient flows through
    them); the gates enter as live nodes, so the penalty trains gates only.
    """
    total = None
    for rec in records:
        if rec.f_out is None:
            continue
        diag = _unit_diag(rec, probe, exact)
        tape = rec.alpha.tape
        diag_leaf = tape.leaf(diag)
        term = forward_op("mean", [forward_op("square", [
            forward_op("sub", [forward_op("mul", [diag_leaf, rec.alpha]), rec.beta])])])
        total = term if total is None else forward_op("add", [total, term])
    return total


@dataclass
class _StandaloneRecord:
    """Minimal (state, mapper-output) pair accepted by the diagonal probe."""

    state: Node
    f_out: Node


def unit_input_states(trace: StackTrace) -> list[np.ndarray]:
    """Per-unit input states of a recorded forward pass, in application order."""
    return [rec.state.value.array for rec in trace.records]


def loss_sensitivity_reg(model, states, t=None, probe=None, exact: bool = False) -> float:
    """Value of the gate regularizer at fixed evaluation states.

    ``states`` holds one input state per unit application (see
    ``unit_input_states``); they are constants here, so the value is a function
    of the current gate values and mapper parameters only. That makes the gate
    gradients finite-difference checkable without re-running the stack.
    """
    from .residual import time_embedding
    stack = model.stack if isinstance(model, ScoreNet) else model
    seq = stack.unit_sequence()
    if len(states) != len(seq):
        raise ShapeError(f"expected {len(seq)} states, got {len(states)}")
    total = 0.0
    for (mapper, gate, _), state in zip(seq, states):
        state = np.atleast_2d(as_array(state))
        tape = Tape()
        pn = {f"f.{k}": tape.leaf(v) for k, v in mapper.p.items()}
        z_node = tape.leaf(state)
        emb = None
        if mapper.spec.conditioning != "none":
            if t is None:
                raise ValueError("time-conditioned mapper needs t")
            emb = tape.leaf(time_embedding(
                np.broadcast_to(np.asarray(t, float), (state.shape[0],))))
        f_out = mapper.apply(tape, pn, "f.", z_node, emb)
        rec = _StandaloneRecord(z_node, f_out)
        p = np.ones(state.shape[-1]) if probe is None else np.asarray(probe, float)
        diag = _unit_diag(rec, p, exact)
        total += float(np.mean((gate.alpha.array * diag - gate.beta.array) ** 2))
    return total
# ---- optimizer and EMA ---------------------------------------------------------


@dataclass
class OptimState:
    """SGD or AdamW with decoupled weight decay and bias correction."""

    method: str = "adamw"
    lr: float = 5e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def optimizer_step(state: OptimState, params: "OrderedDict[str, Tensor]", grads,
                   only: set[str] | None = None) -> "OrderedDict[str, Tensor]":
    """One update over ``params``; mutates the mapping and returns it.

    ``grads`` maps names to Tensors or arrays; ``only`` restricts the update
    to a subset of parameters (the rest keep their values and moments).
    """
    state.step += 1
    t = state.step
    for name, value in params.items():
        if only is not None and name not in only:
            continue
        g_raw = grads.get(name)
        if g_raw is None:
            continue
        g = as_array(g_raw)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"NaN gradient for parameter {name!r}")
        p = value.array
        if state.method == "sgd":
            new = p - state.lr * g - state.lr * state.weight_decay * p
        else:
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            state.m[name] = m
            state.v[name] = v
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            new = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps) \
                - state.lr * state.weight_decay * p
        params[name] = Tensor(new)
    return params


@dataclass
class EmaState:
    """Exponential moving average of parameters, kept for evaluation."""

    decay: float
    shadow: "OrderedDict[str, Tensor]"

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {self.decay}")

    @staticmethod
    def init(params: "OrderedDict[str, Tensor]", decay: float = 0.999) -> "EmaState":
        return EmaState(decay, OrderedDict((k, v) for k, v in params.items()))


def ema_update(ema: EmaState, params: "OrderedDict[str, Tensor]") -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params."""
    for name, value in params.items():
        shadow = ema.shadow.get(name)
        if shadow is None or shadow.shape != value.shape:
            raise ShapeError(f"EMA shadow missing or mismatched for {name!r}")
        d = ema.decay
        ema.shadow[name] = Tensor(d * shadow.array + (1.0 - d) * value.array)
    return ema


def load_params(model, mapping) -> None:
    for name, value in mapping.items():
        model.set_param(name, value if isinstance(value, Tensor) else Tensor(value))


# ---- checkpointing -------------------------------------------------------------


@dataclass
class Checkpoint:
    arch: dict
    params: "OrderedDict[str, Tensor]"
    opt: OptimState | None = None
    ema: EmaState | None = None
    seed: int = 0
    step: int = 0
    version: int = CHECKPOINT_VERSION


def arch_of(model) -> dict:
    """JSON-able architecture descriptor sufficient to rebuild the model."""
    if isinstance(model, ScoreNet):
        d = arch_of(model.stack)
        d.update(type="scorenet", dim=model.dim, n_classes=model.n_classes)
        return d
    stack: StackModel = model
    spec = (stack.mappers[0] if stack.fashion == "flow" else stack.mappers[0][0]).spec
    return {
        "type": "stack",
        "fashion": stack.fashion,
        "depth": stack.depth,
        "width": stack.width,
        "variant": stack.variant,
        "gate_mode": stack.gate_mode,
        "conditioning": stack.conditioning,
        "mapper": spec.kind,
        "hidden": spec.hidden,
        "activation": spec.activation,
        "out_scale": spec.out_scale,
    }


def model_from_arch(arch: dict):
    """Rebuild a model skeleton from a descriptor (parameters still random)."""
    stack = StackModel.build(
        arch["fashion"], arch["depth"], arch["width"], arch["mapper"],
        variant=arch["variant"], gate_mode=arch["gate_mode"],
        conditioning=arch["conditioning"], activation=arch["activation"],
        hidden=arch["hidden"], out_scale=arch["out_scale"])
    if arch["type"] == "stack":
        return stack
    return ScoreNet(arch["dim"], stack, n_classes=arch.get("n_classes", 0))


def _tensor_entries(ckpt: Checkpoint):
    for name, t in ckpt.params.items():
        yield f"param.{name}", t.array
    if ckpt.opt is not None:
        for name, a in ckpt.opt.m.items():
            yield f"opt_m.{name}", a
        for name, a in ckpt.opt.v.items():
            yield f"opt_v.{name}", a
    if ckpt.ema is not None:
        for name, t in ckpt.ema.shadow.items():
            yield f"ema.{name}", t.array


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Binary format: magic, u32 version, length-prefixed JSON header, then raw
    little-endian float64 payloads in header order. Written atomically."""
    entries = list(_tensor_entries(ckpt))
    header = {
        "arch": ckpt.arch,
        "seed": ckpt.seed,
        "step": ckpt.step,
        "opt": None if ckpt.opt is None else {
            "method": ckpt.opt.method, "lr": ckpt.opt.lr,
            "weight_decay": ckpt.opt.weight_decay, "beta1": ckpt.opt.beta1,
            "beta2": ckpt.opt.beta2, "eps": ckpt.opt.eps, "step": ckpt.opt.step,
        },
        "ema_decay": None if ckpt.ema is None else ckpt.ema.decay,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in entries],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in entries:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(
                f"bad checkpoint magic {magic!r}; expected {CHECKPOINT_MAGIC!r}")
        raw_version = fh.read(4)
        if len(raw_version) < 4:
            raise CheckpointError("truncated checkpoint: missing version")
        version = struct.unpack("<I", raw_version)[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version}; this reader handles "
                f"version {CHECKPOINT_VERSION}")
        raw_len = fh.read(8)
        if len(raw_len) < 8:
            raise CheckpointError("truncated checkpoint: missing header length")
        header_len = struct.unpack("<Q", raw_len)[0]
        blob = fh.read(header_len)
        if len(blob) < header_len:
            raise CheckpointError("truncated checkpoint: incomplete header")
        header = json.loads(blob.decode("utf-8"))
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) < 8 * count:
                raise CheckpointError(
                    f"truncated checkpoint: tensor {entry['name']!r} incomplete")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    params: "OrderedDict[str, Tensor]" = OrderedDict()
    opt_m: dict = {}
    opt_v: dict = {}
    ema_shadow: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, a in tensors.items():
        group, rest = name.split(".", 1)
        if group == "param":
            params[rest] = Tensor(a)
        elif group == "opt_m":
            opt_m[rest] = a
        elif group == "opt_v":
            opt_v[rest] = a
        elif group == "ema":
            ema_shadow[rest] = Tensor(a)
        else:
            raise CheckpointError(f"unknown tensor group {group!r}")

    opt = None
    if header.get("opt") is not None:
        o = header["opt"]
        opt = OptimState(method=o["method"], lr=o["lr"], weight_decay=o["weight_decay"],
                         beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"],
                         m=opt_m, v=opt_v)
    ema = None
    if header.get("ema_decay") is not None:
        ema = EmaState(header["ema_decay"], ema_shadow)
    return Checkpoint(arch=header["arch"], params=params, opt=opt, ema=ema,
                      seed=header["seed"], step=header["step"], version=version)


# ---- training loops -------------------------------------------------------------


@dataclass
class TrainSettings:
    """Knobs of the toy training loop; defaults follow the reference recipe
    (constant AdamW rate 5e-4, gate penalty weight 0.35, EMA 0.999)."""

    steps: int = 1000
    batch: int = 128
    lr: float = 5e-4
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    gamma: float = 0.35
    ema_decay: float = 0.999
    objective: str = "score-matching"   # score-matching | eps-prediction
    score_target: str = "analytic-oracle"  # analytic-oracle | denoising-estimate
    t_min: float = 1e-3
    log_every: int = 50
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.objective not in ("score-matching", "eps-prediction"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.score_target not in ("analytic-oracle", "denoising-estimate"):
            raise ValueError(f"unknown score target {self.score_target!r}")


@dataclass
class TrainResult:
    log: list          # dict rows: step, loss, score_term, gamma_term, lr, ema_decay
    opt: OptimState
    ema: EmaState
    reports: list = field(default_factory=list)


def _draw_batch(data, n: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(data, ScoreOracle):
        x, _ = data.sample(n, rng)
        return x
    return np.asarray(data(n, rng), dtype=np.float64)


def train_score_model(model: ScoreNet, schedule: Schedule, data, cfg: TrainSettings,
                      seed: int = 0, only: set[str] | None = None,
                      report_every: int = 0, report_batch=None) -> TrainResult:
    """Train a score net on noised batches; deterministic under the seed.

    ``data`` is a ScoreOracle (enables analytic targets) or a callable
    ``(n, rng) -> batch``. ``only`` restricts updates to a parameter subset.
    """
    if cfg.score_target == "analytic-oracle" and not isinstance(data, ScoreOracle):
        raise ValueError("analytic-oracle targets need a ScoreOracle data source")
    rng = make_rng(seed)
    params = model.params()
    opt = OptimState(method=cfg.optimizer, lr=cfg.lr, weight_decay=cfg.weight_decay)
    ema = EmaState.init(params, cfg.ema_decay)
    trainable = set(params) - model.frozen_names()
    if only is not None:
        trainable &= only
    log: list[dict] = []
    reports: list = []

    for step in range(cfg.steps):
        x0 = _draw_batch(data, cfg.batch, rng)
        t = rng.uniform(cfg.t_min, 1.0, size=cfg.batch)
        eps = rng.standard_normal(x0.shape)
        z_t = schedule.perturb(x0, t, eps)

        tape = Tape()
        pn = model.bind(tape)
        z_node = tape.leaf(z_t)
        out, trace = model.forward(tape, pn, z_node, t)

        if cfg.objective == "eps-prediction":
            target = eps
        elif cfg.score_target == "analytic-oracle":
            target = data.score_t(z_t, t, schedule)
        else:
            va = np.asarray(schedule.added_var(t))[:, None]
            s = np.asarray(schedule.scale(t))[:, None]
            target = -(z_t - s * x0) / va
        score_term = _mse(out, tape.leaf(target))

        loss = score_term
        gamma_value = 0.0
        if cfg.gamma > 0:
            probe = rng.choice([-1.0, 1.0], size=model.stack.width)
            penalty = gate_sensitivity_penalty(trace.records, probe)
            if penalty is not None:
                gamma_value = penalty.value.item()
                loss = forward_op("add",
                                  [score_term, forward_op("scalar-scale", [penalty],
                                                          scale=cfg.gamma)])
        try:
            loss_value = loss.value.item()
            grads = backward(loss, wrt=[pn[n] for n in trainable])
        except NonFiniteError as exc:
            raise DivergenceError(f"non-finite loss at step {step}: {exc}") from exc
        if loss_value > cfg.divergence_limit:
            raise DivergenceError(
                f"loss {loss_value:.3e} exceeded {cfg.divergence_limit:.1e} at step {step}")

        named_grads = {n: grads[pn[n]] for n in trainable}
        optimizer_step(opt, params, named_grads, only=trainable)
        for name in trainable:
            model.set_param(name, params[name])
        ema_update(ema, params)

        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.append({"step": step, "loss": loss_value,
                        "score_term": score_term.value.item(),
                        "gamma_term": gamma_value, "lr": cfg.lr,
                        "ema_decay": cfg.ema_decay})
        if report_every and (step % report_every == 0 or step == cfg.steps - 1):
            from .sensitivity import sensitivity_report
            rb = report_batch if report_batch is not None else x0[: min(64, len(x0))]
            reports.append(sensitivity_report(
                model, rb, lambda o: forward_op("sum", [forward_op("square", [o])]),
                step=step, t=0.5))
    return TrainResult(log, opt, ema, reports)


def finetune_gates(model: ScoreNet, schedule: Schedule, data, cfg: TrainSettings,
                   seed: int = 0, **kw) -> TrainResult:
    """Fine-tune only the gates; the mapper parameters stay bit-identical."""
    return train_score_model(model, schedule, data, cfg, seed,
                             only=model.gate_names(), **kw)


def ema_model(model: ScoreNet, ema: EmaState) -> ScoreNet:
    """Copy of the model carrying the EMA shadow parameters."""
    import copy as _copy
    clone = _copy.deepcopy(model)
    load_params(clone, ema.shadow)
    return clone


def eval_score_loss(model: ScoreNet, schedule: Schedule, data, cfg: TrainSettings,
                    n: int = 4096, seed: int = 999) -> float:
    """Training objective of the current parameters on one large fresh batch.

    A deterministic, minibatch-noise-free reading of the final training loss;
    the target construction mirrors the training loop.
    """
    rng = make_rng(seed)
    x0 = _draw_batch(data, n, rng)
    t = rng.uniform(cfg.t_min, 1.0, size=n)
    eps = rng.standard_normal(x0.shape)
    z_t = schedule.perturb(x0, t, eps)
    if cfg.objective == "eps-prediction":
        target = eps
    elif cfg.score_target == "analytic-oracle":
        target = data.score_t(z_t, t, schedule)
    else:
        va = np.asarray(schedule.added_var(t))[:, None]
        s = np.asarray(schedule.scale(t))[:, None]
        target = -(z_t - s * x0) / va
    pred = model.apply(z_t, t)
    return float(np.mean((pred - target) ** 2))
