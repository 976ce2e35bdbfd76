"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The operation set is intentionally small and fixed; larger feature mappers are
built as compositions of these primitives so that the gradient of every
building block stays finite-difference checkable. One tape per forward
evaluation; the tape is discarded after the backward sweep.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "forward_op",
    "backward",
    "vjp",
    "finite_difference_grad",
    "SUPPORTED_OPS",
]

MAX_RANK = 4


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf scalar would enter a Tensor."""


def _validate(a: np.ndarray) -> None:
    if a.ndim > MAX_RANK:
        raise ShapeError(f"rank {a.ndim} exceeds supported maximum {MAX_RANK}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("non-finite value in tensor")


class Tensor:
    """Immutable dense array of 64-bit reals.

    Construction validates that every scalar is finite; any NaN/Inf produced
    by an operation therefore surfaces as :class:`NonFiniteError` at the op
    that created it instead of propagating silently.
    """

    __slots__ = ("_a",)

    def __init__(self, data):
        a = np.asarray(data, dtype=np.float64)
        _validate(a)
        if a is data or a.base is not None or not a.flags["OWNDATA"] \
                or not a.flags["C_CONTIGUOUS"]:
            a = np.array(a, order="C")  # never freeze or alias caller memory
        a.setflags(write=False)
        self._a = a

    @staticmethod
    def _own(data) -> "Tensor":
        """Wrap a freshly allocated array without copying (internal use)."""
        a = np.asarray(data, dtype=np.float64)
        _validate(a)
        if not a.flags["C_CONTIGUOUS"] or a.base is not None:
            a = np.ascontiguousarray(a)
        a.setflags(write=False)
        t = object.__new__(Tensor)
        t._a = a
        return t

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view of the values."""
        return self._a

    @property
    def shape(self) -> tuple[int, ...]:
        return self._a.shape

    @property
    def size(self) -> int:
        return self._a.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the scalars."""
        return self._a.reshape(-1)

    def item(self) -> float:
        if self._a.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self._a.reshape(-1)[0])

    def tolist(self):
        return self._a.tolist()

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor({np.array2string(self._a, precision=6, suppress_small=True)})"

    @staticmethod
    def zeros(shape) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float64))

    @staticmethod
    def ones(shape) -> "Tensor":
        return Tensor(np.ones(shape, dtype=np.float64))


def as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.array
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Node:
    """One entry of the computation graph: a value plus backward bookkeeping."""

    __slots__ = ("value", "tag", "parents", "grad", "tape", "index", "_vjps")

    def __init__(self, value: Tensor, tag: str, parents: tuple, tape: "Tape",
                 index: int, vjps: tuple):
        self.value = value
        self.tag = tag
        self.parents = parents
        self.tape = tape
        self.index = index
        self._vjps = vjps  # one callable per parent: out-grad ndarray -> parent-grad ndarray
        self.grad: Tensor | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node#{self.index}[{self.tag}]{self.shape}"

    # operator sugar; everything routes through forward_op
    def __add__(self, other: "Node") -> "Node":
        return forward_op("add", [self, other])

    def __sub__(self, other: "Node") -> "Node":
        return forward_op("sub", [self, other])

    def __mul__(self, other: "Node") -> "Node":
        return forward_op("mul", [self, other])

    def __matmul__(self, other: "Node") -> "Node":
        return forward_op("matmul", [self, other])

    def __neg__(self) -> "Node":
        return forward_op("scalar-scale", [self], scale=-1.0)


class Tape:
    """Append-only record of nodes in topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value) -> Node:
        """Register an input node (parameter, data batch, or constant)."""
        t = value if isinstance(value, Tensor) else Tensor(value)
        node = Node(t, "leaf", (), self, len(self.nodes), ())
        self.nodes.append(node)
        return node

    def leaves(self) -> list[Node]:
        return [n for n in self.nodes if n.tag == "leaf"]

    def _append(self, value: Tensor, tag: str, parents: tuple, vjps: tuple) -> Node:
        node = Node(value, tag, parents, self, len(self.nodes), vjps)
        self.nodes.append(node)
        return node


def _broadcast_shapes(tag, sa, sb):
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{tag}: cannot broadcast shapes {sa} and {sb}") from None
    if len(out) > MAX_RANK:
        raise ShapeError(f"{tag}: broadcast result rank {len(out)} exceeds {MAX_RANK}")
    return out


def _op_add(a, b):
    _broadcast_shapes("add", a.shape, b.shape)
    out = a + b
    return out, (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape))


def _op_sub(a, b):
    _broadcast_shapes("sub", a.shape, b.shape)
    out = a - b
    return out, (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape))


def _op_mul(a, b):
    _broadcast_shapes("mul", a.shape, b.shape)
    out = a * b
    return out, (lambda g: _unbroadcast(g * b, a.shape), lambda g: _unbroadcast(g * a, b.shape))


def _op_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} vs {b.shape}")
    out = a @ b
    return out, (lambda g: g @ b.T, lambda g: a.T @ g)


def _op_affine(x, w, b):
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"affine: x and w must be rank-2, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: inner extents differ: {x.shape} vs {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} does not match output width {(w.shape[1],)}")
    out = x @ w + b
    return out, (lambda g: g @ w.T, lambda g: x.T @ g, lambda g: g.sum(axis=0))


def _op_tanh(x):
    t = np.tanh(x)
    return t, (lambda g: g * (1.0 - t * t),)


def _op_silu(x):
    s = _sigmoid(x)
    out = x * s
    return out, (lambda g: g * (s + x * s * (1.0 - s)),)


def _op_square(x):
    return x * x, (lambda g: g * (2.0 * x),)


def _op_sum(x):
    return np.sum(x), (lambda g: np.broadcast_to(g, x.shape).copy(),)


def _op_mean(x):
    n = x.size
    return np.mean(x), (lambda g: np.broadcast_to(g / n, x.shape).copy(),)


def _op_broadcast_add(x, b):
    out_shape = _broadcast_shapes("broadcast-add", x.shape, b.shape)
    if out_shape != x.shape:
        raise ShapeError(
            f"broadcast-add: second operand {b.shape} must broadcast into first {x.shape}")
    out = x + b
    return out, (lambda g: g, lambda g: _unbroadcast(g, b.shape))


_BINARY = {"add": _op_add, "sub": _op_sub, "mul": _op_mul, "matmul": _op_matmul,
           "broadcast-add": _op_broadcast_add}
_UNARY = {"tanh": _op_tanh, "silu": _op_silu, "square": _op_square,
          "sum": _op_sum, "mean": _op_mean}

SUPPORTED_OPS = ("add", "sub", "mul", "matmul", "scalar-scale", "affine",
                 "tanh", "silu", "square", "sum", "mean", "broadcast-add")


def forward_op(tag: str, inputs: list[Node], **attrs) -> Node:
    """Apply a primitive operation and append the result node to the tape."""
    if not inputs:
        raise ValueError("forward_op needs at least one input node")
    tape = inputs[0].tape
    for node in inputs:
        if node.tape is not tape:
            raise ValueError("all inputs must live on the same tape")
    arrays = [n.value.array for n in inputs]

    if tag in _BINARY:
        if len(inputs) != 2:
            raise ShapeError(f"{tag}: expects 2 inputs, got {len(inputs)}")
        out, vjps = _BINARY[tag](*arrays)
    elif tag in _UNARY:
        if len(inputs) != 1:
            raise ShapeError(f"{tag}: expects 1 input, got {len(inputs)}")
        out, vjps = _UNARY[tag](arrays[0])
    elif tag == "scalar-scale":
        if len(inputs) != 1:
            raise ShapeError("scalar-scale: expects 1 input")
        c = float(attrs.get("scale", 1.0))
        out = c * arrays[0]
        vjps = (lambda g: c * g,)
    elif tag == "affine":
        if len(inputs) != 3:
            raise ShapeError(f"affine: expects 3 inputs (x, w, b), got {len(inputs)}")
        out, vjps = _op_affine(*arrays)
    else:
        raise ValueError(f"unsupported op tag: {tag!r}")

    return tape._append(Tensor._own(out), tag, tuple(inputs), vjps)


def _sweep(start: Node, seed: np.ndarray, stop_index: int = 0) -> dict[int, np.ndarray]:
    """Reverse accumulation from ``start`` seeded with ``seed``.

    Returns a map from node index to accumulated gradient. Nodes with index
    below ``stop_index`` receive contributions but are not themselves
    propagated through (used to confine a sweep to one sub-graph).
    """
    if seed.shape != start.value.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match node shape {start.value.shape}")
    tape = start.tape
    grads: dict[int, np.ndarray] = {start.index: seed.astype(np.float64, copy=True)}
    for idx in range(start.index, stop_index - 1, -1):
        g = grads.get(idx)
        if g is None:
            continue
        node = tape.nodes[idx]
        for parent, rule in zip(node.parents, node._vjps):
            contrib = rule(g)
            acc = grads.get(parent.index)
            if acc is None:
                grads[parent.index] = np.array(contrib, dtype=np.float64, copy=True)
            else:
                acc += contrib
    return grads


def backward(loss: Node, wrt: list[Node] | None = None) -> dict[Node, Tensor]:
    """Reverse-mode gradients of a scalar loss.

    Every leaf of the tape (or of ``wrt`` when given) gets an entry; leaves
    the loss does not reach get zero tensors. Gradients are also stored on
    each requested node's ``grad`` field.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.value.shape}")
    seed = np.ones(loss.value.shape, dtype=np.float64)
    grads = _sweep(loss, seed)
    targets = loss.tape.leaves() if wrt is None else list(wrt)
    out: dict[Node, Tensor] = {}
    for node in targets:
        g = grads.get(node.index)
        t = Tensor._own(g) if g is not None else Tensor.zeros(node.value.shape)
        node.grad = t
        out[node] = t
    return out


def vjp(output: Node, inputs: list[Node], seed, stop_index: int = 0) -> list[Tensor]:
    """Vector-Jacobian product: gradients of ``seed . output`` at ``inputs``."""
    seed_arr = as_array(seed)
    grads = _sweep(output, seed_arr, stop_index=stop_index)
    result = []
    for node in inputs:
        g = grads.get(node.index)
        result.append(Tensor._own(g) if g is not None else Tensor.zeros(node.value.shape))
    return result


def finite_difference_grad(f, z, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, the oracle for all
    gradient checks. ``f`` maps a Tensor to a float (or scalar Tensor)."""
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    z_arr = as_array(z)
    flat = z_arr.reshape(-1).copy()
    grad = np.empty_like(flat)

    def evaluate(values: np.ndarray) -> float:
        res = f(Tensor(values.reshape(z_arr.shape)))
        val = res.item() if isinstance(res, Tensor) else float(res)
        if not np.isfinite(val):
            raise NonFiniteError(f"function returned non-finite value {val}")
        return val

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate(flat)
        flat[i] = orig - h
        down = evaluate(flat)
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return Tensor(grad.reshape(z_arr.shape))
