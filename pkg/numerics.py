# 基于 numpy 的张量、反向自动微分、梯度检查和 Adam

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from log import logger
from settings import (
    ADAM_BETAS,
    ADAM_EPS,
    BASE_LR,
    COSINE_EPS,
    GRADCHECK_STEP,
    GRADCHECK_TOL,
    LAYER_NORM_EPS,
    LR_DECAY_FACTOR,
    LR_DECAY_PERIOD,
)
from utils import Singleton


class DimensionError(ValueError):
    """Shape contract violated"""


class NumericError(ArithmeticError):
    """A value that must be finite is not"""


class Precision(metaclass=Singleton):
    """Default float dtype for new tensors and parameters.

    f32 is used for training; gradient checks switch to f64 with
    ``Precision().use("float64")``.
    """

    def __init__(self) -> None:
        self.dtype = np.dtype(np.float32)

    @contextmanager
    def use(self, dtype):
        previous = self.dtype
        self.dtype = np.dtype(dtype)
        try:
            yield self
        finally:
            self.dtype = previous


_node_ids = itertools.count()


class Node:
    __slots__ = ("id", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable) -> None:
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op})"


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode gradients"""

    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        dtype = np.dtype(dtype) if dtype is not None else Precision().dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only division by a constant is supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def relu(self) -> "Tensor":
        return elementwise("relu", self)

    def tanh(self) -> "Tensor":
        return elementwise("tanh", self)

    def sigmoid(self) -> "Tensor":
        return elementwise("sigmoid", self)


class Parameter(Tensor):
    """A named learnable tensor whose gradient accumulates across a backward pass"""

    def __init__(self, name: str, value: ArrayLike, dtype=None) -> None:
        super().__init__(np.array(value), requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def uniform_parameter(name: str, shape: tuple, rng: np.random.Generator) -> Parameter:
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = shape[0]"""
    bound = 1.0 / np.sqrt(shape[0])
    return Parameter(name, rng.uniform(-bound, bound, size=shape))


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b
    return _as_tensor(a, like), _as_tensor(b, like)


def _result(op: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out the axes numpy broadcasting added so ``grad`` matches ``shape``"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# arithmetic
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    """Elementwise product; a row vector broadcasts over the rows of a matrix"""
    a, b = _pair(a, b)

    def backward_fn(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", a.data @ b.data, (a, b), backward_fn)


def transpose(x: Tensor) -> Tensor:
    def backward_fn(g):
        return (g.T,)

    return _result("transpose", x.data.T, (x,), backward_fn)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _result("reshape", x.data.reshape(shape), (x,), backward_fn)


def tensor_sum(x: Tensor) -> Tensor:
    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward_fn)


def elementwise(kind: str, x: Tensor) -> Tensor:
    """Pointwise relu, tanh or sigmoid; relu'(0) is 0"""
    if kind == "relu":
        y = np.maximum(x.data, 0)

        def backward_fn(g):
            return (g * (x.data > 0),)

    elif kind == "tanh":
        y = np.tanh(x.data)

        def backward_fn(g):
            return (g * (1 - y * y),)

    elif kind == "sigmoid":
        # tanh form does not overflow for large |x|
        y = 0.5 * (1 + np.tanh(0.5 * x.data))

        def backward_fn(g):
            return (g * y * (1 - y),)

    else:
        raise ValueError(f"Unknown elementwise op: {kind}")

    return _result(kind, y.astype(x.dtype, copy=False), (x,), backward_fn)


# --------------------------------------------------------------------------
# structural ops
# --------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} along axis {axis}: {e}")
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", data, tensors, backward_fn)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("stack: nothing to stack")

    def backward_fn(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _result("stack", np.stack([t.data for t in tensors]), tensors, backward_fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def backward_fn(g):
        grad = np.zeros_like(x.data)
        grad[:, start:stop] = g
        return (grad,)

    return _result("slice_cols", x.data[:, start:stop], (x,), backward_fn)


def take_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    """Rows ``x[index]``; repeated indices accumulate gradient"""
    index = np.asarray(index, dtype=np.int64)

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result("take_rows", x.data[index], (x,), backward_fn)


def gather(x: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Entries ``x[rows, cols]`` (fancy indexing on a matrix)"""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (rows, cols), g)
        return (grad,)

    return _result("gather", x.data[rows, cols], (x,), backward_fn)


# --------------------------------------------------------------------------
# normalisation and similarity
# --------------------------------------------------------------------------


def row_softmax(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"row_softmax expects a matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result("row_softmax", y, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row standardisation followed by ``gain * x + bias``"""
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"layer_norm expects a [p x d] matrix with d >= 1, got {x.shape}")
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {x.shape[1]}")
    mean = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat * gain.data + bias.data

    def backward_fn(g):
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result("layer_norm", y.astype(x.dtype, copy=False), (x, gain, bias), backward_fn)


def max_over_axis(x: Tensor, axis: int = 1) -> tuple[Tensor, np.ndarray]:
    """Maximum of each slice along ``axis`` and its first-occurrence index.

    The gradient flows only to the selected element; the index choice itself
    is not differentiated.
    """
    if x.ndim != 2:
        raise DimensionError(f"max_over_axis expects a matrix, got {x.shape}")
    if x.shape[axis] == 0:
        raise DimensionError(f"max_over_axis: axis {axis} of {x.shape} is empty")
    index = np.argmax(x.data, axis=axis)
    if axis == 1:
        positions = (np.arange(x.shape[0]), index)
    else:
        positions = (index, np.arange(x.shape[1]))
    values = x.data[positions]

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        grad[positions] = g
        return (grad,)

    return _result("max", values, (x,), backward_fn), index


def cosine_similarity_matrix(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """``out[i, j] = a_i . b_j / max(|a_i| |b_j|, eps)``"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1] or a.shape[1] < 1:
        raise DimensionError(f"cosine_similarity_matrix: incompatible {a.shape} and {b.shape}")
    dots = a.data @ b.data.T
    norm_a = np.sqrt((a.data * a.data).sum(axis=1))
    norm_b = np.sqrt((b.data * b.data).sum(axis=1))
    outer = np.outer(norm_a, norm_b)
    unclamped = outer > eps
    denom = np.where(unclamped, outer, eps)
    cos = dots / denom

    def backward_fn(g):
        scaled = g / denom
        # the normalisation term only exists where the eps clamp is inactive
        weight = np.where(unclamped, g * cos, 0.0)
        sq_a = np.where(norm_a > 0, norm_a * norm_a, 1.0)
        sq_b = np.where(norm_b > 0, norm_b * norm_b, 1.0)
        grad_a = scaled @ b.data - (weight.sum(axis=1) / sq_a)[:, None] * a.data
        grad_b = scaled.T @ a.data - (weight.sum(axis=0) / sq_b)[:, None] * b.data
        return grad_a, grad_b

    return _result("cosine", cos.astype(a.dtype, copy=False), (a, b), backward_fn)


# --------------------------------------------------------------------------
# reverse mode
# --------------------------------------------------------------------------


@dataclass
class DiffGraph:
    """Recorded nodes reachable from an output, in creation order"""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "DiffGraph":
        seen = set()
        found = []
        pending = [output]
        while pending:
            t = pending.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            pending.extend(t.node.inputs)
        found.sort(key=lambda t: t.node.id)
        return cls(found)

    def reset(self) -> None:
        """Drop saved contexts so intermediate arrays can be freed"""
        for t in self.nodes:
            t.node = None
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


def _accumulate_leaf(leaf: Tensor, grad: np.ndarray) -> None:
    if grad.shape != leaf.shape:
        raise DimensionError(f"gradient of shape {grad.shape} for tensor of shape {leaf.shape}")
    grad = grad.astype(leaf.dtype, copy=False)
    leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad


def backward(loss: Tensor) -> DiffGraph:
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every leaf requiring it"""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, seed)
        return DiffGraph()

    graph = DiffGraph.trace(loss)
    grads = {id(loss): seed}
    for t in reversed(graph.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for inp, inp_grad in zip(t.node.inputs, t.node.backward_fn(g)):
            if inp_grad is None or not inp.requires_grad:
                continue
            if inp.node is None:
                _accumulate_leaf(inp, inp_grad)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + inp_grad
            else:
                grads[id(inp)] = inp_grad
    return graph


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    checked: int
    max_rel_error: float
    max_abs_error: float
    worst: str
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def _coordinates(params: Sequence[Parameter], samples: Optional[int], rng: np.random.Generator):
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    if samples is None or samples >= total:
        flat = np.arange(total)
    else:
        flat = np.sort(rng.choice(total, size=samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for f in flat:
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        yield params[k], np.unravel_index(int(f - offsets[k]), params[k].shape)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = GRADCHECK_STEP,
    tol: float = GRADCHECK_TOL,
    samples: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() against central differences ``(f(p+h) - f(p-h)) / 2h``.

    ``f`` must be deterministic. A coordinate fails when its relative error
    (denominator ``max(|a|, |b|, 1e-8)``) reaches ``tol``.
    """
    params = list(params)
    zero_grad(params)
    backward(f()).reset()
    analytic = {p.name: p.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(checked=0, max_rel_error=0.0, max_abs_error=0.0, worst="")
    for p, idx in _coordinates(params, samples, rng):
        original = p.data[idx].copy()
        p.data[idx] = original + h
        f_plus = f().item()
        p.data[idx] = original - h
        f_minus = f().item()
        p.data[idx] = original

        numeric = (f_plus - f_minus) / (2 * h)
        a = float(analytic[p.name][idx])
        abs_err = abs(a - numeric)
        rel_err = abs_err / max(abs(a), abs(numeric), 1e-8)
        report.checked += 1
        report.max_abs_error = max(report.max_abs_error, abs_err)
        if rel_err > report.max_rel_error:
            report.max_rel_error = rel_err
            report.worst = f"{p.name}{list(idx)}"
        if rel_err >= tol:
            report.failures.append(f"{p.name}{list(idx)}: analytic={a:.6e} numeric={numeric:.6e}")
    zero_grad(params)
    logger.debug(
        f"Gradient check: {report.checked} coordinates, max rel error {report.max_rel_error:.3e} at {report.worst}"
    )
    return report


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    base_lr: float = BASE_LR
    betas: tuple = ADAM_BETAS
    eps: float = ADAM_EPS
    decay_period: int = LR_DECAY_PERIOD
    decay_factor: float = LR_DECAY_FACTOR
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def lr_at(self, epoch: int) -> float:
        """Step decay: ``base_lr * decay_factor ** floor(epoch / decay_period)``"""
        return self.base_lr * self.decay_factor ** (epoch // self.decay_period)


def adam_step(state: AdamState, params: Iterable[Parameter], epoch: int) -> float:
    """One bias-corrected Adam update; gradients are left for the caller to zero"""
    lr = state.lr_at(epoch)
    state.step += 1
    beta1, beta2 = state.betas
    correction1 = 1 - beta1**state.step
    correction2 = 1 - beta2**state.step
    for p in params:
        if p.grad is None or p.grad.shape != p.data.shape:
            raise DimensionError(f"Adam: gradient of {p.name} does not match its shape {p.shape}")
        m = state.first_moment.get(p.name)
        v = state.second_moment.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1 - beta1) * p.grad
        v = beta2 * v + (1 - beta2) * p.grad * p.grad
        state.first_moment[p.name] = m
        state.second_moment[p.name] = v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)
    return lr
