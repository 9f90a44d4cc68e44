"""
Reverse-mode automatic differentiation over dense 2-D float64 tensors.

Every primitive records itself on the active Tape (if any input requires a
gradient); Tape.backward replays the records in reverse order and accumulates
into the grad buffers of leaf tensors. Tapes are thread-local, so independent
computations may run on separate threads with their own tape.
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import block_diag as _block_diag
from scipy.special import expit, logsumexp

from errors import DomainError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
Scalar = Union[float, int, "Tensor"]

UNARY_KINDS = ("sigmoid", "relu", "leaky_relu", "log", "exp", "softplus", "abs", "power")
BINARY_KINDS = ("add", "subtract", "hadamard")

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    """Innermost tape opened on this thread, or None"""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """2-D float64 array with an optional gradient buffer"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError("tensor", arr.shape)
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.grad = np.zeros_like(arr)
        out.requires_grad = requires_grad
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, (1, 1))
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"<Tensor{tag} {self.shape} grad={self.requires_grad}>"

    def __add__(self, other): return add(self, _as_tensor(other))
    def __radd__(self, other): return add(_as_tensor(other), self)
    def __sub__(self, other): return subtract(self, _as_tensor(other))
    def __rsub__(self, other): return subtract(_as_tensor(other), self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.shape != (1, 1) or isinstance(other, np.ndarray):
            return hadamard(self, _as_tensor(other))
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(data: ArrayLike) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)))


def ones(rows: int, cols: int) -> Tensor:
    return Tensor(np.ones((rows, cols)))


@dataclass
class _Record:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of executed primitives; use as a context manager"""

    def __init__(self):
        self.records: List[_Record] = []
        self._produced = set()
        self.visit_order: List[int] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward) -> None:
        self.records.append(_Record(op, inputs, output, backward))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf's grad buffer"""
        if loss.shape != (1, 1):
            raise ShapeError("backward", loss.shape, (1, 1))
        self.visit_order = []
        if id(loss) not in self._produced:
            if loss.requires_grad:
                loss.grad += 1.0
            return

        adjoints = {id(loss): np.ones((1, 1))}
        for index in range(len(self.records) - 1, -1, -1):
            rec = self.records[index]
            upstream = adjoints.pop(id(rec.output), None)
            if upstream is None:
                continue
            self.visit_order.append(index)
            for inp, g in zip(rec.inputs, rec.backward(upstream)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in self._produced:
                    prev = adjoints.get(key)
                    adjoints[key] = g if prev is None else prev + g
                else:
                    inp.grad += g


def _emit(op: str, inputs: Tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires)
    tape = active_tape()
    if requires and tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None, scalar: Optional[Scalar] = None) -> Tensor:
    """Dispatch one of the elementwise kinds (add, hadamard, sigmoid, ..., scale)"""
    if op_kind in BINARY_KINDS:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        _same_shape(op_kind, a, b)
        ad, bd = a.data, b.data
        if op_kind == "add":
            return _emit("add", (a, b), ad + bd, lambda g: (g, g))
        if op_kind == "subtract":
            return _emit("subtract", (a, b), ad - bd, lambda g: (g, -g))
        return _emit("hadamard", (a, b), ad * bd, lambda g: (g * bd, g * ad))

    if op_kind == "scale":
        return _scale(a, scalar)

    x = a.data
    if op_kind == "sigmoid":
        s = expit(x)
        return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))
    if op_kind == "relu":
        return _emit("relu", (a,), np.maximum(x, 0.0), lambda g: (g * (x > 0),))
    if op_kind == "leaky_relu":
        slope = 0.2 if scalar is None else float(scalar)
        return _emit("leaky_relu", (a,), np.where(x > 0, x, slope * x),
                     lambda g: (g * np.where(x > 0, 1.0, slope),))
    if op_kind == "log":
        if np.any(x <= 0):
            raise DomainError(f"log of non-positive value (min {x.min():.3g})")
        return _emit("log", (a,), np.log(x), lambda g: (g / x,))
    if op_kind == "exp":
        e = np.exp(x)
        return _emit("exp", (a,), e, lambda g: (g * e,))
    if op_kind == "softplus":
        return _emit("softplus", (a,), np.logaddexp(0.0, x), lambda g: (g * expit(x),))
    if op_kind == "abs":
        return _emit("abs", (a,), np.abs(x), lambda g: (g * np.sign(x),))
    if op_kind == "power":
        p = float(scalar)
        if p != int(p) and np.any(x < 0):
            raise DomainError(f"fractional power {p} of negative value")
        if p < 0 and np.any(x == 0):
            raise DomainError(f"negative power {p} of zero")
        return _emit("power", (a,), x ** p, lambda g: (g * p * x ** (p - 1.0),))
    raise ValueError(f"unknown elementwise kind {op_kind!r}")


def _scale(a: Tensor, s: Scalar) -> Tensor:
    if isinstance(s, Tensor):
        if s.shape != (1, 1):
            raise ShapeError("scale", a.shape, s.shape)
        ad, sv = a.data, s.item()
        return _emit("scale", (a, s), ad * sv,
                     lambda g: (g * sv, np.array([[np.sum(g * ad)]])))
    sv = float(s)
    return _emit("scale", (a,), a.data * sv, lambda g: (g * sv,))


def add(a: Tensor, b: Tensor) -> Tensor: return elementwise("add", a, b)
def subtract(a: Tensor, b: Tensor) -> Tensor: return elementwise("subtract", a, b)
def hadamard(a: Tensor, b: Tensor) -> Tensor: return elementwise("hadamard", a, b)
def scale(a: Tensor, s: Scalar) -> Tensor: return elementwise("scale", a, scalar=s)
def sigmoid(a: Tensor) -> Tensor: return elementwise("sigmoid", a)
def relu(a: Tensor) -> Tensor: return elementwise("relu", a)
def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor: return elementwise("leaky_relu", a, scalar=slope)
def log(a: Tensor) -> Tensor: return elementwise("log", a)
def exp(a: Tensor) -> Tensor: return elementwise("exp", a)
def softplus(a: Tensor) -> Tensor: return elementwise("softplus", a)
def absolute(a: Tensor) -> Tensor: return elementwise("abs", a)
def power(a: Tensor, exponent: float) -> Tensor: return elementwise("power", a, scalar=exponent)


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", (a,), np.array([[a.data.sum()]]), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def norm2(a: Tensor) -> Tensor:
    """Frobenius norm; the subgradient at zero is taken as zero"""
    x = a.data
    n = float(np.sqrt(np.sum(x * x)))
    return _emit("norm2", (a,), np.array([[n]]),
                 lambda g: (g[0, 0] * x / n if n > 0 else np.zeros_like(x),))


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("softmax input contains NaN or inf")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", (a,), out,
                 lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("log_softmax input contains NaN or inf")
    out = x - logsumexp(x, axis=axis, keepdims=True)
    probs = np.exp(out)
    return _emit("log_softmax", (a,), out,
                 lambda g: (g - probs * np.sum(g, axis=axis, keepdims=True),))


def weighted_row_softmax(a: Tensor, weights: Tensor) -> Tensor:
    """out_ij = w_ij exp(a_ij) / sum_k w_ik exp(a_ik); zero weights give exact zeros"""
    _same_shape("weighted_row_softmax", a, weights)
    x, w = a.data, weights.data
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("weighted_row_softmax input contains NaN or inf")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    u = w * e
    total = u.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise DomainError("weighted_row_softmax row with no positive weight")
    out = u / total

    def backward(g):
        inner = np.sum(g * out, axis=1, keepdims=True)
        return out * (g - inner), (e / total) * (g - inner)

    return _emit("weighted_row_softmax", (a, weights), out, backward)


def cross_entropy(logits: Tensor, label_index) -> Tensor:
    """Mean negative log-softmax of the true class over rows"""
    labels = np.atleast_1d(np.asarray(label_index, dtype=np.int64))
    x = logits.data
    if labels.shape[0] != x.shape[0]:
        raise ShapeError("cross_entropy", x.shape, labels.shape)
    if np.any(labels < 0) or np.any(labels >= x.shape[1]):
        raise DomainError(f"label out of range for {x.shape[1]} classes: {labels.tolist()}")
    rows = np.arange(x.shape[0])
    lsm = x - logsumexp(x, axis=1, keepdims=True)
    loss = -lsm[rows, labels].mean()

    def backward(g):
        grad = np.exp(lsm)
        grad[rows, labels] -= 1.0
        return (grad * (g[0, 0] / x.shape[0]),)

    return _emit("cross_entropy", (logits,), np.array([[loss]]), backward)


def take_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take_rows", (a,), a.data[idx], backward)


def take_cols(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out.T, idx, g.T)
        return (out,)

    return _emit("take_cols", (a,), a.data[:, idx], backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    widths = {p.cols for p in parts}
    if len(widths) != 1:
        raise ShapeError("concat_rows", *[p.shape for p in parts])
    bounds = np.cumsum([0] + [p.rows for p in parts])
    return _emit("concat_rows", tuple(parts), np.vstack([p.data for p in parts]),
                 lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    heights = {p.rows for p in parts}
    if len(heights) != 1:
        raise ShapeError("concat_cols", *[p.shape for p in parts])
    bounds = np.cumsum([0] + [p.cols for p in parts])
    return _emit("concat_cols", tuple(parts), np.hstack([p.data for p in parts]),
                 lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def block_diag(blocks: Sequence[Tensor]) -> Tensor:
    r = np.cumsum([0] + [b.rows for b in blocks])
    c = np.cumsum([0] + [b.cols for b in blocks])
    out = _block_diag(*[b.data for b in blocks])
    return _emit("block_diag", tuple(blocks), out,
                 lambda g: tuple(g[r[i]:r[i + 1], c[i]:c[i + 1]] for i in range(len(blocks))))


def gather_entries(a: Tensor, rows, cols) -> Tensor:
    """Column vector of a[rows[p], cols[p]]"""
    ri = np.asarray(rows, dtype=np.int64)
    ci = np.asarray(cols, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, (ri, ci), g[:, 0])
        return (out,)

    return _emit("gather_entries", (a,), a.data[ri, ci].reshape(-1, 1), backward)


def scatter_symmetric(values: Tensor, n: int, rows, cols) -> Tensor:
    """n x n matrix with values[p] at (rows[p], cols[p]) and its mirror; zero elsewhere"""
    ri = np.asarray(rows, dtype=np.int64)
    ci = np.asarray(cols, dtype=np.int64)
    if values.shape != (len(ri), 1):
        raise ShapeError("scatter_symmetric", values.shape, (len(ri), 1))
    if np.any(ri == ci):
        raise DomainError("scatter_symmetric cannot place values on the diagonal")
    out = np.zeros((n, n))
    out[ri, ci] = values.data[:, 0]
    out[ci, ri] = values.data[:, 0]
    return _emit("scatter_symmetric", (values,), out,
                 lambda g: ((g[ri, ci] + g[ci, ri]).reshape(-1, 1),))


def straight_through(soft: Tensor, hard_values: np.ndarray) -> Tensor:
    """Forward the hard values, pass the gradient to the soft tensor unchanged"""
    hard = np.asarray(hard_values, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError("straight_through", soft.shape, hard.shape)
    return _emit("straight_through", (soft,), hard.copy(), lambda g: (g,))


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Affine parameters plus running moments of one BN layer"""
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches_tracked: int = 0

    @classmethod
    def create(cls, num_features: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=parameter(np.ones((1, num_features))),
            beta=parameter(np.zeros((1, num_features))),
            running_mean=np.zeros((1, num_features)),
            running_var=np.ones((1, num_features)),
            momentum=momentum,
            eps=eps,
        )

    @property
    def num_features(self) -> int:
        return self.gamma.cols


def batch_norm(x: Tensor, bn: BatchNormState, mode: str = "train",
               taps: Optional[list] = None, gamma: Optional[Tensor] = None,
               beta: Optional[Tensor] = None) -> Tensor:
    """
    Normalise per feature. Train mode uses the batch moments (biased variance)
    and folds them into the running moments by EMA; eval mode uses the running
    moments and leaves them untouched. Pre-normalisation inputs are appended to
    taps when given. gamma/beta override the stored affine parameters (masking).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.cols != bn.num_features:
        raise ShapeError("batch_norm", x.shape, (x.rows, bn.num_features))
    if taps is not None:
        taps.append(x)
    gamma = bn.gamma if gamma is None else gamma
    beta = bn.beta if beta is None else beta

    xd, gd = x.data, gamma.data
    if mode == "train":
        mu = xd.mean(axis=0, keepdims=True)
        var = xd.var(axis=0, keepdims=True)
        m = bn.momentum
        bn.running_mean = (1.0 - m) * bn.running_mean + m * mu
        bn.running_var = (1.0 - m) * bn.running_var + m * var
        bn.num_batches_tracked += 1
    else:
        mu, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (xd - mu) * inv_std
    out = gd * xhat + beta.data
    n = xd.shape[0]

    def backward(g):
        dxhat = g * gd
        if mode == "train":
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0, keepdims=True)
                                - xhat * np.sum(dxhat * xhat, axis=0, keepdims=True))
        else:
            dx = dxhat * inv_std
        return dx, np.sum(g * xhat, axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _emit("batch_norm", (x, gamma, beta), out, backward)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def row_sum(a: Tensor) -> Tensor:
    return matmul(a, ones(a.cols, 1))


def column_mean(a: Tensor) -> Tensor:
    return matmul(Tensor(np.full((1, a.rows), 1.0 / a.rows)), a)


def repeat_rows(row: Tensor, n: int) -> Tensor:
    return matmul(ones(n, 1), row)


def repeat_cols(col: Tensor, n: int) -> Tensor:
    return matmul(col, ones(1, n))


# ---------------------------------------------------------------------------
# optimisation and gradient checking
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    lr: float = 1e-2
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    eps: float = 1e-8
    step_count: int = 0
    first: List[np.ndarray] = field(default_factory=list)
    second: List[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamWState) -> Sequence[Tensor]:
    """One decoupled-weight-decay Adam update, in place"""
    if len(params) != len(grads):
        raise ShapeError("adamw_step", (len(params),), (len(grads),))
    if not state.first:
        state.first = [np.zeros_like(p.data) for p in params]
        state.second = [np.zeros_like(p.data) for p in params]
    if len(state.first) != len(params):
        raise ShapeError("adamw_step", (len(state.first),), (len(params),))

    state.step_count += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.first, state.second):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError("adamw_step", p.shape, g.shape)
        p.data *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class AdamW:
    """Holds a parameter list and its AdamWState; steps from the grad buffers"""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2, betas=(0.9, 0.999),
                 weight_decay: float = 1e-4, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamWState(lr=lr, betas=tuple(betas), weight_decay=weight_decay, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """
    Max over entries of |analytic - central difference| / (|analytic| + 1e-8).
    f must be pure in x; gradients of other leaves touched by f are left
    accumulated, so callers should zero them afterwards if they care.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        out = f(x)
    tape.backward(out)
    analytic = x.grad.copy()

    numeric = np.zeros_like(analytic)
    for idx in np.ndindex(*x.shape):
        orig = x.data[idx]
        x.data[idx] = orig + h
        f_plus = f(x).item()
        x.data[idx] = orig - h
        f_minus = f(x).item()
        x.data[idx] = orig
        numeric[idx] = (f_plus - f_minus) / (2.0 * h)

    x.zero_grad()
    x.requires_grad = was
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
