"""Dense float64 tensors with a reverse-mode differentiation tape.

Operations are recorded as they run (define-by-run). Each result tensor keeps
references to its parents and a closure that maps the output adjoint to the
parent adjoints. ``Tensor.backward`` walks the recorded graph in reverse
topological order and accumulates gradients into every leaf that has
``requires_grad`` set.

:class:`Tape` wraps a function of named leaves into the forward/backward
interface used by :func:`gradient_check` and the tests.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf with ``requires_grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {self.shape}")
        order = _topological_order(self)
        adjoints: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitive catalog
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _result(A @ B, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    A, B = a.data, b.data
    return _result(
        A * B,
        (a, b),
        lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected 2-d input, got {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0  # subgradient 0 at the kink
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: input has non-positive entries")
    A = a.data
    return _result(np.log(A), (a,), lambda g: (g / A,), "log")


def square(a: Tensor) -> Tensor:
    A = a.data
    return _result(A * A, (a,), lambda g: (2.0 * g * A,), "square")


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.sum(a.data, axis=axis), (a,), backward, "sum")


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def l2_normalize(a: Tensor) -> Tensor:
    """Scale every row of a 2-d tensor to unit Euclidean norm."""
    if a.ndim != 2:
        raise DimensionError(f"l2_normalize: expected 2-d input, got {a.shape}")
    norms = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise DomainError("l2_normalize: zero-norm row")
    out = a.data / norms

    def backward(g):
        dot = np.sum(g * out, axis=1, keepdims=True)
        return ((g - out * dot) / norms,)

    return _result(out, (a,), backward, "l2_normalize")


def softmax(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"softmax: expected 2-d input, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"log_softmax: expected 2-d input, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def gather(a: Tensor, index) -> Tensor:
    """Pick ``a[i, index[i]]`` for every row ``i``."""
    idx = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(f"gather: index shape {idx.shape} does not match rows of {a.shape}")
    if np.any(idx < 0) or np.any(idx >= a.shape[1]):
        raise DimensionError(f"gather: index out of range for width {a.shape[1]}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _result(a.data[rows, idx], (a,), backward, "gather")


class BatchNormState:
    """Running statistics of one batch-norm layer (updated in training mode)."""

    def __init__(self, width: int, momentum: float = 0.9, eps: float = 1e-5):
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize over the batch axis.

    Training mode uses batch statistics and folds them into the running
    averages (``running = momentum * running + (1 - momentum) * batch``);
    evaluation mode uses the running averages and is per-sample independent.
    """
    if x.ndim != 2 or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise DimensionError(f"batch_norm: input {x.shape} vs affine {gamma.shape}/{beta.shape}")
    X, G = x.data, gamma.data
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (X - state.running_mean) * inv

        def backward_eval(g):
            return (g * G * inv, np.sum(g * xhat, axis=0), np.sum(g, axis=0))

        return _result(xhat * G + beta.data, (x, gamma, beta), backward_eval, "batch_norm")

    n = X.shape[0]
    mu = X.mean(axis=0)
    var = X.var(axis=0)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (X - mu) * inv
    m = state.momentum
    state.running_mean = m * state.running_mean + (1.0 - m) * mu
    state.running_var = m * state.running_var + (1.0 - m) * var

    def backward(g):
        dxhat = g * G
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        return (dx, np.sum(g * xhat, axis=0), np.sum(g, axis=0))

    return _result(xhat * G + beta.data, (x, gamma, beta), backward, "batch_norm")


def custom(inputs: Sequence[Tensor], value: np.ndarray, backward, op: str) -> Tensor:
    """Record a fused operation whose forward value and adjoint rule come from elsewhere."""
    return _result(np.asarray(value, dtype=np.float64), tuple(inputs), backward, op)


# ---------------------------------------------------------------------------
# tape interface
# ---------------------------------------------------------------------------


class Tape:
    """A differentiable program over named leaves.

    ``fn`` receives keyword tensors and returns the output tensor. The tape
    records every primitive issued by ``fn`` during :meth:`forward`.
    """

    def __init__(self, fn: Callable[..., Tensor]):
        self.fn = fn
        self._leaves: Optional[Dict[str, Tensor]] = None
        self._output: Optional[Tensor] = None

    def forward(self, leaves: Mapping[str, object], requires_grad: bool = True) -> Tensor:
        self._leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=requires_grad) for k, v in leaves.items()}
        self._output = self.fn(**self._leaves)
        return self._output

    def backward(self) -> Dict[str, np.ndarray]:
        if self._output is None or self._leaves is None:
            raise TapeStateError("backward called before forward")
        self._output.backward()
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self._leaves.items()
        }


def forward_eval(tape: Tape, leaves: Mapping[str, object]) -> Tensor:
    return tape.forward(leaves)


def backward_pass(tape: Tape, output: Optional[Tensor] = None) -> Dict[str, np.ndarray]:
    if output is not None and output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    return tape.backward()


def gradient_check(tape: Tape, leaves: Mapping[str, object], eps: float = 1e-5, names: Optional[Iterable[str]] = None) -> float:
    """Max relative error between the tape's adjoints and central differences.

    The denominator per coordinate is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    base = {k: np.array(v, dtype=np.float64) for k, v in leaves.items()}
    tape.forward(base)
    analytic = tape.backward()
    worst = 0.0
    for name in names if names is not None else base:
        x = base[name]
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(tape.forward(base, requires_grad=False).data)
            flat[i] = orig - eps
            fm = float(tape.forward(base, requires_grad=False).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            ana = float(analytic[name].reshape(-1)[i])
            denom = max(abs(ana), abs(num), 1e-8)
            worst = max(worst, abs(ana - num) / denom)
    return worst
