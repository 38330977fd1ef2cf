"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the kernels needed by the transformer forward pass and the three
pre-training losses are provided. Broadcasting is limited to bias-add over
the last dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from mpa_pretrain.errors import ContractError, DimensionError, NumericError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Index = Union[int, Sequence[int], np.ndarray]

LAYERNORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass
class Operation:
    """A recorded primitive: its name, inputs and vector-Jacobian product."""

    name: str
    inputs: Tuple["Tensor", ...]
    vjp: BackwardFn


class Tensor:
    """Row-major float64 array with an optional gradient accumulator."""

    def __init__(
        self,
        data: object,
        requires_grad: bool = False,
        name: Optional[str] = None,
        copy: bool = True,
    ):
        if copy:
            self.data: np.ndarray = np.array(data, dtype=np.float64)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op: Optional[Operation] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"


def constant(data: object) -> Tensor:
    """Tensor that never receives gradients."""
    return Tensor(data)


def _record(data: np.ndarray, name: str, inputs: Tuple[Tensor, ...], vjp: BackwardFn) -> Tensor:
    out = Tensor(data, copy=False)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = Operation(name, inputs, vjp)
    return out


class ComputationTape:
    """Tensors reachable from a root, in topological order (inputs first)."""

    def __init__(self, root: Tensor):
        self.order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                self.order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor.op is not None:
                for parent in reversed(tensor.op.inputs):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.order)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.order)

    @property
    def operations(self) -> List[Operation]:
        return [t.op for t in self.order if t.op is not None]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.ndim != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() called on a loss that is not on the tape")

    tape = ComputationTape(loss)
    grads = {id(loss): np.ones((), dtype=np.float64)}
    for tensor in reversed(tape.order):
        grad = grads.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor.op is None:
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        for parent, parent_grad in zip(tensor.op.inputs, tensor.op.vjp(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def detach(a: Tensor) -> Tensor:
    """Same values, excluded from gradient flow."""
    return Tensor(a.data)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _record(a.data @ b.data, "matmul", (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last dimension."""
    if a.shape == b.shape:
        return _record(a.data + b.data, "add", (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        width = b.shape[0]
        return _record(
            a.data + b.data,
            "bias_add",
            (a, b),
            lambda g: (g, g.reshape(-1, width).sum(axis=0)),
        )
    raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum of same-shape tensors."""
    if not tensors:
        raise ContractError("add_n needs at least one tensor")
    total = tensors[0]
    for tensor in tensors[1:]:
        total = add(total, tensor)
    return total


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _record(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    return _record(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    return _record(a.data * factor, "scale", (a,), lambda g: (g * factor,))


def square(a: Tensor) -> Tensor:
    return _record(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return _record(
        np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.full_like(a.data, float(g)),)
    )


def mean(a: Tensor) -> Tensor:
    count = a.data.size
    if count == 0:
        raise ContractError("mean of an empty tensor")
    return _record(
        np.asarray(a.data.sum() / count),
        "mean",
        (a,),
        lambda g: (np.full_like(a.data, float(g) / count),),
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _record(a.data.T, "transpose", (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    return _record(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(original),))


def take(a: Tensor, index: Index) -> Tensor:
    """Gather along the first axis (embedding lookup, row selection)."""
    idx = np.asarray(index, dtype=np.int64)
    out = a.data[idx]

    def vjp(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _record(out, "take", (a,), vjp)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise DimensionError(f"column slice [{start}:{stop}] invalid for shape {a.shape}")

    def vjp(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad = np.zeros_like(a.data)
        grad[:, start:stop] = g
        return (grad,)

    return _record(a.data[:, start:stop], "columns", (a,), vjp)


def concat_columns(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ContractError("concat_columns needs at least one tensor")
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.data.ndim != 2 or t.shape[0] != rows:
            raise DimensionError(f"concat_columns row mismatch: {[x.shape for x in tensors]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def vjp(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _record(
        np.concatenate([t.data for t in tensors], axis=1), "concat_columns", tuple(tensors), vjp
    )


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return _record(a.data * positive, "relu", (a,), lambda g: (g * positive,))


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)

    def vjp(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _record(0.5 * x * (1.0 + t), "gelu", (a,), vjp)


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _record(a.data * keep, "dropout", (a,), lambda g: (g * keep,))


def softmax_rows(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row softmax; entries where ``mask`` is True are treated as -inf."""
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got shape {a.shape}")
    if np.isnan(a.data).any():
        raise NumericError("softmax_rows received NaN input")
    z = a.data if mask is None else np.where(mask, -np.inf, a.data)
    row_max = z.max(axis=1, keepdims=True)
    if not np.isfinite(row_max).all():
        raise NumericError("softmax_rows received a fully masked or non-finite row")
    e = np.exp(z - row_max)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(p, "softmax_rows", (a,), vjp)


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    width = a.shape[-1] if a.data.ndim else -1
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layernorm shape mismatch: input {a.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    x = a.data
    centered = x - x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def vjp(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        gxhat = g * gain.data
        grad_a = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (
            grad_a,
            (g * xhat).reshape(-1, width).sum(axis=0),
            g.reshape(-1, width).sum(axis=0),
        )

    return _record(xhat * gain.data + bias.data, "layernorm", (a, gain, bias), vjp)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    """Stable log-softmax over the last axis of a plain array."""
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _reduce(losses: np.ndarray, reduction: str) -> Tuple[np.ndarray, float]:
    if reduction == "sum":
        return np.asarray(losses.sum()), 1.0
    if reduction == "mean":
        if losses.size == 0:
            raise ContractError("mean reduction over zero elements")
        return np.asarray(losses.sum() / losses.size), 1.0 / losses.size
    raise ContractError(f"unknown reduction '{reduction}'")


def cross_entropy_from_logits(
    logits: Tensor, targets: Iterable[int], reduction: str = "mean"
) -> Tensor:
    """Mean (or sum) of -log softmax(logits)[i, target_i], evaluated in log-space."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross entropy needs [n x V] logits, got shape {logits.shape}")
    rows, vocab = logits.shape
    target = np.asarray(list(targets) if not isinstance(targets, np.ndarray) else targets)
    target = target.astype(np.int64).reshape(-1)
    if target.shape[0] != rows:
        raise DimensionError(f"{target.shape[0]} targets for {rows} logit rows")
    if target.size and (target.min() < 0 or target.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab}): {target.tolist()}")

    log_p = log_softmax_rows(logits.data)
    picked = np.arange(rows)
    value, factor = _reduce(-log_p[picked, target], reduction)

    def vjp(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad = np.exp(log_p)
        grad[picked, target] -= 1.0
        return (grad * (float(g) * factor),)

    return _record(value, "cross_entropy", (logits,), vjp)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def binary_cross_entropy_with_logits(
    logits: Tensor, targets: Iterable[float], reduction: str = "mean"
) -> Tensor:
    """-y log sigmoid(z) - (1 - y) log(1 - sigmoid(z)) in the stable softplus form."""
    z = logits.data
    y = np.asarray(list(targets) if not isinstance(targets, np.ndarray) else targets)
    y = y.astype(np.float64)
    if y.shape != z.shape:
        raise DimensionError(f"targets {y.shape} do not match logits {z.shape}")
    value, factor = _reduce(np.logaddexp(0.0, z) - z * y, reduction)
    return _record(
        value,
        "binary_cross_entropy",
        (logits,),
        lambda g: ((sigmoid(z) - y) * (float(g) * factor),),
    )


def finite_difference_grad(
    f: Callable[[], Union[Tensor, float]],
    x: Tensor,
    step: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
) -> Tensor:
    """Central differences of ``f`` with respect to ``x``, perturbing ``x`` in place.

    ``indices`` restricts the sweep to the given flat coordinates; the other
    entries of the result are zero.
    """
    if step <= 0:
        raise ContractError("finite difference step must be positive")
    grad = np.zeros_like(x.data)
    coords = range(x.data.size) if indices is None else indices
    for flat in coords:
        where = np.unravel_index(int(flat), x.data.shape)
        original = x.data[where]
        x.data[where] = original + step
        plus = _as_float(f())
        x.data[where] = original - step
        minus = _as_float(f())
        x.data[where] = original
        grad[where] = (plus - minus) / (2.0 * step)
    return Tensor(grad, copy=False)


def _as_float(value: Union[Tensor, float]) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)
