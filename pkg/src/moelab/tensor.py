"""Dense float64 tensors with reverse-mode automatic differentiation.

All model math runs through `Tensor` values recorded on a `Tape`. A tape is
opened per forward pass (``with Tape() as tape:``), consumed by a single
``tape.backward(loss)`` call, and discarded. Operations executed while no
tape is active compute values only, which is how evaluation and trace
capture run at full speed.

Gradient flow is value-based: every op registers one vector-Jacobian
closure per differentiable input, and ``backward`` walks the recorded nodes
in reverse creation order, so two backward passes over identical tapes
produce bit-identical gradients.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

Array = np.ndarray
Vjp = Callable[[Array], Array]

_LOCAL = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Per-forward-pass record of operations, in creation order.

    Creation order is a topological order by construction: an op's inputs
    are registered before its output. The tape is single-use; open a fresh
    one for each forward/backward pair.
    """

    def __init__(self) -> None:
        self._parents: list[list[tuple[int, Vjp]]] = []
        self._tensors: dict[int, "Tensor"] = {}

    def __len__(self) -> int:
        return len(self._parents)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def _add(self, tensor: "Tensor", parents: list[tuple[int, Vjp]]) -> int:
        node_id = len(self._parents)
        self._parents.append(parents)
        self._tensors[node_id] = tensor
        tensor.node_id = node_id
        tensor._tape = self
        return node_id

    def _node_for(self, tensor: "Tensor") -> int:
        if tensor._tape is not self or tensor.node_id is None:
            self._add(tensor, [])
        return tensor.node_id  # type: ignore[return-value]

    def backward(self, loss: "Tensor") -> dict[int, "Tensor"]:
        """Accumulate d(loss)/d(node) for every node reachable from `loss`.

        Returns the gradient map keyed by node id and deposits `.grad` on
        every requires_grad tensor that received one. The loss must be a
        scalar recorded on this tape.
        """
        if loss._tape is not self or loss.node_id is None:
            raise ContractError("backward: loss was not recorded on this tape")
        if loss.data.shape != ():
            raise ContractError(
                f"backward: loss must be a scalar, got shape {loss.data.shape}"
            )
        grads: dict[int, Array] = {loss.node_id: np.ones((), dtype=np.float64)}
        for node_id in range(len(self._parents) - 1, -1, -1):
            out_grad = grads.get(node_id)
            if out_grad is None:
                continue
            for parent_id, vjp in self._parents[node_id]:
                contribution = vjp(out_grad)
                existing = grads.get(parent_id)
                grads[parent_id] = (
                    contribution if existing is None else existing + contribution
                )
        result: dict[int, Tensor] = {}
        for node_id, grad in grads.items():
            tensor = self._tensors[node_id]
            if tensor.requires_grad:
                tensor.grad = grad
            result[node_id] = Tensor(grad)
        return result


class Tensor:
    """Dense n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return pow_(self, exponent)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean_(self, axis=axis, keepdims=keepdims)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record(data: Array, parents: Sequence[tuple[Tensor, Vjp | None]]) -> Tensor:
    """Create the output tensor of an op, recording vjps on the active tape.

    `parents` pairs each input tensor with the closure mapping the output
    gradient to that input's gradient; pass None for inputs that never
    receive gradients. Recording happens only when a tape is active and at
    least one input requires grad.
    """
    requires = any(p.requires_grad for p, _ in parents)
    out = Tensor(data, requires_grad=requires)
    tape = active_tape()
    if tape is None or not requires:
        return out
    recorded = [
        (tape._node_for(p), vjp)
        for p, vjp in parents
        if p.requires_grad and vjp is not None
    ]
    tape._add(out, recorded)
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    return record(
        a.data + b.data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ],
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return record(
        a.data - b.data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(-g, b.data.shape)),
        ],
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return record(
        a.data * b.data,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ],
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    return record(
        a.data / b.data,
        [
            (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        ],
    )


def neg(a: Tensor) -> Tensor:
    return record(-a.data, [(a, lambda g: -g)])


def pow_(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return record(
        a.data**p,
        [(a, lambda g: g * p * a.data ** (p - 1.0))],
    )


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return record(out_data, [(a, lambda g: g * out_data)])


def log(a: Tensor) -> Tensor:
    return record(np.log(a.data), [(a, lambda g: g / a.data)])


def _stable_sigmoid(x: Array) -> Array:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out_data = _stable_sigmoid(a.data)
    return record(out_data, [(a, lambda g: g * out_data * (1.0 - out_data))])


def silu(a: Tensor) -> Tensor:
    """swish(x) = x * sigmoid(x)."""
    x = a.data
    s = _stable_sigmoid(x)
    return record(x * s, [(a, lambda g: g * s * (1.0 + x * (1.0 - s)))])


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def _matmul_unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(len(shape) - 2) if shape[i] == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; inputs of ndim >= 2, leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul: inputs must have ndim >= 2, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ShapeError(
            f"matmul: incompatible batch dimensions: {a.data.shape} x {b.data.shape}"
        ) from err

    def grad_a(g: Array) -> Array:
        return _matmul_unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)

    def grad_b(g: Array) -> Array:
        return _matmul_unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)

    return record(out_data, [(a, grad_a), (b, grad_b)])


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return record(
        a.data.reshape(tuple(shape)), [(a, lambda g: g.reshape(a.data.shape))]
    )


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), [(a, lambda g: g.transpose(inverse))])


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g: Array) -> Array:
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, a.data.shape).copy()

    return record(out_data, [(a, grad_fn)])


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


# ---------------------------------------------------------------------------
# reductions with stabilized exponentials


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    if not np.isfinite(a.data).all():
        raise NumericError("softmax: input contains non-finite entries")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    out_data = exps / exps.sum(axis=-1, keepdims=True)

    def grad_fn(g: Array) -> Array:
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        return (g - inner) * out_data

    return record(out_data, [(a, grad_fn)])


def logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis, stable under large magnitudes."""
    m = a.data.max(axis=-1, keepdims=True)
    exps = np.exp(a.data - m)
    total = exps.sum(axis=-1, keepdims=True)
    out_data = (m + np.log(total)).squeeze(-1)
    soft = exps / total

    def grad_fn(g: Array) -> Array:
        return np.expand_dims(g, -1) * soft

    return record(out_data, [(a, grad_fn)])


# ---------------------------------------------------------------------------
# neural-network primitives


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learned gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = xhat * gain.data + bias.data

    def grad_x(g: Array) -> Array:
        gx = g * gain.data
        return inv_std * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )

    def grad_gain(g: Array) -> Array:
        return _unbroadcast(g * xhat, gain.data.shape)

    def grad_bias(g: Array) -> Array:
        return _unbroadcast(g, bias.data.shape)

    return record(out_data, [(x, grad_x), (gain, grad_gain), (bias, grad_bias)])


def embedding(table: Tensor, ids: Array) -> Tensor:
    """Row lookup `table[ids]`; the backward pass scatter-adds into the table."""
    ids = np.asarray(ids)
    out_data = table.data[ids]

    def grad_fn(g: Array) -> Array:
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return grad

    return record(out_data, [(table, grad_fn)])


def cross_entropy_with_logits(
    logits: Tensor, targets: Array, ignore_index: int = -100
) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ignored.

    `logits` is (N, V); `targets` is (N,) integer class ids, with
    `ignore_index` marking rows excluded from the loss.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy: expected (N, V) logits and (N,) targets, got "
            f"{logits.data.shape} and {targets.shape}"
        )
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("cross_entropy: every target position is ignored")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    total = exps.sum(axis=-1, keepdims=True)
    log_probs = shifted - np.log(total)
    rows = np.nonzero(valid)[0]
    picked = log_probs[rows, targets[rows]]
    loss = -picked.sum() / n_valid
    probs = exps / total

    def grad_fn(g: Array) -> Array:
        dlogits = probs.copy()
        dlogits[rows, targets[rows]] -= 1.0
        dlogits[~valid] = 0.0
        return dlogits * (g / n_valid)

    return record(np.float64(loss), [(logits, grad_fn)])


# ---------------------------------------------------------------------------
# indexed selection and dispatch


def gather_rows(x: Tensor, idx: Array) -> Tensor:
    """Select rows `x[idx]` along axis 0; gradients scatter-add back."""
    idx = np.asarray(idx)

    def grad_fn(g: Array) -> Array:
        grad = np.zeros_like(x.data)
        np.add.at(grad, idx, g)
        return grad

    return record(x.data[idx], [(x, grad_fn)])


def scatter_rows_add(src: Tensor, idx: Array, num_rows: int) -> Tensor:
    """Build a (num_rows, ...) tensor with `src` rows added at `idx`."""
    idx = np.asarray(idx)
    out_data = np.zeros((num_rows,) + src.data.shape[1:], dtype=np.float64)
    np.add.at(out_data, idx, src.data)
    return record(out_data, [(src, lambda g: g[idx])])


def take_along_last_axis(x: Tensor, idx: Array) -> Tensor:
    """Pick entries along the last axis: out[..., j] = x[..., idx[..., j]]."""
    idx = np.asarray(idx)
    out_data = np.take_along_axis(x.data, idx, axis=-1)
    flat_idx = idx.reshape(-1, idx.shape[-1])

    def grad_fn(g: Array) -> Array:
        grad = np.zeros_like(x.data).reshape(-1, x.data.shape[-1])
        g2 = g.reshape(-1, idx.shape[-1])
        np.add.at(grad, (np.arange(grad.shape[0])[:, None], flat_idx), g2)
        return grad.reshape(x.data.shape)

    return record(out_data, [(x, grad_fn)])


def topk_indices(values, k: int) -> Array:
    """Indices of the k largest entries along the last axis, descending.

    Ties break toward the lowest index. Selection is a discrete decision
    and carries no gradient.
    """
    data = values.data if isinstance(values, Tensor) else np.asarray(values)
    if not 1 <= k <= data.shape[-1]:
        raise ShapeError(f"topk_indices: k={k} out of range for axis size {data.shape[-1]}")
    order = np.argsort(-data, axis=-1, kind="stable")
    return order[..., :k]
