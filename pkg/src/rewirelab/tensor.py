"""Dense float64 reverse-mode automatic differentiation.

Operations on `Tensor` values are recorded on the active `Tape` whenever
one of their inputs requires a gradient. `Tape.backward` replays the
recorded operations in reverse and accumulates gradients into the leaf
tensors.

    >>> x = Tensor([1.0, -2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = scale(reduce_sum(multiply(x, x)), 0.5)
    >>> tape.backward(loss)
    >>> x.grad
    array([ 1., -2.])
"""

import math
from contextvars import ContextVar, Token
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardRule = Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar(
    "active_tape", default=None
)


class Tensor:
    """A dense array of 64-bit floats with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(
                f"item: tensor of shape {self.shape} is not a scalar"
            )
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return (
            f"Tensor(shape={self.shape}, "
            f"requires_grad={self.requires_grad}{label})"
        )

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return multiply(self, other)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __getitem__(self, key: object) -> "Tensor":
        return take(self, key)


@dataclass
class Operation:
    """One recorded operation: inputs, output and its backward rule."""

    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


class Tape:
    """Ordered record of operations, used as a context manager.

    The same tape can be entered several times; operations keep being
    appended in execution order, so inputs always precede their consumers.
    """

    def __init__(self) -> None:
        self.operations: list[Operation] = []
        self._tokens: list[Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc_info: object) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.operations)

    def record(self, operation: Operation) -> None:
        self.operations.append(operation)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf that requires grad.

        Leaves are tensors that take part in the recorded operations
        without being produced by one of them. Gradients accumulate across
        calls until the leaves are zeroed.

        Args:
            loss (Tensor): A scalar tensor produced on this tape.

        Raises:
            ValueError: If the loss is not a scalar or the tape is empty.
        """
        if loss.size != 1:
            raise ValueError(
                f"backward: loss must be a scalar, got shape {loss.shape}"
            )
        if not self.operations:
            raise ValueError("backward: tape is empty")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(op.output) for op in self.operations}
        leaves: dict[int, Tensor] = {}

        for op in reversed(self.operations):
            out_grad = grads.pop(id(op.output), None)
            if out_grad is None:
                continue  # Not an ancestor of the loss

            for tensor, grad in zip(op.inputs, op.backward(out_grad)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key not in produced:
                    leaves[key] = tensor
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

        for key, tensor in leaves.items():
            grad = grads[key].reshape(tensor.shape)
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap a constant in a tensor, leaving tensors untouched."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    name: str,
    data: np.ndarray,
    inputs: tuple[Tensor, ...],
    backward: BackwardRule,
) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad)

    tape = _ACTIVE_TAPE.get()
    if requires_grad and tape is not None:
        tape.record(Operation(name, inputs, out, backward))

    return out


def _shape_error(op: str, a: Tensor, b: Tensor) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    """Allow equal shapes, or a row/column vector against a matrix."""
    if a.shape == b.shape:
        return
    if a.data.ndim == 2 and b.data.ndim == 2:
        (ra, ca), (rb, cb) = a.shape, b.shape
        row = (ra == 1 and ca == cb) or (rb == 1 and ca == cb)
        col = (ca == 1 and ra == rb) or (cb == 1 and ra == rb)
        if row or col:
            return
    raise _shape_error(op, a, b)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(
        i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 != g
    )
    return grad.sum(axis=axes, keepdims=True)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", a.data @ b.data, (a, b), backward)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), backward)


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("multiply", a, b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _result("multiply", a.data * b.data, (a, b), backward)


def scale(x: ArrayLike, factor: float) -> Tensor:
    x = as_tensor(x)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * factor,)

    return _result("scale", x.data * factor, (x,), backward)


def power(x: ArrayLike, exponent: float) -> Tensor:
    x = as_tensor(x)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * exponent * x.data ** (exponent - 1.0),)

    return _result("power", x.data**exponent, (x,), backward)


def row_softmax(x: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over each row, optionally restricted to `mask`.

    Entries outside the mask are exactly zero, and rows without any
    masked entry are all zeros.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"row_softmax: expected a matrix, got {x.shape}")
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    elif mask.shape != x.shape:
        raise ValueError(
            f"row_softmax: mask shape {mask.shape} does not match {x.shape}"
        )

    masked = np.where(mask, x.data, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    row_max[~np.isfinite(row_max)] = 0.0
    exp = np.where(mask, np.exp(np.where(mask, x.data, 0.0) - row_max), 0.0)
    total = exp.sum(axis=1, keepdims=True)
    out = np.divide(exp, total, out=np.zeros_like(exp), where=total > 0)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _result("row_softmax", out, (x,), backward)


def row_normalize(x: ArrayLike) -> Tensor:
    """Divide each row by its sum; all-zero rows stay zero."""
    x = as_tensor(x)
    degree = reduce_sum(x, axis=1, keepdims=True)
    safe = add(degree, Tensor((degree.data == 0).astype(np.float64)))
    return multiply(x, power(safe, -1.0))


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * (x.data > 0),)

    return _result("relu", np.maximum(x.data, 0.0), (x,), backward)


def gelu(x: ArrayLike) -> Tensor:
    """Exact GELU, x·Φ(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return _result("gelu", x.data * cdf, (x,), backward)


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * out * (1.0 - out),)

    return _result("sigmoid", out, (x,), backward)


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    if sorted(axes) != list(range(x.data.ndim)):
        raise ValueError(f"transpose: invalid axes {axes} for {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _result("transpose", out, (x,), backward)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ValueError(
            f"reshape: cannot reshape {x.shape} into {tuple(shape)}"
        ) from e

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(x.shape),)

    return _result("reshape", out, (x,), backward)


def concatenate(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ValueError("concatenate: no tensors given")
    try:
        out = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as e:
        shapes = ", ".join(str(t.shape) for t in parts)
        raise ValueError(f"concatenate: incompatible shapes {shapes}") from e
    bounds = np.cumsum([t.shape[axis] for t in parts])[:-1]

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concatenate", out, parts, backward)


def take(x: ArrayLike, key: object) -> Tensor:
    """Basic indexing (integers and slices)."""
    x = as_tensor(x)
    out = x.data[key]

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _result("take", np.array(out), (x,), backward)


def reduce_sum(
    x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False
) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("reduce_sum", np.array(out), (x,), backward)


def reduce_mean(
    x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False
) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def absolute(x: ArrayLike) -> Tensor:
    x = as_tensor(x)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * np.sign(x.data),)

    return _result("absolute", np.abs(x.data), (x,), backward)


def squared_error(pred: ArrayLike, target: ArrayLike) -> Tensor:
    """Elementwise (pred - target)²."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise _shape_error("squared_error", pred, target)
    diff = pred.data - target.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return 2.0 * g * diff, -2.0 * g * diff

    return _result("squared_error", diff**2, (pred, target), backward)


def cross_entropy_with_logits(
    logits: ArrayLike,
    labels: np.ndarray,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean softmax cross-entropy over the rows selected by `mask`."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(
            "cross_entropy_with_logits: incompatible shapes "
            f"{logits.shape} and {labels.shape}"
        )
    if mask is None:
        mask = np.ones(labels.shape, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy_with_logits: empty mask")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.flatnonzero(mask)
    value = -log_probs[rows, labels[rows]].sum() / count

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.exp(log_probs)
        grad[np.arange(len(labels)), labels] -= 1.0
        grad[~mask] = 0.0
        return (grad * (float(g) / count),)

    return _result(
        "cross_entropy_with_logits", np.array(value), (logits,), backward
    )


def dropout(
    x: ArrayLike, rate: float, seed: int, training: bool = True
) -> Tensor:
    """Inverted dropout with an explicit per-call seed."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x

    keep = np.random.default_rng(seed).random(x.shape) >= rate
    factor = keep / (1.0 - rate)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * factor,)

    return _result("dropout", x.data * factor, (x,), backward)


def conv1d(x: ArrayLike, weight: ArrayLike, dilation: int = 1) -> Tensor:
    """Valid dilated temporal convolution.

    Args:
        x (ArrayLike): Input of shape (rows, time, in_channels).
        weight (ArrayLike): Kernel of shape (kernel, in_channels,
            out_channels).
        dilation (int): Spacing between kernel taps.

    Returns:
        Tensor: Output of shape (rows, time - (kernel - 1) * dilation,
            out_channels).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if (
        x.data.ndim != 3
        or weight.data.ndim != 3
        or x.shape[2] != weight.shape[1]
    ):
        raise _shape_error("conv1d", x, weight)
    kernel = weight.shape[0]
    steps = x.shape[1] - (kernel - 1) * dilation
    if steps < 1:
        raise ValueError(
            f"conv1d: input length {x.shape[1]} is shorter than the "
            f"receptive field {(kernel - 1) * dilation + 1}"
        )

    out = np.zeros((x.shape[0], steps, weight.shape[2]))
    for j in range(kernel):
        window = x.data[:, j * dilation : j * dilation + steps, :]
        out += np.einsum("rtc,co->rto", window, weight.data[j])

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_x = np.zeros_like(x.data)
        grad_w = np.zeros_like(weight.data)
        for j in range(kernel):
            start = j * dilation
            window = x.data[:, start : start + steps, :]
            grad_x[:, start : start + steps, :] += np.einsum(
                "rto,co->rtc", g, weight.data[j]
            )
            grad_w[j] = np.einsum("rtc,rto->co", window, g)
        return grad_x, grad_w

    return _result("conv1d", out, (x, weight), backward)


def detach(x: ArrayLike) -> Tensor:
    """A constant copy of `x` that no gradient flows through."""
    return Tensor(as_tensor(x).data)


def numerical_gradient(
    fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5
) -> np.ndarray:
    """Central finite-difference gradient of a scalar function.

    `fn` is re-evaluated after perturbing `tensor.data` in place, so it must
    read the tensor it closes over rather than a copy.
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = fn().item()
        flat[i] = original - step
        lower = fn().item()
        flat[i] = original
        grad.reshape(-1)[i] = (upper - lower) / (2.0 * step)
    return grad


def jacobian_rows(
    model: Callable[[Tensor], Tensor],
    inputs: np.ndarray,
    target_node: int,
    output_step: Optional[int] = None,
) -> np.ndarray:
    """Norms ‖∂ŷ_target / ∂x_u‖₂ for every source node u.

    The model maps a nodes-first input matrix (n, in_features) to a
    nodes-first output (n, out_features). For each selected output
    component one backward pass gives the derivative with respect to the
    whole input, so a single call covers all sources of one target.

    Args:
        model (Callable[[Tensor], Tensor]): The trained model.
        inputs (np.ndarray): Input matrix the Jacobian is evaluated at.
        target_node (int): Output node.
        output_step (Optional[int]): Output column to differentiate. All
            columns when None, in which case the norm is the spectral norm
            of each (out_features × in_features) block.

    Returns:
        np.ndarray: One non-negative norm per source node.

    Raises:
        ValueError: If an index is out of range.
    """
    x = Tensor(inputs, requires_grad=True)
    if x.data.ndim != 2:
        raise ValueError(f"jacobian: inputs must be (n, f), got {x.shape}")

    tape = Tape()
    with tape:
        out = model(x)

    n = x.shape[0]
    if out.data.ndim != 2 or out.shape[0] != n:
        raise ValueError(
            f"jacobian: output shape {out.shape} is not nodes-first for "
            f"{n} nodes"
        )
    if not 0 <= target_node < n:
        raise ValueError(
            f"jacobian: target node {target_node} not in [0, {n})"
        )
    if output_step is not None and not 0 <= output_step < out.shape[1]:
        raise ValueError(
            f"jacobian: output step {output_step} not in [0, {out.shape[1]})"
        )

    steps = range(out.shape[1]) if output_step is None else [output_step]
    blocks = np.zeros((n, len(steps), x.shape[1]))
    for k, step in enumerate(steps):
        selector = np.zeros(out.shape)
        selector[target_node, step] = 1.0
        with tape:
            picked = reduce_sum(multiply(out, selector))
        if not out.requires_grad:
            continue  # Output does not depend on the input at all
        x.zero_grad()
        tape.backward(picked)
        if x.grad is not None:
            blocks[:, k, :] = x.grad

    return np.linalg.norm(blocks, ord=2, axis=(1, 2))


def jacobian_norm(
    model: Callable[[Tensor], Tensor],
    inputs: np.ndarray,
    source_node: int,
    target_node: int,
    output_step: Optional[int] = None,
) -> float:
    """‖∂ŷ_target / ∂x_source‖₂ for a single node pair.

    Raises:
        ValueError: If an index is out of range.
    """
    n = np.asarray(inputs).shape[0]
    if not 0 <= source_node < n:
        raise ValueError(
            f"jacobian: source node {source_node} not in [0, {n})"
        )
    norms = jacobian_rows(model, inputs, target_node, output_step)
    return float(norms[source_node])
