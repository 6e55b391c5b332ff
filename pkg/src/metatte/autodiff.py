"""Dense float64 tensors with a tape for reverse-mode differentiation.

Every primitive computes its forward value eagerly with numpy and, when a
:class:`Tape` is active and some input requires a gradient, records a closure
mapping the output adjoint to the input adjoints.  ``Tape.backward`` replays
those closures once each, newest first.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConsistencyError, DimensionError, NumericError


_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, index):
        return take_slice(self, index)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Records primitive applications for one forward pass.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Backward) -> None:
        self.nodes.append((out, parents, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            for parent, g in zip(parents, fn(out.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise DimensionError(
                        f"adjoint shape {g.shape} does not match input shape {parent.shape}"
                    )
                parent.grad = g if parent.grad is None else parent.grad + g

    def gradients(self, loss: Tensor, leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
        """Run backward and collect leaf adjoints; unused leaves get exact zeros."""
        for leaf in leaves.values():
            leaf.grad = None
        self.backward(loss)
        return {
            name: leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            for name, leaf in leaves.items()
        }


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], backward: Backward, op: str) -> Tensor:
    _check_finite(data, op)
    needs_grad = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad and _ACTIVE:
        _ACTIVE[-1].record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def abs_(a: Tensor) -> Tensor:
    return _emit(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    return _emit(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# reductions and linear algebra


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "reduce_sum")


def reduce_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _emit(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward, "reduce_mean")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., K] @ b[K, N]``; leading axes of ``a`` are flattened for the product."""
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, a.shape[-1])
    out = (a2 @ b.data).reshape(*lead, b.shape[1])

    def backward(g):
        g2 = g.reshape(-1, b.shape[1])
        return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

    return _emit(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# structural


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [t.data for t in tensors]
    try:
        out = np.concatenate(parts, axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}"
        ) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes {[t.shape for t in tensors]} differ")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit(out, tuple(tensors), backward, "stack")


def take_slice(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit(np.array(out), (a,), backward, "slice")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def embed(table: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup ``table[index]``; equivalent to one-hot(index) @ table."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"min {index.min()}, max {index.max()}"
        )

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit(table.data[index], (table,), backward, "embed")


# ---------------------------------------------------------------------------
# parameters, initialization, optimizer


def xavier_init(shape: Sequence[int], seed) -> np.ndarray:
    """Glorot-uniform values; fan-in is the first extent and fan-out the last.

    A 1-d shape is treated as a single row, so fan-in is 1.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise DimensionError(f"xavier_init needs positive extents, got {shape}")
    fan_in = shape[0] if len(shape) > 1 else 1
    fan_out = shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.uniform(-limit, limit, size=shape)


class ParameterStore:
    """Named trainable arrays plus Adam moment estimates."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ConsistencyError(f"duplicate parameter name {name!r}")
        self.params[name] = np.asarray(value, dtype=np.float64).copy()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def num_values(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def leaves(self) -> dict[str, Tensor]:
        return {name: Tensor(value, requires_grad=True) for name, value in self.params.items()}

    def reset_optimizer(self) -> None:
        self.m.clear()
        self.v.clear()
        self.step = 0


def adam_step(
    store: ParameterStore,
    grads: dict[str, np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    missing = [name for name in store.params if name not in grads]
    if missing:
        raise ConsistencyError(f"no gradient for parameters {missing}")
    store.step += 1
    bc1 = 1.0 - beta1**store.step
    bc2 = 1.0 - beta2**store.step
    for name, value in store.params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ConsistencyError(f"gradient for {name!r} has shape {g.shape}, expected {value.shape}")
        _check_finite(g, f"gradient of {name}")
        if name not in store.m:
            store.m[name] = np.zeros_like(value)
            store.v[name] = np.zeros_like(value)
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        store.params[name] = value - (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


def clone_params(store: ParameterStore) -> dict[str, np.ndarray]:
    """Value snapshot of the parameters; optimizer moments are not included."""
    return {name: value.copy() for name, value in store.params.items()}


def load_params(store: ParameterStore, snapshot: dict[str, np.ndarray]) -> None:
    if list(snapshot) != list(store.params):
        raise ConsistencyError("snapshot parameter names differ from the store")
    for name, value in snapshot.items():
        if value.shape != store.params[name].shape:
            raise ConsistencyError(
                f"snapshot shape {value.shape} for {name!r} differs from {store.params[name].shape}"
            )
    for name, value in snapshot.items():
        store.params[name] = value.copy()


def snapshot_nbytes(snapshot: dict[str, np.ndarray]) -> int:
    return int(sum(v.nbytes for v in snapshot.values()))
