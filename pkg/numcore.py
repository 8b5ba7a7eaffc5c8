"""Dense vector/matrix math with exact reverse-mode gradients.

The model family in this package is small and closed, so instead of a general
autodiff framework this module provides a tape over a fixed vocabulary of ops.
A `Var` wraps a numpy array and remembers how it was produced; calling
`backward` on a scalar `Var` walks the graph in reverse topological order and
accumulates adjoints into every node that needs one.

    >>> params = ParamTree.build({"w": [[1.0, 2.0]]})
    >>> grad(lambda p: (p["w"] * p["w"]).sum(), params)["w"]
    array([[2., 4.]])

"""
from typing import (
    Callable,
    Dict,
    FrozenSet,
    Iterable,
    Iterator,
    List,
    Mapping,
    Optional,
    Protocol,
    Sequence,
    Tuple,
    Union,
)

import attr
import numpy as np
import numpy.typing as npt

Array = npt.NDArray[np.float64]
ArrayLike = Union[Array, Sequence[float], Sequence[Sequence[float]], float]
Operand = Union["Var", Array, float]
Backward = Callable[[Array], Sequence[Optional[Array]]]


class NonFiniteError(ValueError):
    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by {op}")
        self.op = op


class DegenerateEmbedding(ValueError):
    def __init__(self) -> None:
        super().__init__("degenerate embedding")


def tensor2(data: ArrayLike) -> Array:
    """Validate and copy `data` into a finite, 2-dimensional float64 array."""
    array = np.array(data, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise ValueError(f"Expected a 2-dimensional block, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError("Block contains non-finite entries")
    return array


def _frozen(array: Array) -> Array:
    array.setflags(write=False)
    return array


@attr.s(auto_attribs=True, frozen=True, eq=False)
class ParamTree:
    """Ordered, named collection of real-valued parameter blocks.

    Blocks are read-only arrays; every operation that changes values returns a
    new tree, so snapshots can be shared without copying.
    """

    _blocks: Mapping[str, Array]
    _trainable: FrozenSet[str]

    @classmethod
    def build(
        cls,
        blocks: Mapping[str, ArrayLike],
        trainable: Optional[Iterable[str]] = None,
    ) -> "ParamTree":
        values = {name: _frozen(tensor2(value)) for name, value in blocks.items()}
        names = frozenset(values) if trainable is None else frozenset(trainable)
        unknown = names - set(values)
        if unknown:
            raise ValueError(f"Unknown trainable blocks {sorted(unknown)}")
        return cls(values, names)

    def __getitem__(self, name: str) -> Array:
        return self._blocks[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._blocks)

    def __len__(self) -> int:
        return len(self._blocks)

    def __contains__(self, name: object) -> bool:
        return name in self._blocks

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamTree):
            return False
        return (
            list(self._blocks) == list(other._blocks)
            and self._trainable == other._trainable
            and all(
                np.array_equal(self[name], other[name]) for name in self._blocks
            )
        )

    def items(self) -> Iterable[Tuple[str, Array]]:
        return self._blocks.items()

    @property
    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: value.shape for name, value in self._blocks.items()}

    @property
    def trainable(self) -> FrozenSet[str]:
        return self._trainable

    def is_trainable(self, name: str) -> bool:
        return name in self._trainable

    def with_trainable(self, names: Iterable[str]) -> "ParamTree":
        return ParamTree.build(self._blocks, trainable=names)

    def replace(self, blocks: Mapping[str, ArrayLike]) -> "ParamTree":
        new_blocks = dict(self._blocks)
        for name, value in blocks.items():
            if name not in self._blocks:
                raise ValueError(f"Cannot replace unknown block {name}")
            array = tensor2(value)
            if array.shape != self[name].shape:
                raise ValueError(
                    f"Block {name} has shape {self[name].shape}, got {array.shape}"
                )
            new_blocks[name] = _frozen(array)
        return ParamTree(new_blocks, self._trainable)

    def clone(self) -> "ParamTree":
        return ParamTree.build(
            {name: value.copy() for name, value in self._blocks.items()},
            trainable=self._trainable,
        )

    def congruent(self, other: "ParamTree") -> bool:
        return self.shapes == other.shapes

    def check_congruent(self, other: "ParamTree") -> None:
        if not self.congruent(other):
            raise ValueError(f"Shape mismatch: {self.shapes} vs {other.shapes}")

    def combine(
        self,
        other: "ParamTree",
        alpha: float,
        beta: float,
        names: Optional[Iterable[str]] = None,
    ) -> "ParamTree":
        """Return alpha*self + beta*other over `names` (default: every block)."""
        self.check_congruent(other)
        selected = set(self._blocks) if names is None else set(names)
        return self.replace(
            {name: alpha * self[name] + beta * other[name] for name in selected}
        )

    def flatten_trainable(self) -> Array:
        parts = [self[name].ravel() for name in self._blocks if name in self._trainable]
        return np.concatenate(parts) if parts else np.zeros(0)


@attr.s(auto_attribs=True, frozen=True, eq=False)
class GradTree:
    _grads: Mapping[str, Array]

    @classmethod
    def zeros_like(cls, params: ParamTree) -> "GradTree":
        return cls({name: np.zeros_like(value) for name, value in params.items()})

    def __getitem__(self, name: str) -> Array:
        return self._grads[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._grads)

    def items(self) -> Iterable[Tuple[str, Array]]:
        return self._grads.items()

    @property
    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: value.shape for name, value in self._grads.items()}

    def flatten(self, names: Optional[Iterable[str]] = None) -> Array:
        selected = list(self._grads) if names is None else list(names)
        parts = [self._grads[name].ravel() for name in selected]
        return np.concatenate(parts) if parts else np.zeros(0)


def _unbroadcast(gradient: Array, shape: Tuple[int, ...]) -> Array:
    while gradient.ndim > len(shape):
        gradient = gradient.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and gradient.shape[axis] != 1:
            gradient = gradient.sum(axis=axis, keepdims=True)
    return gradient


class Var:
    """A node in the differentiation tape."""

    __slots__ = ("value", "grad", "op", "needs_grad", "_parents", "_backward")

    # Make numpy hand mixed expressions (array * Var) back to Var.
    __array_ufunc__ = None

    def __init__(
        self,
        value: ArrayLike,
        *,
        needs_grad: bool = False,
        op: str = "const",
        parents: Tuple["Var", ...] = (),
        backward: Optional[Backward] = None,
    ):
        self.value: Array = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(self.value)):
            raise NonFiniteError(op)
        self.grad: Optional[Array] = None
        self.op = op
        self.needs_grad = needs_grad or any(p.needs_grad for p in parents)
        self._parents = parents
        self._backward = backward

    def __repr__(self) -> str:
        return f"Var({self.op}, shape={self.value.shape})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    @staticmethod
    def _derive(
        value: Array, op: str, parents: Tuple["Var", ...], backward: Backward
    ) -> "Var":
        return Var(value, op=op, parents=parents, backward=backward)

    def backward(self) -> None:
        if self.value.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.value.shape}")

        order: List[Var] = []
        visited = set()
        stack: List[Tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or not node.needs_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))

        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node.grad)):
                if parent_grad is None or not parent.needs_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(parent_grad, dtype=np.float64)
                else:
                    parent.grad = parent.grad + parent_grad

    # Arithmetic

    def __add__(self, other: Operand) -> "Var":
        other = lift(other)
        a_shape, b_shape = self.shape, other.shape
        return self._derive(
            self.value + other.value,
            "add",
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    def __radd__(self, other: Operand) -> "Var":
        return lift(other) + self

    def __sub__(self, other: Operand) -> "Var":
        other = lift(other)
        a_shape, b_shape = self.shape, other.shape
        return self._derive(
            self.value - other.value,
            "sub",
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other: Operand) -> "Var":
        return lift(other) - self

    def __neg__(self) -> "Var":
        return self._derive(-self.value, "neg", (self,), lambda g: (-g,))

    def __mul__(self, other: Operand) -> "Var":
        other = lift(other)
        a, b = self.value, other.value
        return self._derive(
            a * b,
            "mul",
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    def __rmul__(self, other: Operand) -> "Var":
        return lift(other) * self

    def __truediv__(self, other: Operand) -> "Var":
        other = lift(other)
        a, b = self.value, other.value
        return self._derive(
            a / b,
            "div",
            (self, other),
            lambda g: (
                _unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape),
            ),
        )

    def __matmul__(self, other: Operand) -> "Var":
        other = lift(other)
        a, b = self.value, other.value

        def backward(g: Array) -> Tuple[Array, Array]:
            if a.ndim == 1 and b.ndim == 2:
                return b @ g, np.outer(a, g)
            if a.ndim == 2 and b.ndim == 1:
                return np.outer(g, b), a.T @ g
            if a.ndim == 2 and b.ndim == 2:
                return g @ b.T, a.T @ g
            raise ValueError(f"Unsupported matmul shapes {a.shape} @ {b.shape}")

        return self._derive(a @ b, "matmul", (self, other), backward)

    def __rmatmul__(self, other: Operand) -> "Var":
        return lift(other) @ self

    def __getitem__(self, index: object) -> "Var":
        shape = self.shape

        def backward(g: Array) -> Tuple[Array]:
            full = np.zeros(shape)
            np.add.at(full, index, g)  # type: ignore[arg-type]
            return (full,)

        value = self.value[index]  # type: ignore[index]
        return self._derive(value, "index", (self,), backward)

    def transpose(self) -> "Var":
        return self._derive(self.value.T, "transpose", (self,), lambda g: (g.T,))

    # Reductions

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Var":
        shape = self.shape

        def backward(g: Array) -> Tuple[Array]:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._derive(
            self.value.sum(axis=axis, keepdims=keepdims), "sum", (self,), backward
        )

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Var":
        count = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def logsumexp(self, axis: int = -1) -> "Var":
        x = self.value
        peak = x.max(axis=axis, keepdims=True)
        shifted = np.exp(x - peak)
        total = shifted.sum(axis=axis, keepdims=True)
        out = (peak + np.log(total)).squeeze(axis)

        def backward(g: Array) -> Tuple[Array]:
            return (np.expand_dims(g, axis) * shifted / total,)

        return self._derive(out, "logsumexp", (self,), backward)

    # Elementwise and row-wise maps

    def tanh(self) -> "Var":
        out = np.tanh(self.value)
        return self._derive(out, "tanh", (self,), lambda g: (g * (1.0 - out * out),))

    def exp(self) -> "Var":
        out = np.exp(self.value)
        return self._derive(out, "exp", (self,), lambda g: (g * out,))

    def log_softmax(self) -> "Var":
        out = log_softmax(self.value)
        probs = np.exp(out)

        def backward(g: Array) -> Tuple[Array]:
            return (g - probs * g.sum(axis=-1, keepdims=True),)

        return self._derive(out, "log_softmax", (self,), backward)

    def softmax(self) -> "Var":
        return self.log_softmax().exp()

    def normalize(self) -> "Var":
        """Scale the last axis to unit length."""
        norms = np.linalg.norm(self.value, axis=-1, keepdims=True)
        if np.any(norms == 0.0):
            raise DegenerateEmbedding()
        out = self.value / norms

        def backward(g: Array) -> Tuple[Array]:
            return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms,)

        return self._derive(out, "normalize", (self,), backward)


def lift(value: Operand) -> Var:
    return value if isinstance(value, Var) else Var(value)


def stack(items: Sequence[Var]) -> Var:
    if not items:
        raise ValueError("Cannot stack an empty sequence")
    values = np.stack([item.value for item in items])

    def backward(g: Array) -> List[Array]:
        return [g[i] for i in range(len(items))]

    return Var(values, op="stack", parents=tuple(items), backward=backward)


class LossFunction(Protocol):
    def __call__(self, params: Mapping[str, Var]) -> Operand:
        ...


def leaves(params: ParamTree, differentiable: bool = True) -> Dict[str, Var]:
    return {
        name: Var(
            value, needs_grad=differentiable and params.is_trainable(name), op=name
        )
        for name, value in params.items()
    }


def evaluate(loss_fn: LossFunction, params: ParamTree) -> float:
    return float(lift(loss_fn(leaves(params, differentiable=False))).value)


def value_and_grad(loss_fn: LossFunction, params: ParamTree) -> Tuple[float, GradTree]:
    """Evaluate `loss_fn` and its exact gradient for the trainable blocks."""
    inputs = leaves(params)
    loss = lift(loss_fn(inputs))
    if loss.value.size != 1:
        raise ValueError(f"Loss must be a scalar, got shape {loss.shape}")

    if loss.needs_grad:
        loss.backward()

    grads = {}
    for name, value in params.items():
        leaf_grad = inputs[name].grad
        if params.is_trainable(name) and leaf_grad is not None:
            grads[name] = leaf_grad.reshape(value.shape)
        else:
            grads[name] = np.zeros_like(value)
    return float(loss.value), GradTree(grads)


def grad(loss_fn: LossFunction, params: ParamTree) -> GradTree:
    return value_and_grad(loss_fn, params)[1]


def finite_diff(loss_fn: LossFunction, params: ParamTree, h: float = 1e-4) -> GradTree:
    """Central-difference estimate of the gradient, one scalar at a time."""
    if h <= 0:
        raise ValueError(f"Step size must be positive, got {h}")

    grads = {}
    for name, value in params.items():
        estimate = np.zeros_like(value)
        if params.is_trainable(name):
            for index in np.ndindex(value.shape):
                plus, minus = value.copy(), value.copy()
                plus[index] += h
                minus[index] -= h
                upper = evaluate(loss_fn, params.replace({name: plus}))
                lower = evaluate(loss_fn, params.replace({name: minus}))
                estimate[index] = (upper - lower) / (2 * h)
        grads[name] = estimate
    return GradTree(grads)


def relative_error(a: Array, b: Array) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-8)
    return float(np.linalg.norm(a - b)) / scale


# Plain (non-differentiable) operations


def log_softmax(logits: ArrayLike) -> Array:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty logits")
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: ArrayLike) -> Array:
    """Probabilities over the last axis, computed with max-subtraction."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty logits")
    if not np.all(np.isfinite(x)):
        raise ValueError("Logits must be finite")
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def entropy(p: ArrayLike) -> Array:
    """Entropy in nats over the last axis, with 0·ln 0 taken as 0."""
    probs = np.asarray(p, dtype=np.float64)
    if np.any(probs < 0):
        raise ValueError("Probabilities must be non-negative")
    if np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("Probabilities must sum to 1")
    safe = np.where(probs > 0, probs, 1.0)
    return -(probs * np.log(safe)).sum(axis=-1)


def l2_normalize(v: ArrayLike) -> Array:
    x = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateEmbedding()
    return x / norms


def cosine(u: ArrayLike, v: ArrayLike) -> float:
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Length mismatch: {a.shape} vs {b.shape}")
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateEmbedding()
    return float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0))
