"""
Dense tensors with reverse-mode automatic differentiation.

Operations on TensorNode values are recorded on the active GradTape (when one
is open and some input requires a gradient). GradTape.backward sweeps the
recorded operations once, newest first, and accumulates gradients into every
node that requires one.

Usage:
    with GradTape() as tape:
        loss = mean(mul(x, x))
    tape.backward(loss)
    x.grad
"""
import contextlib
import logging
import threading
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from natlab.errors import ShapeError
from natlab.models.metrics import GradCheckFailure, GradCheckReport

logger = logging.getLogger(__name__)

_local = threading.local()
_default_dtype = np.dtype("float32")

ArrayLike = Union["TensorNode", np.ndarray, float, int]


# ---------------------------------------------------------------------------
# Precision
# ---------------------------------------------------------------------------

def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(name: str) -> None:
    """Set the floating point type used for new tensors (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(name)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"Unsupported precision '{name}'. Use float32 or float64.")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default dtype."""
    previous = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(previous.name)


# ---------------------------------------------------------------------------
# Nodes and tape
# ---------------------------------------------------------------------------

class TensorNode:
    """A dense array that may take part in gradient computation."""

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: Tuple["TensorNode", ...] = ()
        self.backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ShapeError("accumulate", self.value.shape, g.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"TensorNode(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "TensorNode":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "TensorNode":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "TensorNode":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "TensorNode":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "TensorNode":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "TensorNode":
        return mul(other, self)

    def __neg__(self) -> "TensorNode":
        return neg(self)

    def __matmul__(self, other: "TensorNode") -> "TensorNode":
        return matmul(self, other)


class GradTape:
    """Ordered record of executed operations; supports one reverse sweep."""

    def __init__(self):
        self.records: List[TensorNode] = []
        self._swept = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, node: TensorNode) -> None:
        self.records.append(node)

    def backward(self, loss: TensorNode) -> None:
        """
        Propagate d(loss)/d(node) to every recorded node.

        Args:
            loss: Scalar node produced while this tape was recording

        Raises:
            ShapeError: If loss is not a scalar
            RuntimeError: If the tape was already swept
        """
        if loss.value.size != 1:
            raise ShapeError("backward", loss.shape, ())
        if self._swept:
            raise RuntimeError("GradTape.backward called twice; record a new tape per step")
        self._swept = True
        if not loss.requires_grad:
            return

        loss.accumulate(np.ones_like(loss.value))
        for node in reversed(self.records):
            if node.grad is None:
                continue
            contributions = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, contributions):
                if g is not None and parent.requires_grad:
                    parent.accumulate(g)
            # Interior gradients are no longer needed once propagated
            if node.backward_fn is not None and node is not loss:
                node.grad = None


def _tape_stack() -> List[GradTape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_node(x: ArrayLike) -> TensorNode:
    """Wrap constants; pass nodes through."""
    if isinstance(x, TensorNode):
        return x
    if isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.floating):
        return TensorNode(x)
    return TensorNode(np.asarray(x, dtype=_default_dtype))


def constant(x, dtype: Optional[np.dtype] = None) -> TensorNode:
    return TensorNode(np.asarray(x, dtype=dtype or _default_dtype))


def _make(value: np.ndarray, parents: Tuple[TensorNode, ...], backward_fn) -> TensorNode:
    tape = current_tape()
    node = TensorNode(value)
    if tape is not None and any(p.requires_grad for p in parents):
        node.requires_grad = True
        node.parents = parents
        node.backward_fn = backward_fn
        tape.record(node)
    return node


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: TensorNode, b: TensorNode) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# Element-wise
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> TensorNode:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("add", a, b)
    return _make(
        a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> TensorNode:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("sub", a, b)
    return _make(
        a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> TensorNode:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("mul", a, b)
    return _make(
        a.value * b.value, (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def scale(x: TensorNode, factor: float) -> TensorNode:
    """Multiply by a Python scalar without wrapping it in a node."""
    factor = x.value.dtype.type(factor)
    return _make(x.value * factor, (x,), lambda g: (g * factor,))


def neg(x: TensorNode) -> TensorNode:
    return _make(-x.value, (x,), lambda g: (-g,))


def exp(x: TensorNode) -> TensorNode:
    out = np.exp(x.value)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: TensorNode) -> TensorNode:
    return _make(np.log(x.value), (x,), lambda g: (g / x.value,))


def relu(x: TensorNode) -> TensorNode:
    positive = x.value > 0
    signs = getattr(_local, "relu_signs", None)
    if signs is not None:
        signs.append(positive)
    return _make(np.where(positive, x.value, 0).astype(x.dtype), (x,), lambda g: (g * positive,))


@contextlib.contextmanager
def record_relu_signs() -> Iterator[List[np.ndarray]]:
    """Collect the input sign mask of every relu evaluated inside the block, in call order."""
    previous = getattr(_local, "relu_signs", None)
    signs: List[np.ndarray] = []
    _local.relu_signs = signs
    try:
        yield signs
    finally:
        _local.relu_signs = previous


def _same_signs(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def stop_gradient(x: TensorNode) -> TensorNode:
    """Same value, never part of any gradient path."""
    return TensorNode(x.value)


def dropout(x: TensorNode, p: float, rng: Optional[np.random.Generator]) -> TensorNode:
    """
    Inverted dropout. Identity when p == 0 or rng is None.

    The keep mask is drawn from rng, so replaying rng replays the output.
    """
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _make(x.value * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Shape
# ---------------------------------------------------------------------------

def reshape(x: TensorNode, shape: Sequence[int]) -> TensorNode:
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: TensorNode, axes: Optional[Sequence[int]] = None) -> TensorNode:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inverse),))


# ---------------------------------------------------------------------------
# Linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a: TensorNode, b: TensorNode) -> TensorNode:
    """
    Batched matrix product with numpy broadcasting over leading axes.

    A 2-D right operand (a weight matrix) takes a flattened fast path.
    """
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    if b.ndim == 2:
        k, n = b.shape
        flat = a.value.reshape(-1, k)
        out = (flat @ b.value).reshape(a.shape[:-1] + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.value.T).reshape(a.shape), flat.T @ g2

        return _make(out, (a, b), backward)

    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: TensorNode, axis=None, keepdims: bool = False) -> TensorNode:  # noqa: A001
    axes = _normalize_axes(axis, x.ndim)
    out = np.sum(x.value, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def mean(x: TensorNode, axis=None, keepdims: bool = False) -> TensorNode:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def log_softmax(x: TensorNode, axis: int = -1) -> TensorNode:
    """Log of softmax along axis, computed after subtracting the row max."""
    shifted = x.value - np.max(x.value, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def softmax(x: TensorNode, axis: int = -1) -> TensorNode:
    shifted = np.exp(x.value - np.max(x.value, axis=axis, keepdims=True))
    out = shifted / np.sum(shifted, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x: TensorNode, gain: TensorNode, bias: TensorNode, eps: float = 1e-5) -> TensorNode:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.value + bias.value
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gain.value
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out.astype(x.dtype, copy=False), (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# Indexing
# ---------------------------------------------------------------------------

def embed_lookup(table: TensorNode, ids: np.ndarray) -> TensorNode:
    """Rows of table at integer ids; repeated ids accumulate gradient."""
    ids = np.asarray(ids)
    if table.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embed_lookup", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embed_lookup", table.shape, (int(ids.max()) + 1,))
    out = table.value[ids]

    def backward(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, (table,), backward)


def gather_rows(x: TensorNode, rows: np.ndarray) -> TensorNode:
    """x[rows] along the first axis."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= x.shape[0]):
        raise ShapeError("gather_rows", x.shape, rows.shape)
    out = x.value[rows]

    def backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, rows, g)
        return (gx,)

    return _make(out, (x,), backward)


def take_along(x: TensorNode, indices: np.ndarray) -> TensorNode:
    """np.take_along_axis on the last axis."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != x.ndim or indices.shape[:-1] != x.shape[:-1]:
        raise ShapeError("take_along", x.shape, indices.shape)
    out = np.take_along_axis(x.value, indices, axis=-1)

    def backward(g):
        gx = np.zeros_like(x.value)
        grid = list(np.indices(indices.shape, sparse=True))
        grid[-1] = indices
        np.add.at(gx, tuple(grid), g)
        return (gx,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[], TensorNode],
    params: Union[Mapping[str, TensorNode], Sequence[TensorNode]],
    epsilon: float = 1e-5,
    tolerance: float = 1e-5,
    max_coords: Optional[int] = None,
    floor: float = 1e-3,
    seed: int = 0,
    kink_retries: int = 2,
) -> GradCheckReport:
    """
    Compare backward() gradients with central finite differences.

    The step for a coordinate is epsilon * max(1, |x|). Relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, floor).

    A coordinate whose +h or -h evaluation flips the sign of any relu input
    is retried with h / 10 up to kink_retries times and skipped (counted in
    GradCheckReport.skipped) if every step still crosses a kink.

    Args:
        f: Zero-argument callable returning a scalar node; must be deterministic
        params: Leaf nodes (requires_grad=True) to check, by name or in order
        epsilon: Base finite-difference step
        tolerance: Coordinates with a larger relative error are reported as failures
        max_coords: Check at most this many coordinates per parameter (sampled)
        floor: Lower bound on the relative-error denominator
        seed: Seed for coordinate sampling
        kink_retries: Smaller steps to try before skipping a coordinate on a relu kink

    Returns:
        GradCheckReport with the maximum relative error and every failing coordinate
    """
    named: Dict[str, TensorNode] = (
        dict(params) if isinstance(params, Mapping) else {f"param{i}": p for i, p in enumerate(params)}
    )
    for node in named.values():
        node.zero_grad()

    with GradTape() as tape, record_relu_signs() as base_signs:
        loss = f()
    tape.backward(loss)
    analytic = {
        name: (node.grad.copy() if node.grad is not None else np.zeros_like(node.value))
        for name, node in named.items()
    }

    rng = np.random.default_rng(seed)
    failures: List[GradCheckFailure] = []
    max_rel = 0.0
    checked = 0
    skipped = 0

    for name, node in named.items():
        flat = node.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))

        for idx in coords:
            original = flat[idx].copy()
            h = epsilon * max(1.0, abs(float(original)))
            numeric = None
            for _ in range(kink_retries + 1):
                numeric = _central_difference(f, flat, idx, original, h, base_signs)
                if numeric is not None:
                    break
                h /= 10.0
            if numeric is None:
                logger.debug("grad_check: %s[%d] sits on a relu kink, skipped", name, idx)
                skipped += 1
                continue

            exact = float(analytic[name].reshape(-1)[idx])
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            max_rel = max(max_rel, rel)
            checked += 1
            if not rel <= tolerance:
                failures.append(GradCheckFailure(
                    name=name, index=int(idx), analytic=exact, numeric=numeric, rel_error=rel,
                ))

    if failures:
        logger.warning("grad_check: %d of %d coordinates exceed tolerance %g", len(failures), checked, tolerance)
    return GradCheckReport(
        max_rel_error=max_rel, coordinates=checked, tolerance=tolerance, failures=failures, skipped=skipped,
    )


def _central_difference(
    f: Callable[[], TensorNode],
    flat: np.ndarray,
    idx: int,
    original: np.ndarray,
    h: float,
    base_signs: List[np.ndarray],
) -> Optional[float]:
    """(f(x + h) - f(x - h)) / 2h, or None when either side changes a relu sign."""
    try:
        flat[idx] = original + h
        with record_relu_signs() as plus_signs:
            plus = float(f().value)
        flat[idx] = original - h
        with record_relu_signs() as minus_signs:
            minus = float(f().value)
    finally:
        flat[idx] = original
    if not (_same_signs(plus_signs, base_signs) and _same_signs(minus_signs, base_signs)):
        return None
    return (plus - minus) / (2.0 * h)
