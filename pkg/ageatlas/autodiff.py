"""
Reverse-mode automatic differentiation over dense numpy arrays.

Operations record themselves on the active :class:`Tape` (entered with
``with Tape() as tape:``). Outside a tape they compute values only, which is
what inference uses.

    with Tape() as tape:
        y = relu(conv(x, w, b))
        loss = mae_loss(stack([gap(y)]), targets)
    grads = backward(loss, retain=[y.node_id])

Convolution, 1x1 projection and global average pooling work on any spatial
rank, so the same operators serve 3D volumes and 2D projections.
"""

import itertools
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NumericalError, ShapeError

_active_tape: ContextVar[Optional["Tape"]] = ContextVar("ageatlas_active_tape", default=None)

Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """
    An n-dimensional array that can take part in a tape.

    Args:
        data: Array-like values; integer input is promoted to float64.
        requires_grad: Leaf tensors with this flag receive gradients.
        name: Optional label used in diagnostics.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, node={self.node_id}{label})"


@dataclass
class Node:
    node_id: int
    op: str
    inputs: Tuple[Optional[int], ...]
    shape: Tuple[int, ...]
    vjp: Optional[Vjp]


class Tape:
    """Ordered record of operations; creation order is a topological order."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._leaf_ids: Dict[int, int] = {}
        self._leaves: Dict[int, Tensor] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def node_of(self, t: Tensor) -> Optional[int]:
        """Node id of ``t`` on this tape, or None."""
        if t._tape is self:
            return t.node_id
        return self._leaf_ids.get(id(t))

    def watch(self, t: Tensor) -> int:
        """Register a leaf tensor (parameters may be shared by many tapes)."""
        if t._tape is self:
            return t.node_id
        if t._tape is not None:
            raise ValueError(f"{t!r} was produced on another tape")
        node_id = self._leaf_ids.get(id(t))
        if node_id is None:
            node_id = len(self.nodes)
            self.nodes.append(Node(node_id, "leaf", (), t.shape, None))
            self._leaf_ids[id(t)] = node_id
            self._leaves[node_id] = t
        return node_id

    def record(self, op: str, inputs: Sequence[Tensor], data: np.ndarray, vjp: Vjp) -> Tensor:
        ids = tuple(
            self.watch(t) if (t.requires_grad or t._tape is self) else None for t in inputs
        )
        out = Tensor(data)
        if all(i is None for i in ids):
            return out
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(Node(out.node_id, op, ids, out.shape, vjp))
        return out


class Gradients:
    """Gradients from one :func:`backward` call, indexed by tensor or node id."""

    def __init__(self, tape: Tape, by_node: Dict[int, np.ndarray]):
        self.tape = tape
        self.by_node = by_node

    def __getitem__(self, key: Union[Tensor, int]) -> np.ndarray:
        node_id = key if isinstance(key, int) else self.tape.node_of(key)
        if node_id is None or node_id not in self.by_node:
            raise KeyError(f"no gradient recorded for {key!r}")
        return self.by_node[node_id]

    def __contains__(self, key: Union[Tensor, int]) -> bool:
        node_id = key if isinstance(key, int) else self.tape.node_of(key)
        return node_id is not None and node_id in self.by_node


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, vjp: Vjp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite output from {op}", op=op)
    tape = _active_tape.get()
    if tape is None:
        return Tensor(data)
    return tape.record(op, inputs, data, vjp)


def _check_stride(stride: int) -> None:
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")


def _strided(start: Sequence[int], out_spatial: Sequence[int], stride: int) -> Tuple[slice, ...]:
    return (slice(None),) + tuple(
        slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(start, out_spatial)
    )


def conv(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """
    Cross-correlation with a 3-wide kernel and zero padding 1.

    Args:
        x: Input of shape (C_in, *spatial).
        weight: Kernel of shape (C_out, C_in, 3, ..., 3), one 3 per spatial axis.
        bias: Shape (C_out,).
        stride: 1 (same size) or 2; output extent is ``(n - 1) // stride + 1``.
    """
    _check_stride(stride)
    X, W, B = x.data, weight.data, bias.data
    rank = W.ndim - 2
    c_out, c_in = W.shape[:2]
    if X.ndim != rank + 1 or X.shape[0] != c_in or W.shape[2:] != (3,) * rank:
        raise ShapeError(f"conv: input {X.shape} incompatible with weight {W.shape}")
    if B.shape != (c_out,):
        raise ShapeError(f"conv: bias {B.shape} does not match {c_out} output channels")

    out_spatial = tuple((n - 1) // stride + 1 for n in X.shape[1:])
    Xp = np.pad(X, [(0, 0)] + [(1, 1)] * rank)
    offsets = list(itertools.product(range(3), repeat=rank))
    cols = np.stack([Xp[_strided(o, out_spatial, stride)] for o in offsets], axis=1)
    cols = cols.reshape(c_in * len(offsets), -1)
    W2 = W.reshape(c_out, -1)
    out = (W2 @ cols).reshape((c_out,) + out_spatial) + B.reshape((c_out,) + (1,) * rank)

    def vjp(g: np.ndarray):
        g2 = g.reshape(c_out, -1)
        g_weight = (g2 @ cols.T).reshape(W.shape)
        g_bias = g2.sum(axis=1)
        g_cols = (W2.T @ g2).reshape((c_in, len(offsets)) + out_spatial)
        g_padded = np.zeros_like(Xp)
        for k, o in enumerate(offsets):
            g_padded[_strided(o, out_spatial, stride)] += g_cols[:, k]
        g_x = g_padded[(slice(None),) + (slice(1, -1),) * rank]
        return g_x, g_weight, g_bias

    return _emit("conv", (x, weight, bias), out, vjp)


def conv3(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """3D convolution; ``x`` is (C_in, X, Y, Z)."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv3 expects (C, X, Y, Z) input, got {x.shape}")
    return conv(x, weight, bias, stride)


def projection1x1(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """Strided 1x1 convolution without bias for residual skips; weight is (C_out, C_in)."""
    _check_stride(stride)
    X, W = x.data, weight.data
    rank = X.ndim - 1
    if W.ndim != 2 or W.shape[1] != X.shape[0]:
        raise ShapeError(f"projection1x1: input {X.shape} incompatible with weight {W.shape}")
    picks = (slice(None),) + (slice(None, None, stride),) * rank
    sub = X[picks]
    out = np.tensordot(W, sub, axes=(1, 0))
    spatial = tuple(range(1, rank + 1))

    def vjp(g: np.ndarray):
        g_weight = np.tensordot(g, sub, axes=(spatial, spatial))
        g_x = np.zeros_like(X)
        g_x[picks] = np.tensordot(W, g, axes=(0, 0))
        return g_x, g_weight

    return _emit("projection1x1", (x, weight), out, vjp)


def relu(t: Tensor) -> Tensor:
    """Elementwise max(0, x); the derivative at exactly 0 is 0."""
    mask = t.data > 0
    out = np.where(mask, t.data, 0).astype(t.data.dtype)
    return _emit("relu", (t,), out, lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(t: Tensor, factor: float) -> Tensor:
    """Multiply by a constant."""
    return _emit("scale", (t,), t.data * factor, lambda g: (g * factor,))


def gap(t: Tensor) -> Tensor:
    """Global average pooling: (C, *spatial) -> (C,)."""
    if t.data.ndim < 2:
        raise ShapeError(f"gap expects (C, *spatial), got {t.shape}")
    spatial = tuple(range(1, t.data.ndim))
    count = int(np.prod(t.shape[1:]))
    out = t.data.mean(axis=spatial)

    def vjp(g: np.ndarray):
        per_voxel = (g / count).reshape((-1,) + (1,) * len(spatial))
        return (np.broadcast_to(per_voxel, t.shape).astype(t.data.dtype),)

    return _emit("gap", (t,), out, vjp)


def flatten(t: Tensor) -> Tensor:
    return _emit("flatten", (t,), t.data.reshape(-1), lambda g: (g.reshape(t.shape),))


def linear(t: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``W @ t + b`` with ``t`` (n,), ``W`` (m, n), ``b`` (m,)."""
    x, W, b = t.data, weight.data, bias.data
    if x.ndim != 1 or W.ndim != 2 or W.shape[1] != x.shape[0] or b.shape != (W.shape[0],):
        raise ShapeError(f"linear: input {x.shape}, weight {W.shape}, bias {b.shape}")
    out = W @ x + b
    return _emit("linear", (t, weight, bias), out, lambda g: (W.T @ g, np.outer(g, x), g))


def stack(items: Sequence[Tensor]) -> Tensor:
    """Collect single-value tensors into a Tensor of shape (B,)."""
    items = [_as_tensor(t) for t in items]
    if not items or any(t.size != 1 for t in items):
        raise ShapeError("stack expects one or more single-value tensors")
    out = np.concatenate([t.data.reshape(1) for t in items])
    return _emit(
        "stack", items, out, lambda g: tuple(g[i].reshape(t.shape) for i, t in enumerate(items))
    )


def mae_loss(pred: Tensor, target: Iterable[float]) -> Tensor:
    """Mean absolute error; the derivative at zero error is 0."""
    target = np.asarray(list(target) if not isinstance(target, np.ndarray) else target)
    p = pred.data.reshape(-1)
    if p.shape != target.reshape(-1).shape or p.size == 0:
        raise ShapeError(f"mae_loss: {p.size} predictions for {target.size} targets")
    diff = p - target.reshape(-1).astype(p.dtype)
    count = p.size
    out = np.array([np.abs(diff).mean()], dtype=p.dtype)

    def vjp(g: np.ndarray):
        return ((np.sign(diff) * (g.reshape(-1)[0] / count)).reshape(pred.shape).astype(p.dtype),)

    return _emit("mae_loss", (pred,), out, vjp)


def backward(
    loss: Tensor, retain: Iterable[int] = (), set_leaf_grads: bool = True
) -> Gradients:
    """
    Reverse sweep from a scalar ``loss``.

    Gradients meeting at a fan-out are summed. The result holds a gradient
    for every leaf that requires one and for each retained node id.

    Args:
        loss: Single-value tensor recorded on a tape.
        retain: Node ids of intermediates whose gradient must be kept.
        set_leaf_grads: Also store each leaf gradient in ``tensor.grad``. Leaves
            shared between tapes running in parallel should read the returned
            map instead.

    Raises:
        ShapeError: If ``loss`` is not a single value.
        ValueError: If ``loss`` is not on a tape or a retained id is unknown.
    """
    tape = loss._tape
    if tape is None:
        raise ValueError("backward needs a loss recorded on a tape")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    retain = list(retain)
    for node_id in retain:
        if not isinstance(node_id, int) or not 0 <= node_id < len(tape.nodes):
            raise ValueError(f"retained node {node_id!r} is not on the tape")

    keep = set(retain) | set(tape._leaves)
    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.get(node.node_id)
        if g is None or node.vjp is None:
            continue
        for input_id, g_in in zip(node.inputs, node.vjp(g)):
            if input_id is None or g_in is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + g_in
            else:
                grads[input_id] = g_in
        if node.node_id not in keep:
            del grads[node.node_id]

    result: Dict[int, np.ndarray] = {}
    for node_id, leaf in tape._leaves.items():
        if not leaf.requires_grad:
            continue
        g = grads.get(node_id)
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.data.dtype)
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient", leaf=leaf.name or node_id)
        result[node_id] = g
        if set_leaf_grads:
            leaf.grad = g
    for node_id in retain:
        g = grads.get(node_id)
        result[node_id] = g if g is not None else np.zeros(tape.nodes[node_id].shape)
    return Gradients(tape, result)
