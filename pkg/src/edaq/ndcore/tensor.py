"""Dense float tensors with reverse-mode automatic differentiation.

Storage is float32 by default; reductions accumulate in float64 (see ops.py).
The graph is recorded implicitly: every op output remembers its parents and a
closure computing parent gradients. Recording only happens while gradients are
enabled and at least one input requires them, so inference-mode forwards build
no graph at all.
"""

from __future__ import annotations

import numpy as np


class NdError(Exception):
    """Base class for tensor-core errors."""


class ShapeError(NdError):
    def __init__(self, op: str, msg: str):
        super().__init__(f"{op}: {msg}")
        self.op = op


class NotFiniteError(NdError):
    def __init__(self, op: str):
        super().__init__(f"{op}: produced non-finite values")
        self.op = op


class GraphError(NdError):
    pass


_grad_enabled = True


class no_grad:
    """Context manager disabling graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=np.float32):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- properties -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def is_leaf(self) -> bool:
        return not self._parents

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- operator sugar (delegates to ops; imported lazily to avoid cycles) --

    def __add__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.scalar_affine(self, 1.0, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scalar_affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.add(self, ops.scalar_affine(other, -1.0, 0.0))
        return ops.scalar_affine(self, 1.0, -float(other))

    def __neg__(self):
        from . import ops
        return ops.scalar_affine(self, -1.0, 0.0)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, float(p))

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def make_node(op: str, out_data: np.ndarray, parents: tuple[Tensor, ...],
              backward) -> Tensor:
    """Wrap an op result, checking finiteness and recording the graph edge.

    `backward(gout) -> tuple[np.ndarray | None, ...]` must return one gradient
    per parent (None for parents that need no gradient).
    """
    if not np.all(np.isfinite(out_data)):
        raise NotFiniteError(op)
    requires = any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    if requires and _grad_enabled and backward is not None:
        out._parents = parents
        out._backward = backward
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into .grad of every trainable leaf."""
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from any trainable leaf")
    if loss._backward is None:
        # A bare trainable leaf scalar: gradient of itself is one.
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return

    # Deterministic iterative topological sort over parent links.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) in visited:
                continue
            if p._parents:
                stack.append((p, False))
            else:
                visited.add(id(p))
                topo.append(p)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    raise ShapeError("backward", f"gradient shape {pg.shape} != "
                                                 f"parent shape {p.data.shape}")
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
        elif node.requires_grad:
            node.grad = g.astype(node.data.dtype) if node.grad is None \
                else node.grad + g.astype(node.data.dtype)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
