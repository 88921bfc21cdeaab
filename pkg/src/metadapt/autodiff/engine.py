"""Reverse-mode automatic differentiation over dense float64 tensors.

Every primitive records a node on the active tape when any input requires
gradients.  Backward passes replay the tape in reverse creation order; the
vector-Jacobian products are themselves expressed with the same primitives,
so a backward pass executed with ``create_graph=True`` is recorded too and
can be differentiated again (second and higher order).
"""

from __future__ import annotations

import itertools
import weakref

import numpy as np

__all__ = [
    "AutodiffError",
    "Tensor",
    "Tape",
    "tape",
    "no_grad",
    "is_recording",
    "backward",
    "grad",
    "grad_graph",
]


class AutodiffError(Exception):
    """Raised for invalid differentiation requests or malformed op inputs."""


# Global monotone sequence numbers give a total order over nodes that is
# consistent with dataflow (inputs always created before outputs), even when
# several tapes are involved.
_SEQ = itertools.count()

_GRAD_ENABLED = True


class Node:
    """One recorded primitive application: op kind, inputs, output."""

    __slots__ = ("op", "inputs", "out_ref", "out_data", "seq", "__weakref__")

    def __init__(self, op, inputs, out):
        self.op = op
        self.inputs = inputs
        self.out_ref = weakref.ref(out)
        self.out_data = out.data  # shared array, kept for tape replay
        self.seq = next(_SEQ)


class Tape:
    """Ordered record of primitive applications.

    The tape holds only weak references; a node stays alive exactly as long
    as its output tensor does, so dropping intermediate tensors frees the
    graph without explicit cleanup.
    """

    def __init__(self):
        self.nodes: list[weakref.ref] = []
        self.generation = 0

    def record(self, node: Node) -> None:
        self.nodes.append(weakref.ref(node))

    def reset(self) -> None:
        self.nodes.clear()
        self.generation += 1

    def live_nodes(self) -> list[Node]:
        return [n for ref in self.nodes if (n := ref()) is not None]

    def replay_check(self) -> bool:
        """Recompute every live node forward; True iff all outputs match bit-exactly."""
        for node in self.live_nodes():
            redo = node.op.forward(*(t.data for t in node.inputs))
            if redo.shape != node.out_data.shape:
                return False
            if not np.array_equal(redo, node.out_data):
                return False
        return True


_ACTIVE_TAPE = Tape()


class tape:
    """Context manager installing a fresh (or given) tape as the active one."""

    def __init__(self, t: Tape | None = None):
        self.tape = t if t is not None else Tape()
        self._prev = None

    def __enter__(self) -> Tape:
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self.tape
        return self.tape

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False


def active_tape() -> Tape:
    return _ACTIVE_TAPE


class no_grad:
    """Disable recording inside the block (used for optimizer updates, eval)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def is_recording() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense n-dimensional float64 array, optionally tracked on a tape.

    Tensors are immutable from the graph's point of view: ops return new
    tensors and never write into their inputs.  Optimizers mutate leaf
    ``data`` in place under ``no_grad`` between iterations, which is safe
    because no live graph references the parameter values after the step.
    """

    __slots__ = ("data", "requires_grad", "node", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.grad: Tensor | None = None
        self.name = name

    # -- inspection ----------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def is_leaf(self) -> bool:
        return self.node is None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operator sugar (implementations live in ops.py) ----------------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, ops.as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, ops.as_tensor(other))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(ops.as_tensor(other), self)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, ops.as_tensor(other))

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(ops.as_tensor(other), self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __pow__(self, p):
        from . import ops

        return ops.power(self, float(p))

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def apply_op(op, *inputs: Tensor) -> Tensor:
    """Run a primitive forward and record it when gradients are in play."""
    out_data = op.forward(*(t.data for t in inputs))
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        node = Node(op, inputs, out)
        out.node = node
        _ACTIVE_TAPE.record(node)
    return out


# -- reverse pass -------------------------------------------------------------


def _collect_subgraph(root: Node) -> list[Node]:
    """All nodes reachable from ``root`` through inputs, sorted by descending seq."""
    seen = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for t in node.inputs:
            child = t.node
            if child is not None and id(child) not in seen:
                seen[id(child)] = child
                stack.append(child)
    return sorted(seen.values(), key=lambda n: n.seq, reverse=True)


def _accumulate(store: dict, key_tensor: Tensor, value: Tensor) -> None:
    from . import ops

    k = id(key_tensor)
    if k in store:
        store[k] = (key_tensor, ops.add(store[k][1], value))
    else:
        store[k] = (key_tensor, value)


def _run_backward(loss: Tensor, create_graph: bool) -> dict:
    """Propagate d(loss)/d(tensor) through the graph; returns id -> (tensor, grad)."""
    if loss.size != 1:
        raise AutodiffError(f"backward target must be scalar, got shape {loss.shape}")
    if loss.node is None:
        raise AutodiffError(
            "backward target is detached from the tape (no recorded ancestry)"
        )

    grads: dict = {}
    seed = Tensor(np.ones_like(loss.data))
    grads[id(loss)] = (loss, seed)

    order = _collect_subgraph(loss.node)
    ctx = tape(Tape()) if not create_graph else _NullCtx()
    with ctx:
        for node in order:
            out = node.out_ref()
            if out is None or id(out) not in grads:
                continue
            g_out = grads[id(out)][1]
            needs = tuple(t.requires_grad for t in node.inputs)
            in_grads = node.op.vjp(node, g_out, needs)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                _accumulate(grads, t, g)
    return grads


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def backward(loss: Tensor) -> dict:
    """Gradient of a scalar loss for every requires-grad leaf it depends on.

    Returns ``{leaf Tensor: grad Tensor}`` and also stores each gradient on
    the leaf's ``.grad`` slot (accumulating with any gradient already there).
    """
    from . import ops

    grads = _run_backward(loss, create_graph=False)
    out = {}
    for _, (t, g) in grads.items():
        if t.is_leaf() and t.requires_grad:
            out[t] = g
            with no_grad():
                t.grad = g if t.grad is None else ops.add(t.grad, g)
    return out


def grad(loss: Tensor, params, create_graph: bool = False) -> list[Tensor]:
    """Functional gradients of ``loss`` w.r.t. ``params`` (graph untouched).

    Parameters not reached by the loss get zero gradients.  With
    ``create_graph=True`` the returned tensors are tape-recorded and can be
    differentiated again.
    """
    params = list(params)
    grads = _run_backward(loss, create_graph=create_graph)
    out = []
    for p in params:
        hit = grads.get(id(p))
        if hit is None:
            out.append(Tensor(np.zeros_like(p.data)))
        else:
            out.append(hit[1])
    return out


def grad_graph(loss: Tensor, params) -> list[Tensor]:
    """Gradients that remain differentiable (for meta-gradients).

    Requires recording to be enabled; inside ``no_grad`` the backward pass
    could not be taped, so exact meta-gradients are impossible there.
    """
    if not _GRAD_ENABLED:
        raise AutodiffError(
            "higher-order mode needs recording enabled; either leave no_grad "
            "or switch the meta-learner to first_order mode"
        )
    return grad(loss, params, create_graph=True)
