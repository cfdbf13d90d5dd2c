"""Array-valued automatic differentiation on a flat tape.

The engine supports the two differentiation patterns the optimizer needs:

* reverse mode (``Tape.grad``) for gradients of a scalar loss with respect
  to parameter arrays, and
* a two-channel forward mode (``Tape.jvp``) that pushes tangent vectors
  through the graph to obtain Jacobians of a 3D map with respect to its 2D
  surface coordinates.

Tangent values created by the forward sweep are ordinary tape nodes built
from the same primitive set, so a later reverse sweep differentiates
through them. Losses that consume Jacobian entries (metric tensors) are
therefore handled by the plain reverse pass; ``Tape.nested_grad`` is that
pass under its own name.

Values are float64 numpy arrays and are computed eagerly when a node is
recorded, in topological (append) order. A tape and its buffers belong to
one worker; independent tapes may share read-only parameter arrays.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

# Primitive vocabulary. Every node on a tape carries one of these.
OPS = (
    "add",
    "mul",
    "matvec",
    "softplus",
    "relu",
    "tanh",
    "max-reduce",
    "square",
    "sum",
    "sqrt",
    "div",
    "const",
)


class GraphError(Exception):
    """Misuse of a tape: unbound inputs, shape mismatches, bad wrt nodes."""


class NonFiniteError(GraphError):
    """A node produced NaN or Inf; carries the offending node id and op."""

    def __init__(self, nid: int, op: str):
        super().__init__(f"non-finite value produced at node {nid} (op {op!r})")
        self.nid = nid
        self.op = op


class Node:
    """One entry of the tape: an op, its parents, and the computed value."""

    __slots__ = ("tape", "nid", "op", "parents", "value", "aux", "name")

    def __init__(self, tape, nid, op, parents, value, aux=None, name=None):
        self.tape = tape
        self.nid = nid
        self.op = op
        self.parents = parents
        self.value = value
        self.aux = aux
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __repr__(self):
        return f"Node({self.nid}, {self.op}, shape={self.value.shape})"


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over the axes numpy broadcasting expanded, back to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tape:
    """A flat, append-only tape of :class:`Node` in topological order."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    # ------------------------------------------------------------------
    # recording
    # ------------------------------------------------------------------

    def _record(self, op, parents, value, aux=None, name=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        nid = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(nid, op)
        node = Node(self, nid, op, tuple(parents), value, aux, name)
        self.nodes.append(node)
        return node

    def _coerce(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise GraphError("node belongs to a different tape")
            return x
        return self.const(x)

    def const(self, value) -> Node:
        return self._record("const", (), value)

    def input(self, value, name: str) -> Node:
        """A named leaf (parameter or input). Raises if the value is unbound."""
        if value is None:
            raise GraphError(f"unbound input {name!r}")
        return self._record("const", (), value, name=name)

    # ------------------------------------------------------------------
    # primitives
    # ------------------------------------------------------------------

    def add(self, a, b) -> Node:
        a, b = self._coerce(a), self._coerce(b)
        return self._record("add", (a, b), a.value + b.value)

    def mul(self, a, b) -> Node:
        a, b = self._coerce(a), self._coerce(b)
        return self._record("mul", (a, b), a.value * b.value)

    def div(self, a, b) -> Node:
        a, b = self._coerce(a), self._coerce(b)
        return self._record("div", (a, b), a.value / b.value)

    def sub(self, a, b) -> Node:
        return self.add(a, self.mul(self.const(-1.0), b))

    def matvec(self, w, x) -> Node:
        """Matrix product w @ x; x may be a single column or a stack of them."""
        w, x = self._coerce(w), self._coerce(x)
        if w.value.ndim != 2 or x.value.ndim != 2:
            raise GraphError("matvec operands must be 2-D")
        if w.value.shape[1] != x.value.shape[0]:
            raise GraphError(
                f"matvec shapes {w.value.shape} x {x.value.shape} do not chain"
            )
        return self._record("matvec", (w, x), w.value @ x.value)

    def softplus(self, x) -> Node:
        x = self._coerce(x)
        # logaddexp(0, x) = log(1 + exp(x)) without overflow for large |x|
        return self._record("softplus", (x,), np.logaddexp(0.0, x.value))

    def relu(self, x) -> Node:
        x = self._coerce(x)
        return self._record("relu", (x,), np.maximum(x.value, 0.0))

    def tanh(self, x) -> Node:
        x = self._coerce(x)
        return self._record("tanh", (x,), np.tanh(x.value))

    def square(self, x) -> Node:
        x = self._coerce(x)
        return self._record("square", (x,), np.square(x.value))

    def sqrt(self, x) -> Node:
        x = self._coerce(x)
        return self._record("sqrt", (x,), np.sqrt(x.value))

    def sum(self, x, axis: int | None = None) -> Node:
        """Full reduction to a scalar, or a keepdims reduction over one axis."""
        x = self._coerce(x)
        if axis is None:
            value = np.sum(x.value)
        else:
            value = np.sum(x.value, axis=axis, keepdims=True)
        return self._record("sum", (x,), value, aux=axis)

    def max_reduce(self, x, axis: int) -> Node:
        """Keepdims max over one axis; the argmax is frozen for both sweeps."""
        x = self._coerce(x)
        amax = np.argmax(x.value, axis=axis)
        value = np.max(x.value, axis=axis, keepdims=True)
        return self._record("max-reduce", (x,), value, aux=(axis, amax))

    # ------------------------------------------------------------------
    # reverse mode
    # ------------------------------------------------------------------

    def grad(self, loss: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
        """d(loss)/d(node) for each node in `wrt`.

        `loss` must be scalar. Nodes that do not influence the loss get a
        zero cotangent of their own shape. The sweep walks the tape once in
        reverse, so it also covers tangent nodes appended by :meth:`jvp`.
        """
        loss = self._coerce(loss)
        if loss.value.size != 1:
            raise GraphError(
                f"grad needs a scalar loss, got shape {loss.value.shape}"
            )
        needed = self._ancestors(loss)
        adjoint: dict[int, np.ndarray] = {loss.nid: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.nid + 1]):
            if node.nid not in needed:
                continue
            g = adjoint.get(node.nid)
            if g is None:
                continue
            self._push_adjoint(node, g, adjoint)
        out = []
        for node in wrt:
            node = self._coerce(node)
            out.append(adjoint.get(node.nid, np.zeros_like(node.value)))
        return out

    # Gradients of losses that consume forward-mode (Jacobian) nodes take
    # the exact same reverse sweep; the alias exists so call sites can say
    # which flavour they rely on.
    nested_grad = grad

    def _ancestors(self, root: Node) -> set[int]:
        seen = {root.nid}
        stack = [root]
        while stack:
            node = stack.pop()
            for p in node.parents:
                if p.nid not in seen:
                    seen.add(p.nid)
                    stack.append(p)
        return seen

    def _push_adjoint(self, node: Node, g: np.ndarray, adjoint: dict) -> None:
        op = node.op
        if op == "const":
            return
        p = node.parents

        def acc(parent: Node, contrib: np.ndarray):
            contrib = _unbroadcast(contrib, parent.value.shape)
            if parent.nid in adjoint:
                adjoint[parent.nid] = adjoint[parent.nid] + contrib
            else:
                adjoint[parent.nid] = contrib

        if op == "add":
            acc(p[0], g)
            acc(p[1], g)
        elif op == "mul":
            acc(p[0], g * p[1].value)
            acc(p[1], g * p[0].value)
        elif op == "div":
            acc(p[0], g / p[1].value)
            acc(p[1], -g * p[0].value / np.square(p[1].value))
        elif op == "matvec":
            w, x = p
            acc(w, g @ x.value.T)
            acc(x, w.value.T @ g)
        elif op == "softplus":
            # d softplus = sigmoid, computed through tanh for stability
            acc(p[0], g * 0.5 * (1.0 + np.tanh(0.5 * p[0].value)))
        elif op == "relu":
            # subgradient at 0 defined as 0
            acc(p[0], g * (p[0].value > 0.0))
        elif op == "tanh":
            acc(p[0], g * (1.0 - np.square(node.value)))
        elif op == "square":
            acc(p[0], g * 2.0 * p[0].value)
        elif op == "sqrt":
            acc(p[0], g / (2.0 * node.value))
        elif op == "sum":
            acc(p[0], np.broadcast_to(g, p[0].value.shape))
        elif op == "max-reduce":
            axis, amax = node.aux
            contrib = np.zeros_like(p[0].value)
            np.put_along_axis(contrib, np.expand_dims(amax, axis), g, axis=axis)
            acc(p[0], contrib)
        else:  # pragma: no cover
            raise GraphError(f"no adjoint rule for op {op!r}")

    # ------------------------------------------------------------------
    # forward mode (two tangent channels)
    # ------------------------------------------------------------------

    def jvp(self, wrt, seeds=((1.0, 0.0), (0.0, 1.0))):
        """Push two tangent channels from `wrt` through its descendants.

        `seeds` are directional vectors along the first axis of `wrt` (for
        a UV input of shape (2, n) the defaults are e_u, e_v, applied to
        every column). Returns a map node-id -> (tangent node, tangent
        node), one per channel; ids absent from the map have structurally
        zero tangents. Tangent values are first-class tape nodes, so the
        reverse sweep differentiates through them.
        """
        return _jvp_sweep(self, self._coerce(wrt), seeds)

    def jacobian(self, output: Node, wrt: Node, seeds=((1.0, 0.0), (0.0, 1.0))):
        """Tangent nodes of `output` for each seed direction.

        For a 3D output and a 2D input these are the two Jacobian columns.
        """
        tangents = self.jvp(wrt, seeds)
        if output.nid not in tangents:
            zero = self.const(np.zeros_like(output.value))
            return zero, zero
        return tangents[output.nid]


def _match_shape(tape: Tape, t: Node, shape: tuple) -> Node:
    """Broadcast a tangent node up to `shape` (tangents mirror their primal)."""
    if t.value.shape == shape:
        return t
    return tape.add(t, tape.const(np.zeros(shape)))


def _tangent_of(tape: Tape, node: Node, tangents: dict, channel: int) -> Node:
    """Tangent of one node for one channel, built from primitive ops only."""

    def t(parent: Node):
        pair = tangents.get(parent.nid)
        return None if pair is None else pair[channel]

    op = node.op
    p = node.parents
    if op == "add":
        ta, tb = t(p[0]), t(p[1])
        if ta is None:
            out = tb
        elif tb is None:
            out = ta
        else:
            out = tape.add(ta, tb)
    elif op == "mul":
        terms = []
        ta, tb = t(p[0]), t(p[1])
        if ta is not None:
            terms.append(tape.mul(ta, p[1]))
        if tb is not None:
            terms.append(tape.mul(p[0], tb))
        out = terms[0] if len(terms) == 1 else tape.add(*terms)
    elif op == "div":
        ta, tb = t(p[0]), t(p[1])
        terms = []
        if ta is not None:
            terms.append(tape.div(ta, p[1]))
        if tb is not None:
            quot = tape.div(tape.mul(p[0], tb), tape.square(p[1]))
            terms.append(tape.mul(tape.const(-1.0), quot))
        out = terms[0] if len(terms) == 1 else tape.add(*terms)
    elif op == "matvec":
        tw, tx = t(p[0]), t(p[1])
        terms = []
        if tw is not None:
            terms.append(tape.matvec(_match_shape(tape, tw, p[0].value.shape), p[1]))
        if tx is not None:
            terms.append(tape.matvec(p[0], _match_shape(tape, tx, p[1].value.shape)))
        out = terms[0] if len(terms) == 1 else tape.add(*terms)
    elif op == "softplus":
        # sigmoid through the tanh identity so the derivative itself stays
        # on-tape and twice differentiable within the primitive set
        x = p[0]
        half = tape.mul(tape.const(0.5), x)
        sig = tape.mul(tape.const(0.5), tape.add(tape.const(1.0), tape.tanh(half)))
        out = tape.mul(sig, t(x))
    elif op == "relu":
        mask = tape.const((p[0].value > 0.0).astype(np.float64))
        out = tape.mul(mask, t(p[0]))
    elif op == "tanh":
        one_minus = tape.sub(tape.const(1.0), tape.square(node))
        out = tape.mul(one_minus, t(p[0]))
    elif op == "square":
        out = tape.mul(tape.const(2.0), tape.mul(p[0], t(p[0])))
    elif op == "sqrt":
        out = tape.div(t(p[0]), tape.mul(tape.const(2.0), node))
    elif op == "sum":
        out = tape.sum(_match_shape(tape, t(p[0]), p[0].value.shape), axis=node.aux)
    elif op == "max-reduce":
        # argmax frozen from the primal pass; tangent picks the same slots
        axis, amax = node.aux
        mask = np.zeros_like(p[0].value)
        np.put_along_axis(mask, np.expand_dims(amax, axis), 1.0, axis=axis)
        picked = tape.mul(tape.const(mask), _match_shape(tape, t(p[0]), p[0].value.shape))
        out = tape.sum(picked, axis=axis)
    else:  # pragma: no cover
        raise GraphError(f"no tangent rule for op {op!r}")
    if out is None:  # pragma: no cover - caller guarantees a live parent
        raise GraphError("tangent of node with no live parents")
    return _match_shape(tape, out, node.value.shape)


def _jvp_sweep(tape: Tape, wrt: Node, seeds) -> dict:
    seeds = [np.asarray(s, dtype=np.float64) for s in seeds]
    if len(seeds) != 2:
        raise GraphError("jvp expects exactly two seed vectors")
    dim = wrt.value.shape[0]
    for s in seeds:
        if s.shape != (dim,):
            raise GraphError(f"seed shape {s.shape} does not match input dim {dim}")
    tangents: dict[int, tuple[Node, Node]] = {}
    seed_nodes = []
    for s in seeds:
        if wrt.value.ndim == 2:
            init = np.broadcast_to(s[:, None], wrt.value.shape).copy()
        else:
            init = s
        seed_nodes.append(tape.const(init))
    tangents[wrt.nid] = (seed_nodes[0], seed_nodes[1])
    # Sweep only nodes recorded after wrt: anything earlier cannot depend
    # on it. The list is snapshotted because tangent construction appends.
    snapshot = tape.nodes[wrt.nid + 1 :]
    for node in snapshot:
        if node.op == "const":
            continue
        if not any(par.nid in tangents for par in node.parents):
            continue
        tu = _tangent_of(tape, node, tangents, 0)
        tv = _tangent_of(tape, node, tangents, 1)
        tangents[node.nid] = (tu, tv)
    return tangents
