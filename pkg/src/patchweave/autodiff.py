"""Static-graph reverse-mode automatic differentiation on numpy arrays.

Design notes
------------
Graphs are built once by tracing builder calls and evaluated many times with
fresh inputs, so a training step pays no graph-construction cost.  ``backward``
extends the graph with gradient nodes expressed through the same registered
ops, which makes gradients themselves differentiable: gradient-penalty style
objectives simply call ``backward`` twice (see ``second_order``).

Convolution is not differentiated by composing primitive gathers: the data and
weight gradients are explicit kernels (``conv2d_input_grad``,
``conv2d_weight_grad``) and the three ops reference one another in their VJPs,
which keeps second derivatives of conv nets exact without graph blowup.

Broadcasting is explicit (``broadcast_to``); elementwise ops require equal
shapes at build time.  Every evaluated node is probed for non-finite values
(a float64 sum, no boolean temporaries); the first offending node aborts
evaluation with ``NonFiniteError``.

Leaves come in two kinds: placeholders (fed per evaluation) and bound tensors
(read by name from the mapping passed as ``params``, shared between graphs so
several graphs can train the same weights).
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, MutableMapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised at build time when operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """Raised when an evaluated node produces NaN or Inf."""

    def __init__(self, node: "Node"):
        self.node = node
        super().__init__(
            f"non-finite value at node #{node.index} op={node.op!r} name={node.name!r}"
        )


class Node:
    """One tensor-valued vertex of a :class:`Graph`. Created via Graph methods."""

    __slots__ = ("graph", "index", "op", "inputs", "shape", "attrs", "name", "_fn")

    def __init__(self, graph, index, op, inputs, shape, attrs, name, fn):
        self.graph = graph
        self.index = index
        self.op = op
        self.inputs = inputs
        self.shape = shape
        self.attrs = attrs
        self.name = name
        self._fn = fn

    def __repr__(self):
        return f"Node#{self.index}({self.op}, shape={self.shape})"

    # arithmetic sugar; scalars go through scale/add_scalar so graphs stay lean
    def __add__(self, other):
        if isinstance(other, Node):
            return self.graph.add(self, other)
        return self.graph.add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            return self.graph.sub(self, other)
        return self.graph.add_scalar(self, -float(other))

    def __rsub__(self, other):
        return self.graph.scale(self, -1.0) + float(other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.graph.mul(self, other)
        return self.graph.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)


def _as_axes(axes, rank) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(rank))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % rank for a in axes))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Gather conv patches: [B,Ci,H,W] -> [B,Ci,kh,kw,OH,OW]."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, ci, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = np.empty((b, ci, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols, oh, ow


def _conv_out_hw(h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv kernel ({kh},{kw}) too large for input ({h},{w}) pad={pad}")
    return oh, ow


def _conv2d(x, w, stride, pad):
    co = w.shape[0]
    cols, oh, ow = _im2col(x, w.shape[2], w.shape[3], stride, pad)
    b = x.shape[0]
    cm = cols.reshape(b, -1, oh * ow)
    y = np.matmul(w.reshape(co, -1), cm)
    return y.reshape(b, co, oh, ow)


def _conv2d_input_grad(y, w, stride, pad, x_shape):
    b, co, oh, ow = y.shape
    _, ci, kh, kw = w.shape
    cm = np.matmul(w.reshape(co, -1).T, y.reshape(b, co, oh * ow))
    cols = cm.reshape(b, ci, kh, kw, oh, ow)
    hp, wp = x_shape[2] + 2 * pad, x_shape[3] + 2 * pad
    xp = np.zeros((b, ci, hp, wp), dtype=y.dtype)
    for i in range(kh):
        for j in range(kw):
            # strided slices within one (i,j) never overlap, += is safe
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad:
        xp = xp[:, :, pad : pad + x_shape[2], pad : pad + x_shape[3]]
    return np.ascontiguousarray(xp)


def _conv2d_weight_grad(x, y, stride, pad, w_shape):
    co, ci, kh, kw = w_shape
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    b = x.shape[0]
    cm = cols.reshape(b, ci * kh * kw, oh * ow)
    ym = y.reshape(b, co, oh * ow)
    dw = np.matmul(ym, cm.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(w_shape)


def _upsample2x(x):
    b, c, h, w = x.shape
    return np.broadcast_to(x[:, :, :, None, :, None], (b, c, h, 2, w, 2)).reshape(b, c, 2 * h, 2 * w)


def _sumpool2x(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class Graph:
    """A static computation graph over numpy arrays.

    Parameters
    ----------
    params:
        Mapping of name -> ndarray backing the graph's bound leaves.  Shared
        mutable state: updating an entry is how training steps feed new weights
        into an already-built graph.
    dtype:
        Compute precision for every node (float32 for training, float64 for
        gradient checks).
    """

    def __init__(self, params: MutableMapping[str, np.ndarray] | None = None, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: MutableMapping[str, np.ndarray] = params if params is not None else {}
        self.nodes: list[Node] = []
        self._placeholders: dict[str, Node] = {}
        self._bound: dict[str, Node] = {}
        self._plans: dict[tuple[int, ...], list[int]] = {}

    # ------------------------------------------------------------------ leaves

    def placeholder(self, name: str, shape: Sequence[int]) -> Node:
        if name in self._placeholders:
            raise ValueError(f"duplicate placeholder {name!r}")
        n = self._make("placeholder", [], tuple(int(d) for d in shape), None, name=name)
        self._placeholders[name] = n
        return n

    def bound(self, name: str) -> Node:
        """Leaf read from ``self.params[name]`` at every evaluation."""
        if name in self._bound:
            return self._bound[name]
        if name not in self.params:
            raise KeyError(f"no parameter named {name!r} in the backing store")
        shape = tuple(self.params[name].shape)
        n = self._make("bound", [], shape, None, name=name)
        self._bound[name] = n
        return n

    def const(self, value) -> Node:
        value = np.asarray(value, dtype=self.dtype)
        return self._make("const", [], value.shape, lambda vals, v=value: v)

    # ------------------------------------------------------------- construction

    def _make(self, op, inputs, shape, fn, name=None, attrs=None) -> Node:
        node = Node(self, len(self.nodes), op, tuple(inputs), tuple(shape), attrs or {}, name, fn)
        self.nodes.append(node)
        self._plans.clear()
        return node

    def _same_shape(self, op, a: Node, b: Node):
        if a.shape != b.shape:
            raise ShapeError(f"{op}: operand shapes {a.shape} vs {b.shape} differ")

    def add(self, a: Node, b: Node) -> Node:
        self._same_shape("add", a, b)
        return self._make("add", [a, b], a.shape, lambda v: v[0] + v[1])

    def sub(self, a: Node, b: Node) -> Node:
        self._same_shape("sub", a, b)
        return self._make("sub", [a, b], a.shape, lambda v: v[0] - v[1])

    def mul(self, a: Node, b: Node) -> Node:
        self._same_shape("mul", a, b)
        return self._make("mul", [a, b], a.shape, lambda v: v[0] * v[1])

    def scale(self, x: Node, k: float) -> Node:
        k = self.dtype.type(k)
        return self._make("scale", [x], x.shape, lambda v, k=k: v[0] * k, attrs={"k": float(k)})

    def add_scalar(self, x: Node, k: float) -> Node:
        k = self.dtype.type(k)
        return self._make("add_scalar", [x], x.shape, lambda v, k=k: v[0] + k, attrs={"k": float(k)})

    def matmul(self, a: Node, b: Node) -> Node:
        if len(a.shape) != 2 or len(b.shape) != 2:
            raise ShapeError(f"matmul: rank-2 operands required, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape} do not match")
        return self._make("matmul", [a, b], (a.shape[0], b.shape[1]), lambda v: np.matmul(v[0], v[1]))

    def transpose(self, x: Node) -> Node:
        if len(x.shape) != 2:
            raise ShapeError(f"transpose: rank-2 operand required, got {x.shape}")
        return self._make("transpose", [x], (x.shape[1], x.shape[0]),
                          lambda v: np.ascontiguousarray(v[0].T))

    def conv2d(self, x: Node, w: Node, stride: int = 1, pad: int = 0) -> Node:
        if len(x.shape) != 4 or len(w.shape) != 4:
            raise ShapeError(f"conv2d: need [B,Ci,H,W] and [Co,Ci,kh,kw], got {x.shape}, {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: channel mismatch {x.shape} vs {w.shape}")
        if stride not in (1, 2):
            raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
        oh, ow = _conv_out_hw(x.shape[2], x.shape[3], w.shape[2], w.shape[3], stride, pad)
        shape = (x.shape[0], w.shape[0], oh, ow)
        return self._make("conv2d", [x, w], shape,
                          lambda v, s=stride, p=pad: _conv2d(v[0], v[1], s, p),
                          attrs={"stride": stride, "pad": pad})

    def conv2d_input_grad(self, y: Node, w: Node, x_shape: Sequence[int],
                          stride: int = 1, pad: int = 0) -> Node:
        x_shape = tuple(int(d) for d in x_shape)
        oh, ow = _conv_out_hw(x_shape[2], x_shape[3], w.shape[2], w.shape[3], stride, pad)
        if y.shape != (x_shape[0], w.shape[0], oh, ow):
            raise ShapeError(f"conv2d_input_grad: y shape {y.shape} inconsistent with x {x_shape}")
        return self._make("conv2d_input_grad", [y, w], x_shape,
                          lambda v, s=stride, p=pad, xs=x_shape: _conv2d_input_grad(v[0], v[1], s, p, xs),
                          attrs={"stride": stride, "pad": pad, "x_shape": x_shape})

    def conv2d_weight_grad(self, x: Node, y: Node, w_shape: Sequence[int],
                           stride: int = 1, pad: int = 0) -> Node:
        w_shape = tuple(int(d) for d in w_shape)
        oh, ow = _conv_out_hw(x.shape[2], x.shape[3], w_shape[2], w_shape[3], stride, pad)
        if y.shape != (x.shape[0], w_shape[0], oh, ow):
            raise ShapeError(f"conv2d_weight_grad: y shape {y.shape} inconsistent with x {x.shape}")
        return self._make("conv2d_weight_grad", [x, y], w_shape,
                          lambda v, s=stride, p=pad, ws=w_shape: _conv2d_weight_grad(v[0], v[1], s, p, ws),
                          attrs={"stride": stride, "pad": pad, "w_shape": w_shape})

    def upsample2x(self, x: Node) -> Node:
        if len(x.shape) != 4:
            raise ShapeError(f"upsample2x: need [B,C,H,W], got {x.shape}")
        b, c, h, w = x.shape
        return self._make("upsample2x", [x], (b, c, 2 * h, 2 * w), lambda v: _upsample2x(v[0]))

    def sumpool2x(self, x: Node) -> Node:
        if len(x.shape) != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"sumpool2x: need [B,C,2h,2w], got {x.shape}")
        b, c, h, w = x.shape
        return self._make("sumpool2x", [x], (b, c, h // 2, w // 2), lambda v: _sumpool2x(v[0]))

    def sum(self, x: Node, axes=None, keepdims: bool = False) -> Node:
        axes = _as_axes(axes, len(x.shape))
        if keepdims:
            shape = tuple(1 if i in axes else d for i, d in enumerate(x.shape))
        else:
            shape = tuple(d for i, d in enumerate(x.shape) if i not in axes)
        return self._make("sum", [x], shape,
                          lambda v, ax=axes, kd=keepdims: np.asarray(v[0].sum(axis=ax, keepdims=kd)),
                          attrs={"axes": axes, "keepdims": keepdims})

    def mean(self, x: Node, axes=None, keepdims: bool = False) -> Node:
        axes = _as_axes(axes, len(x.shape))
        count = 1
        for a in axes:
            count *= x.shape[a]
        return self.scale(self.sum(x, axes, keepdims), 1.0 / count)

    def square(self, x: Node) -> Node:
        return self._make("square", [x], x.shape, lambda v: v[0] * v[0])

    def sqrt(self, x: Node) -> Node:
        return self._make("sqrt", [x], x.shape, lambda v: np.sqrt(v[0]))

    def reciprocal(self, x: Node) -> Node:
        return self._make("reciprocal", [x], x.shape, lambda v: np.reciprocal(v[0]))

    def tanh(self, x: Node) -> Node:
        return self._make("tanh", [x], x.shape, lambda v: np.tanh(v[0]))

    def relu(self, x: Node) -> Node:
        return self._make("relu", [x], x.shape, lambda v: np.maximum(v[0], 0))

    def relu_mask(self, x: Node) -> Node:
        # indicator of x > 0; derivative defined as zero everywhere
        return self._make("relu_mask", [x], x.shape,
                          lambda v, dt=self.dtype: (v[0] > 0).astype(dt))

    def sign_mask(self, x: Node) -> Node:
        # sign of x (0 at 0); derivative defined as zero everywhere
        return self._make("sign_mask", [x], x.shape, lambda v: np.sign(v[0]))

    def abs(self, x: Node) -> Node:
        return self.mul(x, self.sign_mask(x))

    def concat(self, xs: Sequence[Node], axis: int) -> Node:
        if not xs:
            raise ShapeError("concat: need at least one input")
        rank = len(xs[0].shape)
        axis = axis % rank
        base = list(xs[0].shape)
        total = 0
        for x in xs:
            if len(x.shape) != rank:
                raise ShapeError(f"concat: rank mismatch {xs[0].shape} vs {x.shape}")
            for i in range(rank):
                if i != axis and x.shape[i] != base[i]:
                    raise ShapeError(f"concat: shape mismatch {xs[0].shape} vs {x.shape} on axis {i}")
            total += x.shape[axis]
        base[axis] = total
        return self._make("concat", xs, tuple(base),
                          lambda v, ax=axis: np.concatenate(v, axis=ax), attrs={"axis": axis})

    def slice(self, x: Node, starts: Sequence[int], sizes: Sequence[int]) -> Node:
        starts = tuple(int(s) for s in starts)
        sizes = tuple(int(s) for s in sizes)
        if len(starts) != len(x.shape) or len(sizes) != len(x.shape):
            raise ShapeError(f"slice: starts/sizes rank must match {x.shape}")
        for st, sz, d in zip(starts, sizes, x.shape):
            if st < 0 or sz < 1 or st + sz > d:
                raise ShapeError(f"slice: window starts={starts} sizes={sizes} outside {x.shape}")
        idx = tuple(np.s_[st : st + sz] for st, sz in zip(starts, sizes))
        return self._make("slice", [x], sizes, lambda v, ix=idx: np.ascontiguousarray(v[0][ix]),
                          attrs={"starts": starts, "sizes": sizes})

    def pad_zero(self, x: Node, out_shape: Sequence[int], starts: Sequence[int]) -> Node:
        out_shape = tuple(int(d) for d in out_shape)
        starts = tuple(int(s) for s in starts)
        for st, sz, d in zip(starts, x.shape, out_shape):
            if st < 0 or st + sz > d:
                raise ShapeError(f"pad_zero: {x.shape} at starts={starts} exceeds {out_shape}")
        idx = tuple(np.s_[st : st + sz] for st, sz in zip(starts, x.shape))

        def fn(v, ix=idx, os=out_shape, dt=self.dtype):
            out = np.zeros(os, dtype=dt)
            out[ix] = v[0]
            return out

        return self._make("pad_zero", [x], out_shape, fn, attrs={"starts": starts})

    def reshape(self, x: Node, shape: Sequence[int]) -> Node:
        shape = tuple(int(d) for d in shape)
        if math.prod(shape) != math.prod(x.shape):
            raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
        return self._make("reshape", [x], shape, lambda v, sh=shape: v[0].reshape(sh))

    def broadcast_to(self, x: Node, shape: Sequence[int]) -> Node:
        shape = tuple(int(d) for d in shape)
        try:
            np.broadcast_shapes(x.shape, shape)
        except ValueError as exc:
            raise ShapeError(f"broadcast_to: {x.shape} does not broadcast to {shape}") from exc
        if np.broadcast_shapes(x.shape, shape) != shape:
            raise ShapeError(f"broadcast_to: {x.shape} does not broadcast to {shape}")
        return self._make("broadcast_to", [x], shape,
                          lambda v, sh=shape: np.ascontiguousarray(np.broadcast_to(v[0], sh)))

    def l2norm(self, x: Node, axes=None, keepdims: bool = False) -> Node:
        """Euclidean norm over ``axes`` (composite: sqrt of sum of squares)."""
        return self.sqrt(self.sum(self.square(x), axes, keepdims))

    # -------------------------------------------------------------- evaluation

    def _plan(self, outputs: Sequence[Node]) -> list[int]:
        key = tuple(n.index for n in outputs)
        plan = self._plans.get(key)
        if plan is None:
            needed = set()
            stack = [n.index for n in outputs]
            while stack:
                i = stack.pop()
                if i not in needed:
                    needed.add(i)
                    stack.extend(inp.index for inp in self.nodes[i].inputs)
            plan = sorted(needed)
            self._plans[key] = plan
        return plan

    def eval(self, feeds: Mapping[str, np.ndarray] | None, outputs):
        """Evaluate ``outputs`` given placeholder ``feeds``.

        Returns a single array when ``outputs`` is one node, else a list in
        the same order.  Raises ``KeyError`` for an unbound placeholder and
        ``NonFiniteError`` at the first node whose value is not finite.
        """
        single = isinstance(outputs, Node)
        outs = [outputs] if single else list(outputs)
        feeds = feeds or {}
        values: list = [None] * len(self.nodes)
        for i in self._plan(outs):
            node = self.nodes[i]
            if node.op == "placeholder":
                try:
                    v = feeds[node.name]
                except KeyError:
                    raise KeyError(f"placeholder {node.name!r} not fed") from None
                v = np.asarray(v, dtype=self.dtype)
                if v.shape != node.shape:
                    raise ShapeError(f"feed {node.name!r}: got {v.shape}, expected {node.shape}")
            elif node.op == "bound":
                v = np.asarray(self.params[node.name], dtype=self.dtype)
                if v.shape != node.shape:
                    raise ShapeError(f"bound {node.name!r}: store has {v.shape}, graph built "
                                     f"with {node.shape}")
            else:
                v = node._fn([values[inp.index] for inp in node.inputs])
            if not math.isfinite(float(v.sum(dtype=np.float64))):
                raise NonFiniteError(node)
            values[i] = v
        result = [values[n.index] for n in outs]
        return result[0] if single else result

    # ---------------------------------------------------------------- backward

    def backward(self, output: Node, wrt: Sequence[Node]) -> dict[Node, Node]:
        """Append gradient nodes for d(output)/d(leaf) and return them per leaf.

        ``output`` must be scalar shaped (() or (1,)).  The returned nodes are
        ordinary graph nodes, so they can be evaluated repeatedly and
        differentiated again.  Leaves that do not influence ``output`` map to
        zero constants of the leaf's shape.
        """
        if output.shape not in ((), (1,)):
            raise ShapeError(f"backward: output must be scalar shaped, got {output.shape}")
        wrt = list(wrt)
        n = len(self.nodes)
        ancestors = set()
        stack = [output.index]
        while stack:
            i = stack.pop()
            if i not in ancestors:
                ancestors.add(i)
                stack.extend(inp.index for inp in self.nodes[i].inputs)
        reaches = [False] * n
        wrt_idx = {w.index for w in wrt}
        for i in range(n):
            node = self.nodes[i]
            reaches[i] = i in wrt_idx or any(reaches[inp.index] for inp in node.inputs)
        relevant = [i for i in sorted(ancestors, reverse=True) if reaches[i]]

        pending: dict[int, list[Node]] = {output.index: [self.const(np.ones(output.shape))]}
        adjoint: dict[int, Node] = {}
        for i in relevant:
            parts = pending.pop(i, None)
            if not parts:
                continue
            total = parts[0]
            for p in parts[1:]:
                total = self.add(total, p)
            adjoint[i] = total
            node = self.nodes[i]
            if not node.inputs:
                continue
            contribs = _VJP[node.op](self, node, total)
            for inp, contrib in zip(node.inputs, contribs):
                if contrib is not None and reaches[inp.index] and inp.index in ancestors:
                    pending.setdefault(inp.index, []).append(contrib)

        result = {}
        for leaf in wrt:
            g = adjoint.get(leaf.index)
            if g is None:
                g = self.const(np.zeros(leaf.shape))
            result[leaf] = g
        return result


def second_order(graph: Graph, output: Node, inner: Node,
                 make_scalar: Callable[[Graph, Node], Node],
                 outer: Sequence[Node]) -> dict[Node, Node]:
    """Differentiate a scalar function of a gradient.

    Builds g = d(output)/d(inner), applies ``make_scalar(graph, g)`` to get a
    scalar penalty, and returns d(penalty)/d(leaf) for every leaf in ``outer``.
    This is the gradient-penalty pattern: both backward passes extend the same
    graph, so one evaluation computes everything.
    """
    g = graph.backward(output, [inner])[inner]
    s = make_scalar(graph, g)
    return graph.backward(s, outer)


# ------------------------------------------------------------------------ VJPs
# Each rule maps (graph, node, upstream) -> per-input gradient nodes (None for
# "no gradient defined / treated as zero").  Rules build ordinary graph nodes,
# which is what makes gradients differentiable again.

def _vjp_add(g, node, up):
    return [up, up]


def _vjp_sub(g, node, up):
    return [up, g.scale(up, -1.0)]


def _vjp_mul(g, node, up):
    a, b = node.inputs
    return [g.mul(up, b), g.mul(up, a)]


def _vjp_scale(g, node, up):
    return [g.scale(up, node.attrs["k"])]


def _vjp_add_scalar(g, node, up):
    return [up]


def _vjp_matmul(g, node, up):
    a, b = node.inputs
    return [g.matmul(up, g.transpose(b)), g.matmul(g.transpose(a), up)]


def _vjp_transpose(g, node, up):
    return [g.transpose(up)]


def _vjp_conv2d(g, node, up):
    x, w = node.inputs
    s, p = node.attrs["stride"], node.attrs["pad"]
    return [g.conv2d_input_grad(up, w, x.shape, s, p),
            g.conv2d_weight_grad(x, up, w.shape, s, p)]


def _vjp_conv2d_input_grad(g, node, up):
    # node = dT/dx(y, w); <up, node> = T(up, w, y), so d/dy = conv2d(up, w),
    # d/dw = weight_grad(up, y)
    y, w = node.inputs
    s, p = node.attrs["stride"], node.attrs["pad"]
    return [g.conv2d(up, w, s, p), g.conv2d_weight_grad(up, y, w.shape, s, p)]


def _vjp_conv2d_weight_grad(g, node, up):
    # node = dT/dw(x, y); <up, node> = T(x, up, y)
    x, y = node.inputs
    s, p = node.attrs["stride"], node.attrs["pad"]
    return [g.conv2d_input_grad(y, up, x.shape, s, p), g.conv2d(x, up, s, p)]


def _vjp_upsample2x(g, node, up):
    return [g.sumpool2x(up)]


def _vjp_sumpool2x(g, node, up):
    return [g.upsample2x(up)]


def _vjp_sum(g, node, up):
    (x,) = node.inputs
    axes, keepdims = node.attrs["axes"], node.attrs["keepdims"]
    if not keepdims:
        kd_shape = tuple(1 if i in axes else d for i, d in enumerate(x.shape))
        up = g.reshape(up, kd_shape)
    return [g.broadcast_to(up, x.shape)]


def _vjp_square(g, node, up):
    (x,) = node.inputs
    return [g.mul(up, g.scale(x, 2.0))]


def _vjp_sqrt(g, node, up):
    return [g.scale(g.mul(up, g.reciprocal(node)), 0.5)]


def _vjp_reciprocal(g, node, up):
    return [g.scale(g.mul(up, g.square(node)), -1.0)]


def _vjp_tanh(g, node, up):
    return [g.mul(up, g.add_scalar(g.scale(g.square(node), -1.0), 1.0))]


def _vjp_relu(g, node, up):
    (x,) = node.inputs
    return [g.mul(up, g.relu_mask(x))]


def _vjp_zero(g, node, up):
    return [None]


def _vjp_concat(g, node, up):
    axis = node.attrs["axis"]
    outs = []
    offset = 0
    for x in node.inputs:
        starts = [0] * len(x.shape)
        starts[axis] = offset
        outs.append(g.slice(up, starts, x.shape))
        offset += x.shape[axis]
    return outs


def _vjp_slice(g, node, up):
    (x,) = node.inputs
    return [g.pad_zero(up, x.shape, node.attrs["starts"])]


def _vjp_pad_zero(g, node, up):
    (x,) = node.inputs
    return [g.slice(up, node.attrs["starts"], x.shape)]


def _vjp_reshape(g, node, up):
    (x,) = node.inputs
    return [g.reshape(up, x.shape)]


def _vjp_broadcast_to(g, node, up):
    (x,) = node.inputs
    ndiff = len(node.shape) - len(x.shape)
    axes = tuple(range(ndiff)) + tuple(
        i + ndiff for i, d in enumerate(x.shape) if d == 1 and node.shape[i + ndiff] != 1
    )
    summed = g.sum(up, axes) if axes else up
    return [g.reshape(summed, x.shape)]


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "scale": _vjp_scale,
    "add_scalar": _vjp_add_scalar,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "conv2d": _vjp_conv2d,
    "conv2d_input_grad": _vjp_conv2d_input_grad,
    "conv2d_weight_grad": _vjp_conv2d_weight_grad,
    "upsample2x": _vjp_upsample2x,
    "sumpool2x": _vjp_sumpool2x,
    "sum": _vjp_sum,
    "square": _vjp_square,
    "sqrt": _vjp_sqrt,
    "reciprocal": _vjp_reciprocal,
    "tanh": _vjp_tanh,
    "relu": _vjp_relu,
    "relu_mask": _vjp_zero,
    "sign_mask": _vjp_zero,
    "concat": _vjp_concat,
    "slice": _vjp_slice,
    "pad_zero": _vjp_pad_zero,
    "reshape": _vjp_reshape,
    "broadcast_to": _vjp_broadcast_to,
}
