"""Define-then-run reverse-mode autodiff over float64 numpy tensors.

A :class:`Graph` records op nodes with static shapes. ``forward`` binds the
leaf tensors by name and evaluates every node in insertion order (which is a
topological order by construction); ``backward`` walks the same list in
reverse and returns gradients for the requested leaves.

    g = Graph()
    x = g.input("x", (3,))
    w = g.param("w", (3,))
    loss = g.sum(g.square(x * w))
    ev = g.forward({"x": np.ones(3), "w": np.arange(3.0)})
    grads = g.backward(ev, loss)          # {"w": ...}
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class GraphError(ValueError):
    """Shape errors at build time and non-finite values at evaluation time."""


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


@dataclass(eq=False)
class Node:
    graph: "Graph"
    id: int
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.id} {self.op}{label} {self.shape}>"

    # operator sugar; python scalars become scale/shift nodes
    def __add__(self, other):
        if np.isscalar(other):
            return self.graph.shift(self, float(other))
        return self.graph.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return self.graph.shift(self, -float(other))
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.shift(self.graph.neg(self), float(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return self.graph.scale(self, float(other))
        return self.graph.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.neg(self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)


# ---------------------------------------------------------------------------
# op table: forward(values, attrs) -> array ; backward(g, xs, y, attrs) -> grads


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast_to(g, shape):
    # sum a gradient of a broadcast result back down to the source shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bw_sum(g, xs, y, a):
    shape = xs[0].shape
    axis = a["axis"]
    if axis is not None and not a["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def _bw_mean(g, xs, y, a):
    shape = xs[0].shape
    axis = a["axis"]
    count = xs[0].size if axis is None else shape[axis]
    if axis is not None and not a["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / count, shape).copy(),)


def _bw_concat(g, xs, y, a):
    ax = a["axis"]
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=ax))


def _bw_slice(g, xs, y, a):
    out = np.zeros_like(xs[0])
    out[a["index"]] = g
    return (out,)


def _cumsum(x, axis, exclusive):
    c = np.cumsum(x, axis=axis)
    if not exclusive:
        return c
    out = np.zeros_like(c)
    src = [slice(None)] * x.ndim
    dst = [slice(None)] * x.ndim
    src[axis] = slice(0, -1)
    dst[axis] = slice(1, None)
    out[tuple(dst)] = c[tuple(src)]
    return out


def _bw_cumsum(g, xs, y, a):
    # adjoint of a (possibly exclusive) prefix sum is the matching suffix sum
    ax, excl = a["axis"], a["exclusive"]
    rev = np.flip(g, axis=ax)
    return (np.flip(_cumsum(rev, ax, excl), axis=ax),)


def _bw_scatter(g, xs, y, a):
    return (g[a["indices"]],)


def _bw_take(g, xs, y, a):
    out = np.zeros(xs[0].shape)
    np.add.at(out, a["indices"], g)
    return (out,)


def _fw_scatter(x, a):
    out = np.zeros((a["size"],) + x.shape[1:])
    out[a["indices"]] = x
    return out


def composite_weights(alpha: np.ndarray) -> np.ndarray:
    """Front-to-back weights along the last axis plus the final transmittance.

    ``alpha`` is ``(..., N)``; the result is ``(..., N + 1)`` holding ``w_0..w_{N-1}``
    and ``T_N``. The transmittance follows ``T_{i+1} = T_i - T_i * alpha_i`` and
    each weight is re-derived as ``T_i - T_{i+1}``. That subtraction is exact
    in floating point (one operand is always within a factor two of the
    other), so the weights telescope: their exact sum is ``1 - T_N``.
    """
    out = np.empty(alpha.shape[:-1] + (alpha.shape[-1] + 1,))
    T = np.ones(alpha.shape[:-1])
    for i in range(alpha.shape[-1]):
        nxt = T - T * alpha[..., i]
        out[..., i] = T - nxt
        T = nxt
    out[..., -1] = T
    return out


def _bw_composite(g, xs, y, a):
    # reverse sweep: G_i = dL/dT_i, with w_i = T_i a_i and T_{i+1} = T_i (1 - a_i)
    alpha = xs[0]
    n = alpha.shape[-1]
    T = np.empty_like(alpha)
    T[..., 0] = 1.0
    for i in range(1, n):
        T[..., i] = T[..., i - 1] - y[..., i - 1]
    ga = np.empty_like(alpha)
    G = g[..., n].copy()
    for i in range(n - 1, -1, -1):
        ga[..., i] = T[..., i] * (g[..., i] - G)
        G = g[..., i] * alpha[..., i] + G * (1.0 - alpha[..., i])
    return (ga,)


def _bw_clip(g, xs, y, a):
    x = xs[0]
    return (g * ((x >= a["lo"]) & (x <= a["hi"])),)


OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (lambda v, a: v[0] @ v[1], lambda g, x, y, a: (g @ x[1].T, x[0].T @ g)),
    "add": (lambda v, a: v[0] + v[1], lambda g, x, y, a: (g, g)),
    "sub": (lambda v, a: v[0] - v[1], lambda g, x, y, a: (g, -g)),
    "mul": (lambda v, a: v[0] * v[1], lambda g, x, y, a: (g * x[1], g * x[0])),
    "neg": (lambda v, a: -v[0], lambda g, x, y, a: (-g,)),
    "scale": (lambda v, a: v[0] * a["c"], lambda g, x, y, a: (g * a["c"],)),
    "shift": (lambda v, a: v[0] + a["c"], lambda g, x, y, a: (g,)),
    "sin": (lambda v, a: np.sin(v[0]), lambda g, x, y, a: (g * np.cos(x[0]),)),
    "cos": (lambda v, a: np.cos(v[0]), lambda g, x, y, a: (-g * np.sin(x[0]),)),
    "exp": (lambda v, a: np.exp(v[0]), lambda g, x, y, a: (g * y,)),
    "log": (lambda v, a: np.log(v[0]), lambda g, x, y, a: (g / x[0],)),
    "softplus": (lambda v, a: _softplus(v[0]), lambda g, x, y, a: (g * _sigmoid(x[0]),)),
    "sigmoid": (lambda v, a: _sigmoid(v[0]), lambda g, x, y, a: (g * y * (1.0 - y),)),
    # max(x, s*x) equals the leaky relu for 0 <= s <= 1 (enforced at build time)
    "leaky_relu": (
        lambda v, a: np.maximum(v[0], a["slope"] * v[0]),
        lambda g, x, y, a: (np.where(x[0] > 0, g, a["slope"] * g),),
    ),
    "square": (lambda v, a: v[0] * v[0], lambda g, x, y, a: (2.0 * g * x[0],)),
    "clip": (lambda v, a: np.clip(v[0], a["lo"], a["hi"]), _bw_clip),
    "sum": (lambda v, a: np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"]), _bw_sum),
    "mean": (lambda v, a: np.mean(v[0], axis=a["axis"], keepdims=a["keepdims"]), _bw_mean),
    "concat": (lambda v, a: np.concatenate(v, axis=a["axis"]), _bw_concat),
    "slice": (lambda v, a: v[0][a["index"]].copy(), _bw_slice),
    "broadcast": (
        lambda v, a: np.broadcast_to(v[0], a["shape"]).copy(),
        lambda g, x, y, a: (_unbroadcast_to(g, x[0].shape),),
    ),
    "reshape": (
        lambda v, a: v[0].reshape(a["shape"]),
        lambda g, x, y, a: (g.reshape(x[0].shape),),
    ),
    "transpose": (
        lambda v, a: np.ascontiguousarray(np.transpose(v[0], a["axes"])),
        lambda g, x, y, a: (np.ascontiguousarray(np.transpose(g, np.argsort(a["axes"]))),),
    ),
    "cumsum": (lambda v, a: _cumsum(v[0], a["axis"], a["exclusive"]), _bw_cumsum),
    "take": (lambda v, a: v[0][a["indices"]], _bw_take),
    "scatter": (lambda v, a: _fw_scatter(v[0], a), _bw_scatter),
    "composite": (lambda v, a: composite_weights(v[0]), _bw_composite),
}

LEAF_OPS = ("input", "param", "const")


class Evaluation:
    """Values of every node from one ``Graph.forward`` call (single owner)."""

    def __init__(self, graph: "Graph", values: list[np.ndarray]):
        self.graph = graph
        self.values = values

    def __getitem__(self, key) -> np.ndarray:
        if isinstance(key, Node):
            return self.values[key.id]
        return self.values[self.graph.outputs[key]]

    @property
    def outputs(self) -> dict[str, np.ndarray]:
        return {k: self.values[i] for k, i in self.graph.outputs.items()}


class Graph:
    """Op records in topological order plus named leaves."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self.check_finite = check_finite

    # -- construction -----------------------------------------------------

    def _push(self, op, inputs, shape, attrs=None, name=None) -> Node:
        node = Node(self, len(self.nodes), op, tuple(n.id for n in inputs), _as_shape(shape), attrs or {}, name)
        self.nodes.append(node)
        return node

    def _check(self, node: Node) -> Node:
        if not isinstance(node, Node) or node.graph is not self:
            raise GraphError(f"{node!r} is not a node of this graph")
        return node

    def _leaf(self, kind, name, shape) -> Node:
        if name in self.leaves:
            raise GraphError(f"duplicate leaf name {name!r}")
        node = self._push(kind, (), shape, name=name)
        self.leaves[name] = node.id
        return node

    def input(self, name: str, shape) -> Node:
        return self._leaf("input", name, shape)

    def param(self, name: str, shape) -> Node:
        return self._leaf("param", name, shape)

    def const(self, value) -> Node:
        value = np.asarray(value, dtype=DTYPE)
        return self._push("const", (), value.shape, {"value": value})

    def output(self, name: str, node: Node) -> Node:
        self.outputs[name] = self._check(node).id
        return node

    @property
    def parameters(self) -> dict[str, tuple[int, ...]]:
        return {k: self.nodes[i].shape for k, i in self.leaves.items() if self.nodes[i].op == "param"}

    def _binary(self, op, a, b) -> Node:
        a, b = self._check(a), self._check(b)
        if a.shape != b.shape:
            raise GraphError(f"{op} node #{len(self.nodes)}: shape mismatch {a.shape} vs {b.shape}")
        return self._push(op, (a, b), a.shape)

    def _unary(self, op, x, **attrs) -> Node:
        x = self._check(x)
        return self._push(op, (x,), x.shape, attrs)

    def add(self, a, b):
        return self._binary("add", a, b)

    def sub(self, a, b):
        return self._binary("sub", a, b)

    def mul(self, a, b):
        return self._binary("mul", a, b)

    def matmul(self, a, b) -> Node:
        a, b = self._check(a), self._check(b)
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise GraphError(f"matmul node #{len(self.nodes)}: incompatible shapes {a.shape} @ {b.shape}")
        return self._push("matmul", (a, b), (a.shape[0], b.shape[1]))

    def neg(self, x):
        return self._unary("neg", x)

    def scale(self, x, c: float):
        return self._unary("scale", x, c=float(c))

    def shift(self, x, c: float):
        return self._unary("shift", x, c=float(c))

    def sin(self, x):
        return self._unary("sin", x)

    def cos(self, x):
        return self._unary("cos", x)

    def exp(self, x):
        return self._unary("exp", x)

    def log(self, x):
        return self._unary("log", x)

    def softplus(self, x):
        return self._unary("softplus", x)

    def sigmoid(self, x):
        return self._unary("sigmoid", x)

    def leaky_relu(self, x, slope: float = 0.2):
        if not 0.0 <= slope <= 1.0:
            raise GraphError(f"leaky_relu slope must lie in [0, 1], got {slope}")
        return self._unary("leaky_relu", x, slope=float(slope))

    def square(self, x):
        return self._unary("square", x)

    def clip(self, x, lo: float, hi: float):
        return self._unary("clip", x, lo=float(lo), hi=float(hi))

    def _reduce(self, op, x, axis, keepdims):
        x = self._check(x)
        if axis is None:
            shape = (1,) * len(x.shape) if keepdims else ()
        else:
            axis = axis % len(x.shape)
            shape = list(x.shape)
            if keepdims:
                shape[axis] = 1
            else:
                del shape[axis]
        return self._push(op, (x,), shape, {"axis": axis, "keepdims": keepdims})

    def sum(self, x, axis: int | None = None, keepdims: bool = False):
        return self._reduce("sum", x, axis, keepdims)

    def mean(self, x, axis: int | None = None, keepdims: bool = False):
        return self._reduce("mean", x, axis, keepdims)

    def concat(self, xs: Sequence[Node], axis: int = -1) -> Node:
        xs = [self._check(x) for x in xs]
        ndim = len(xs[0].shape)
        axis = axis % ndim
        for x in xs[1:]:
            if len(x.shape) != ndim or any(
                s != t for i, (s, t) in enumerate(zip(x.shape, xs[0].shape)) if i != axis
            ):
                raise GraphError(
                    f"concat node #{len(self.nodes)}: incompatible shapes {[x.shape for x in xs]} on axis {axis}"
                )
        shape = list(xs[0].shape)
        shape[axis] = sum(x.shape[axis] for x in xs)
        return self._push("concat", xs, shape, {"axis": axis})

    def slice(self, x, index) -> Node:
        x = self._check(x)
        if not isinstance(index, tuple):
            index = (index,)
        if any(not isinstance(i, slice) for i in index):
            raise GraphError("slice accepts basic slices only")
        shape = np.empty(x.shape, dtype=np.bool_)[index].shape
        return self._push("slice", (x,), shape, {"index": index})

    def broadcast(self, x, shape) -> Node:
        x = self._check(x)
        shape = _as_shape(shape)
        try:
            np.broadcast_shapes(x.shape, shape)
        except ValueError as exc:
            raise GraphError(f"broadcast node #{len(self.nodes)}: cannot broadcast {x.shape} to {shape}") from exc
        if np.broadcast_shapes(x.shape, shape) != shape:
            raise GraphError(f"broadcast node #{len(self.nodes)}: cannot broadcast {x.shape} to {shape}")
        return self._push("broadcast", (x,), shape, {"shape": shape})

    def reshape(self, x, shape) -> Node:
        x = self._check(x)
        shape = _as_shape(shape)
        if int(np.prod(shape)) != int(np.prod(x.shape)):
            raise GraphError(f"reshape node #{len(self.nodes)}: {x.shape} -> {shape} changes size")
        return self._push("reshape", (x,), shape, {"shape": shape})

    def transpose(self, x, axes: Sequence[int]) -> Node:
        x = self._check(x)
        axes = tuple(int(a) for a in axes)
        if sorted(axes) != list(range(len(x.shape))):
            raise GraphError(f"transpose node #{len(self.nodes)}: bad axes {axes} for {x.shape}")
        return self._push("transpose", (x,), tuple(x.shape[a] for a in axes), {"axes": axes})

    def cumsum(self, x, axis: int = -1, exclusive: bool = False) -> Node:
        x = self._check(x)
        return self._push("cumsum", (x,), x.shape, {"axis": axis % len(x.shape), "exclusive": bool(exclusive)})

    def take(self, x, indices) -> Node:
        """Rows of ``x`` at ``indices`` (axis 0)."""
        x = self._check(x)
        indices = np.asarray(indices, dtype=np.intp)
        return self._push("take", (x,), (len(indices),) + x.shape[1:], {"indices": indices})

    def scatter(self, x, indices, size: int) -> Node:
        """Place rows of ``x`` at ``indices`` of a zero tensor with ``size`` rows."""
        x = self._check(x)
        indices = np.asarray(indices, dtype=np.intp)
        if len(indices) != x.shape[0]:
            raise GraphError(f"scatter node #{len(self.nodes)}: {len(indices)} indices for {x.shape[0]} rows")
        if len(np.unique(indices)) != len(indices):
            raise GraphError("scatter indices must be unique")
        return self._push("scatter", (x,), (int(size),) + x.shape[1:], {"indices": indices, "size": int(size)})

    def composite(self, alpha) -> Node:
        """Compositing weights along the last axis; see :func:`composite_weights`."""
        alpha = self._check(alpha)
        return self._push("composite", (alpha,), alpha.shape[:-1] + (alpha.shape[-1] + 1,))

    # -- evaluation -------------------------------------------------------

    def forward(self, bindings: Mapping[str, np.ndarray]) -> Evaluation:
        values: list[np.ndarray] = [None] * len(self.nodes)  # type: ignore[list-item]
        for node in self.nodes:
            if node.op in ("input", "param"):
                if node.name not in bindings:
                    raise GraphError(f"leaf {node.name!r} is not bound")
                v = np.asarray(bindings[node.name], dtype=DTYPE)
                if v.shape != node.shape:
                    raise GraphError(f"leaf {node.name!r}: bound shape {v.shape}, declared {node.shape}")
            elif node.op == "const":
                v = node.attrs["value"]
            else:
                fw = OPS[node.op][0]
                v = fw([values[i] for i in node.inputs], node.attrs)
            values[node.id] = v
        if self.check_finite:
            self._check_values(values)
        return Evaluation(self, values)

    def _check_values(self, values):
        for node, v in zip(self.nodes, values):
            # a sum is cheaper than an elementwise scan and is non-finite
            # whenever an entry is; overflow of the sum alone is re-checked
            if v.size and np.isfinite(np.sum(v)):
                continue
            if not np.isfinite(v).all():
                src = ", ".join(f"#{i} {self.nodes[i].op}" for i in node.inputs)
                raise GraphError(f"non-finite value at node {node!r} (inputs: {src or 'leaf'})")

    def backward(
        self,
        ev: Evaluation,
        output: Node | str,
        wrt: Iterable[str] | None = None,
    ) -> dict[str, np.ndarray]:
        """Gradients of a scalar output with respect to the named leaves.

        ``wrt`` defaults to every param leaf. Only nodes on a path from one of
        the requested leaves to ``output`` are visited.
        """
        out = self.nodes[self.outputs[output]] if isinstance(output, str) else self._check(output)
        if int(np.prod(out.shape)) != 1:
            raise GraphError(f"backward needs a scalar output, got {out!r}")
        if wrt is None:
            wrt = list(self.parameters)
        wrt = list(wrt)
        for name in wrt:
            if name not in self.leaves:
                raise GraphError(f"unknown leaf {name!r}")

        # nodes that depend on a requested leaf
        live = np.zeros(len(self.nodes), dtype=bool)
        for name in wrt:
            live[self.leaves[name]] = True
        for node in self.nodes:
            if not live[node.id] and any(live[i] for i in node.inputs):
                live[node.id] = True

        grads: dict[int, np.ndarray] = {out.id: np.ones(out.shape)}
        for node in reversed(self.nodes[: out.id + 1]):
            g = grads.pop(node.id, None) if node.op not in LEAF_OPS else grads.get(node.id)
            if g is None or node.op in LEAF_OPS:
                continue
            xs = [ev.values[i] for i in node.inputs]
            if node.op == "matmul":
                # skip the (large) product whose result would be discarded
                a, b = node.inputs
                parts = (g @ xs[1].T if live[a] else None, xs[0].T @ g if live[b] else None)
            else:
                parts = OPS[node.op][1](g, xs, ev.values[node.id], node.attrs)
            for i, gi in zip(node.inputs, parts):
                if not live[i]:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        return {name: grads.get(self.leaves[name], np.zeros(self.nodes[self.leaves[name]].shape)) for name in wrt}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new arrays for the names in ``grads``.

    Parameters absent from ``grads`` are passed through untouched.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise GraphError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ---------------------------------------------------------------------------
# NFSP checkpoints

_NFSP_MAGIC = b"NFSP"
_NFSP_VERSION = 1


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [_NFSP_MAGIC, struct.pack("<II", _NFSP_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # keeps 0-d tensors 0-d; tobytes is C order
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != _NFSP_MAGIC:
        raise ValueError(f"{path}: not an NFSP checkpoint (magic {data[:4]!r})")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _NFSP_VERSION:
        raise ValueError(f"{path}: unsupported NFSP version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims).astype(DTYPE)
        pos += 8 * size
    return out
