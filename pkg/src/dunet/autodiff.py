"""Minimal reverse-mode autodiff over 4-D NCHW arrays.

The engine knows exactly the operations the segmentation networks need:
convolution, 2x2 pooling, ReLU/sigmoid, channel concatenation, 2x2 transposed
convolution and the training losses. A :class:`Graph` is built once
(declaratively) and then executed many times with different feeds.

"Convolution" here is cross-correlation: the kernel is not flipped, which is
the usual deep-learning convention. The scattering module uses true
Fourier-domain convolution and does not go through this engine.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

BCE_EPS = 1e-7
DICE_SMOOTH = 1.0
LOSS_KINDS = ("bce", "dice", "bce+dice")
# im2col matrices up to this size are kept from forward for reuse in backward
COLS_CACHE_BYTES = 256 * 2 ** 20


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class GraphError(RuntimeError):
    """Raised on misuse of a graph (bad names, backward before forward...)."""


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Coerce ``x`` to a contiguous 4-D array, padding missing leading axes with 1."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim > 4:
        raise ShapeError(f"tensor rank {arr.ndim} > 4: shape {arr.shape}")
    while arr.ndim < 4:
        arr = arr[np.newaxis]
    if min(arr.shape) < 1:
        raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
    return np.ascontiguousarray(arr)


# ---------------------------------------------------------------------------
# op kernels: forward(attrs, *inputs) -> (out, ctx); backward(attrs, ctx, g) -> grads

def _same_pad(k: int) -> int:
    return (k - 1) // 2


def conv2d_forward(attrs, x, w, b=None):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got x{x.shape} w{w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: x{x.shape} vs w{w.shape}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match w{w.shape}")
    if attrs["pad"] == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"pad=same needs odd kernel, got w{w.shape}")
        pads = (_same_pad(kh), _same_pad(kw))
    else:
        pads = (0, 0)
    if h + 2 * pads[0] < kh or wd + 2 * pads[1] < kw:
        raise ShapeError(f"conv2d kernel w{w.shape} larger than input x{x.shape}")
    cols, ho, wo = _im2col(x, kh, kw, attrs["stride"], pads)
    out = w.reshape(o, -1) @ cols
    if b is not None:
        out += b[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    keep = cols if cols.nbytes <= COLS_CACHE_BYTES else None
    return np.ascontiguousarray(out), (keep, pads, ho, wo)


def _im2col(x, kh, kw, stride, pads):
    """Column matrix of shape (C*kh*kw, N*Ho*Wo); rows are (c, i, j)-major."""
    n, c, h, w = x.shape
    ph, pw = pads
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def conv2d_backward(attrs, ctx, g, x, w, b=None):
    cols, (ph, pw), ho, wo = ctx
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    stride = attrs["stride"]
    if cols is None:
        cols, _, _ = _im2col(x, kh, kw, stride, (ph, pw))
    g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
    gw = (g2 @ cols.T).reshape(w.shape)
    gb = g2.sum(axis=1) if b is not None else None
    gcols = (w.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
    gxp = np.zeros((c, n, h + 2 * ph, wd + 2 * pw), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
    gx = gxp[:, :, ph:ph + h, pw:pw + wd].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(gx), gw, gb


def pool2d_forward(attrs, x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool2d needs even H and W, got {x.shape}")
    win = (x.reshape(n, c, h // 2, 2, w // 2, 2)
           .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4))
    if attrs["kind"] == "max":
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, idx
    return win.mean(axis=-1), None


def pool2d_backward(attrs, ctx, g, x):
    n, c, h, w = x.shape
    if attrs["kind"] == "max":
        gwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, ctx[..., None], g[..., None], axis=-1)
    else:
        gwin = np.repeat((g * 0.25)[..., None], 4, axis=-1)
    gx = (gwin.reshape(n, c, h // 2, w // 2, 2, 2)
          .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))
    return (np.ascontiguousarray(gx),)


def relu_forward(attrs, x):
    return np.maximum(x, 0), None


def relu_backward(attrs, ctx, g, x):
    return (g * (x > 0),)


def sigmoid_forward(attrs, x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(attrs, ctx, g, x):
    return (g * ctx * (1.0 - ctx),)


def concat_forward(attrs, a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs equal N,H,W: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(attrs, ctx, g, a, b):
    return np.ascontiguousarray(g[:, :ctx]), np.ascontiguousarray(g[:, ctx:])


def upsample_forward(attrs, x, w, b=None):
    """2x2 stride-2 transposed convolution; ``w`` is (inC, outC, 2, 2)."""
    n, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[0] != c or w.shape[2:] != (2, 2):
        raise ShapeError(f"upsample2x weight {w.shape} incompatible with x{x.shape}")
    o = w.shape[1]
    xr = x.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
    y = (xr @ w.reshape(c, o * 4)).reshape(n, h, wd, o, 2, 2)
    y = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * wd)
    if b is not None:
        y = y + b.reshape(1, o, 1, 1)
    return np.ascontiguousarray(y), xr


def upsample_backward(attrs, ctx, g, x, w, b=None):
    n, c, h, wd = x.shape
    o = w.shape[1]
    gr = (g.reshape(n, o, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5)
          .reshape(n * h * wd, o * 4))
    gx = (gr @ w.reshape(c, o * 4).T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
    gw = (ctx.T @ gr).reshape(w.shape)
    gb = g.sum(axis=(0, 2, 3)) if b is not None else None
    return np.ascontiguousarray(gx), gw, gb


def loss_forward(attrs, pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"loss needs matching shapes: pred{pred.shape} target{target.shape}")
    # NaN passes through so a diverged run surfaces as a non-finite loss
    if np.any((pred < 0) | (pred > 1)):
        raise ValueError("loss: predictions must lie in [0, 1]; apply sigmoid first")
    kind = attrs["kind"]
    total = 0.0
    if "bce" in kind:
        p = np.clip(pred, BCE_EPS, 1 - BCE_EPS)
        total += -np.mean(target * np.log(p) + (1 - target) * np.log(1 - p))
    if "dice" in kind:
        inter, denom = _dice_terms(pred, target)
        total += 1.0 - np.mean((2 * inter + DICE_SMOOTH) / denom)
    return np.full((1, 1, 1, 1), total, dtype=pred.dtype), None


def _dice_terms(pred, target):
    axes = tuple(range(1, pred.ndim))
    inter = (pred * target).sum(axis=axes)
    denom = pred.sum(axis=axes) + target.sum(axis=axes) + DICE_SMOOTH
    return inter, denom


def loss_backward(attrs, ctx, g, pred, target):
    kind = attrs["kind"]
    scale = g.reshape(())
    gp = np.zeros_like(pred)
    if "bce" in kind:
        inside = (pred > BCE_EPS) & (pred < 1 - BCE_EPS)
        p = np.clip(pred, BCE_EPS, 1 - BCE_EPS)
        gp += inside * (-(target / p) + (1 - target) / (1 - p)) / pred.size
    if "dice" in kind:
        inter, denom = _dice_terms(pred, target)
        shape = (-1,) + (1,) * (pred.ndim - 1)
        num = (2 * inter + DICE_SMOOTH).reshape(shape)
        den = denom.reshape(shape)
        gp += -(2 * target * den - num) / den ** 2 / pred.shape[0]
    return gp * scale, None


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    backward: Callable


OPS: dict[str, OpDef] = {
    "conv2d": OpDef(conv2d_forward, conv2d_backward),
    "pool2d": OpDef(pool2d_forward, pool2d_backward),
    "relu": OpDef(relu_forward, relu_backward),
    "sigmoid": OpDef(sigmoid_forward, sigmoid_backward),
    "concat": OpDef(concat_forward, concat_backward),
    "upsample2x": OpDef(upsample_forward, upsample_backward),
    "loss": OpDef(loss_forward, loss_backward),
}


# ---------------------------------------------------------------------------
# graph

@dataclass(frozen=True)
class Node:
    id: int
    op: str  # "input", "param" or a key of OPS
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict, compare=False, hash=False)
    name: str | None = None


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray | None = None


class Graph:
    """Declarative computation graph with named inputs, parameters and outputs.

    Nodes are appended in construction order, which is a valid topological
    order since a node can only reference nodes that already exist.

    Example::

        g = Graph()
        x = g.input("x")
        w = g.param("w", (4, 1, 3, 3))
        y = g.sigmoid(g.conv2d(x, w))
        g.set_output("y", y)
        g.forward({"x": np.ones((1, 1, 8, 8))})
    """

    def __init__(self, dtype=np.float32, seed: int = 0, debug: bool = False):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.params: dict[str, Parameter] = {}
        self.inputs: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self.named: dict[str, int] = {}
        self.meta: dict = {}
        self.debug = debug
        self._rng = np.random.default_rng(seed)
        self._values: dict[int, np.ndarray] | None = None
        self._ctx: dict[int, object] = {}
        self._overridden: set[int] = set()

    # -- construction -------------------------------------------------------

    def _add(self, op, inputs=(), attrs=None, name=None) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"node {i} does not exist")
        if name is not None:
            if name in self.named:
                raise GraphError(f"duplicate node name {name!r}")
            self.named[name] = len(self.nodes)
        node = Node(len(self.nodes), op, tuple(inputs), attrs or {}, name)
        self.nodes.append(node)
        self._values = None
        return node.id

    def input(self, name: str) -> int:
        nid = self._add("input", name=name)
        self.inputs[name] = nid
        return nid

    def param(self, name: str, shape, init: str = "he_uniform", fan_in: int | None = None) -> int:
        """Create a parameter; ``he_uniform`` draws from U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            value = np.zeros(shape, dtype=self.dtype)
        elif init == "he_uniform":
            if fan_in is None:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            limit = math.sqrt(6.0 / fan_in)
            value = self._rng.uniform(-limit, limit, size=shape).astype(self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        nid = self._add("param", name=name)
        self.params[name] = Parameter(name, value)
        return nid

    def conv2d(self, x, w, b=None, pad="same", stride=1, name=None) -> int:
        if pad not in ("same", "valid"):
            raise ValueError(f"pad must be 'same' or 'valid', got {pad!r}")
        ins = (x, w) if b is None else (x, w, b)
        return self._add("conv2d", ins, {"pad": pad, "stride": int(stride)}, name)

    def pool2d(self, x, kind="max", name=None) -> int:
        if kind not in ("max", "avg"):
            raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
        return self._add("pool2d", (x,), {"kind": kind}, name)

    def relu(self, x, name=None) -> int:
        return self._add("relu", (x,), name=name)

    def sigmoid(self, x, name=None) -> int:
        return self._add("sigmoid", (x,), name=name)

    def concat_channels(self, a, b, name=None) -> int:
        return self._add("concat", (a, b), name=name)

    def upsample2x(self, x, w, b=None, name=None) -> int:
        ins = (x, w) if b is None else (x, w, b)
        return self._add("upsample2x", ins, name=name)

    def loss(self, pred, target, kind="bce+dice", name=None) -> int:
        if kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")
        return self._add("loss", (pred, target), {"kind": kind}, name)

    def set_output(self, name: str, node: int) -> None:
        self.outputs[name] = node

    # -- introspection ------------------------------------------------------

    def node_id(self, ref) -> int:
        if isinstance(ref, (int, np.integer)):
            return int(ref)
        for table in (self.outputs, self.named):
            if ref in table:
                return table[ref]
        raise GraphError(f"unknown node {ref!r}")

    def ancestors(self, ref) -> set[int]:
        seen: set[int] = set()
        stack = [self.node_id(ref)]
        while stack:
            nid = stack.pop()
            if nid not in seen:
                seen.add(nid)
                stack.extend(self.nodes[nid].inputs)
        return seen

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def validate(self) -> None:
        """Check that every parameter feeds at least one output."""
        reach: set[int] = set()
        for nid in self.outputs.values():
            reach |= self.ancestors(nid)
        orphans = [n.name for n in self.nodes if n.op == "param" and n.id not in reach]
        if orphans:
            raise GraphError(f"parameters not reachable from any output: {orphans}")

    # -- execution ----------------------------------------------------------

    def forward(self, feeds: dict, output="prob") -> np.ndarray:
        """Evaluate the subgraph needed for ``output``.

        ``feeds`` maps input names to arrays. A key naming an interior node
        overrides that node's value, which is how ablations are run.
        """
        target = self.node_id(output)
        needed = self.ancestors(target)
        overrides = {}
        for key, val in feeds.items():
            if key in self.inputs:
                continue
            if key not in self.named:
                raise GraphError(f"feed {key!r} is neither an input nor a named node")
            overrides[self.named[key]] = as_tensor(val, self.dtype)
        values: dict[int, np.ndarray] = {}
        ctx: dict[int, object] = {}
        for node in self.nodes:
            if node.id not in needed:
                continue
            if node.id in overrides:
                values[node.id] = overrides[node.id]
                continue
            if node.op == "input":
                if node.name not in feeds:
                    raise GraphError(f"missing feed for input {node.name!r}")
                values[node.id] = as_tensor(feeds[node.name], self.dtype)
            elif node.op == "param":
                values[node.id] = self.params[node.name].value
            else:
                args = [values[i] for i in node.inputs]
                out, c = OPS[node.op].forward(node.attrs, *args)
                if self.debug and not np.all(np.isfinite(out)):
                    raise FloatingPointError(f"non-finite output from {node.op} node {node.id}")
                values[node.id] = out
                ctx[node.id] = c
        self._values, self._ctx, self._overridden = values, ctx, set(overrides)
        return values[target]

    def backward(self, seed="loss", upstream=None) -> dict[str, np.ndarray]:
        """Back-propagate from a scalar node; returns grads for params and inputs.

        Parameters that do not influence ``seed`` receive zero gradients.
        ``upstream`` seeds a non-scalar node with an explicit output gradient.
        """
        sid = self.node_id(seed)
        if self._values is None or sid not in self._values:
            raise GraphError("backward called before forward on this seed")
        out_val = self._values[sid]
        if upstream is None:
            if out_val.size != 1:
                raise GraphError(f"seed must be scalar, got shape {out_val.shape}")
            upstream = np.ones_like(out_val)
        elif np.shape(upstream) != out_val.shape:
            raise ShapeError(f"upstream grad {np.shape(upstream)} != seed shape {out_val.shape}")
        grads: dict[int, np.ndarray] = {sid: np.asarray(upstream, dtype=self.dtype)}
        for node in reversed(self.nodes[: sid + 1]):
            if node.op in ("input", "param"):
                continue
            g = grads.pop(node.id, None)
            if g is None or node.id in self._overridden:
                continue
            args = [self._values[i] for i in node.inputs]
            in_grads = OPS[node.op].backward(node.attrs, self._ctx[node.id], g, *args)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        out = {}
        for name, p in self.params.items():
            g = grads.get(self.named[name])
            p.grad = np.zeros_like(p.value) if g is None else g.astype(self.dtype, copy=False)
            out[name] = p.grad
        for name, nid in self.inputs.items():
            if nid in grads:
                out[name] = grads[nid]
        return out

    # -- state --------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Load parameter values, reporting every mismatch at once."""
        problems = []
        for name, p in self.params.items():
            if name not in state:
                problems.append(f"{name}: missing")
            elif np.size(state[name]) != p.value.size or (
                    _pad4(np.shape(state[name])) != _pad4(p.value.shape)):
                problems.append(f"{name}: shape {np.shape(state[name])} != {p.value.shape}")
        problems += [f"{name}: unexpected" for name in state if name not in self.params]
        if problems:
            raise ShapeError("incompatible checkpoint: " + "; ".join(problems))
        for name, p in self.params.items():
            p.value = np.asarray(state[name], dtype=self.dtype).reshape(p.value.shape).copy()
        self._values = None


def _pad4(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    return (1,) * (4 - len(shape)) + shape
