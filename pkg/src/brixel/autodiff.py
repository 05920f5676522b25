"""Tape-based reverse-mode differentiation over numpy arrays.

The op set is the minimum closed over the backbone, the refiner/head and the
three distillation losses: elementwise arithmetic, (broadcasting) matmul,
2-d convolution with padding helpers, pooling/upsampling/pixel-shuffle,
reductions, and the usual nonlinearities. Composite ops (softmax, layer_norm,
gelu, linear resize) are built from the primitives so their gradients come
for free.

A :class:`Tape` is confined to one training step on one thread; the graph is
rebuilt every step and consumed by a single ``backward`` call. Values are
never mutated in place after recording, and gradient accumulation is plain
summation, so two identical forward+backward passes produce bit-identical
gradients in a single-threaded run.
"""

from __future__ import annotations

import math
import threading

import numpy as np

_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tape:
    """Records grad-requiring nodes of one forward pass in creation order.

    Creation order is a topological order of the graph, so ``backward``
    visits nodes in reverse creation order exactly once.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = None
        return False

    def backward(self, root: "Node") -> None:
        """Accumulate gradients of a scalar root into every reachable leaf."""
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward call")
        if root.value.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
        self._consumed = True
        if not root.requires_grad:
            return
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            for parent, vjp in node.parents:
                if not parent.requires_grad:
                    continue
                g = vjp(node.grad)
                parent.grad = g if parent.grad is None else parent.grad + g
            node.parents = ()


class Node:
    """One value in the computation graph.

    ``detached`` nodes carry a value but propagate no gradient to whatever
    produced them.
    """

    __slots__ = ("value", "requires_grad", "parents", "detached", "grad", "name")

    def __init__(self, value: np.ndarray, requires_grad: bool = False,
                 parents=(), detached: bool = False, name: str | None = None):
        self.value = value
        self.requires_grad = requires_grad
        self.parents = parents
        self.detached = detached
        self.grad: np.ndarray | None = None
        self.name = name

    def __repr__(self):
        return f"<Node shape={self.value.shape} dtype={self.value.dtype} rg={self.requires_grad}>"

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    # -- arithmetic sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape / reduction sugar ----------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def abs(self):
        return absolute(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def square(self):
        return square(self)


def constant(value, dtype=None) -> Node:
    """Wrap an array as a graph constant (no gradient ever flows into it)."""
    arr = np.asarray(value, dtype=dtype)
    return Node(arr)


def parameter(value: np.ndarray, name: str | None = None) -> Node:
    """Wrap an array as a trainable leaf; gradients accumulate in ``.grad``."""
    return Node(np.asarray(value), requires_grad=True, name=name)


def detach(x: Node) -> Node:
    """Same value, gradient flow severed."""
    x = as_node(x)
    return Node(x.value, requires_grad=False, parents=(), detached=True)


def as_node(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.value.dtype if like is not None else None
    return constant(x, dtype=dtype)


def _record(value: np.ndarray, parents) -> Node:
    """Create an op output; recorded on the tape only if a gradient can reach it."""
    tape = _active_tape()
    rg = tape is not None and any(p.requires_grad for p, _ in parents)
    if not rg:
        return Node(value)
    node = Node(value, requires_grad=True, parents=tuple(parents))
    tape.nodes.append(node)
    return node


def _check_same_dtype(a: Node, b: Node, op: str):
    if a.value.dtype != b.value.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.value.dtype} vs {b.value.dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def _coerce_pair(a, b, op):
    an = a if isinstance(a, Node) else None
    bn = b if isinstance(b, Node) else None
    if an is None and bn is None:
        an, bn = constant(a), constant(b)
    else:
        an = an if an is not None else as_node(a, like=bn)
        bn = bn if bn is not None else as_node(b, like=an)
    if an.value.dtype != bn.value.dtype:
        # numpy scalars sneak in as f64; fold python/0-d scalars to the array dtype
        if bn.value.ndim == 0 and not bn.requires_grad:
            bn = constant(bn.value, dtype=an.value.dtype)
        elif an.value.ndim == 0 and not an.requires_grad:
            an = constant(an.value, dtype=bn.value.dtype)
        else:
            _check_same_dtype(an, bn, op)
    return an, bn


def add(a, b) -> Node:
    a, b = _coerce_pair(a, b, "add")
    return _record(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(g, b.value.shape)),
    ])


def sub(a, b) -> Node:
    a, b = _coerce_pair(a, b, "sub")
    return _record(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(-g, b.value.shape)),
    ])


def mul(a, b) -> Node:
    a, b = _coerce_pair(a, b, "mul")
    return _record(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
    ])


def div(a, b) -> Node:
    a, b = _coerce_pair(a, b, "div")
    out = a.value / b.value
    return _record(out, [
        (a, lambda g: _unbroadcast(g / b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.value, b.value.shape)),
    ])


def neg(a) -> Node:
    a = as_node(a)
    return _record(-a.value, [(a, lambda g: -g)])


def absolute(a) -> Node:
    a = as_node(a)
    return _record(np.abs(a.value), [(a, lambda g: g * np.sign(a.value))])


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise FloatingPointError("log of non-positive value")
    return _record(np.log(a.value), [(a, lambda g: g / a.value)])


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _record(out, [(a, lambda g: g * out)])


def sqrt(a) -> Node:
    a = as_node(a)
    out = np.sqrt(a.value)
    return _record(out, [(a, lambda g: g * (0.5 / out))])


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _record(out, [(a, lambda g: g * (1.0 - out * out))])


def square(a) -> Node:
    a = as_node(a)
    return _record(a.value * a.value, [(a, lambda g: g * (2.0 * a.value))])


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = _coerce_pair(a, b, "matmul")
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.value.shape} @ {b.value.shape}")
    out = a.value @ b.value

    def vjp_a(g):
        return _unbroadcast(g @ b.value.swapaxes(-1, -2), a.value.shape)

    def vjp_b(g):
        return _unbroadcast(a.value.swapaxes(-1, -2) @ g, b.value.shape)

    return _record(out, [(a, vjp_a), (b, vjp_b)])


def reshape(a, shape) -> Node:
    a = as_node(a)
    out = a.value.reshape(shape)
    return _record(out, [(a, lambda g: g.reshape(a.value.shape))])


def transpose(a, axes) -> Node:
    a = as_node(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(a.value.transpose(axes)),
                   [(a, lambda g: np.ascontiguousarray(g.transpose(inv)))])


def concat(parts, axis: int = 0) -> Node:
    parts = [as_node(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.value.shape[axis] for p in parts])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return np.ascontiguousarray(g[tuple(idx)])

        return vjp

    return _record(out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def narrow(a, axis: int, start: int, length: int) -> Node:
    """Contiguous slice along one axis."""
    a = as_node(a)
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[idx] = g
        return out

    return _record(np.ascontiguousarray(a.value[idx]), [(a, vjp)])


def reduce_sum(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).astype(a.value.dtype, copy=True)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.value.shape).astype(a.value.dtype, copy=True)

    return _record(np.asarray(out), [(a, vjp)])


def reduce_mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    out = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def vjp(g):
        if axis is None:
            gg = np.broadcast_to(g, a.value.shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            gg = np.broadcast_to(gg, a.value.shape)
        return (gg / count).astype(a.value.dtype, copy=False)

    return _record(np.asarray(out), [(a, vjp)])


# ---------------------------------------------------------------------------
# Spatial ops (4-d layout: batch, channels, height, width)
# ---------------------------------------------------------------------------

def pad2d(a, pad: int, mode: str = "zero") -> Node:
    """Pad the last two axes; ``mode`` is "zero" or "replicate"."""
    a = as_node(a)
    if pad == 0:
        return a
    x = a.value
    h, w = x.shape[-2], x.shape[-1]
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    if mode == "zero":
        out = np.pad(x, width)

        def vjp(g):
            return np.ascontiguousarray(g[..., pad:pad + h, pad:pad + w])

    elif mode == "replicate":
        out = np.pad(x, width, mode="edge")

        def vjp(g):
            core = g[..., pad:pad + h, pad:pad + w].copy()
            top = g[..., :pad, pad:pad + w].sum(axis=-2)
            bot = g[..., pad + h:, pad:pad + w].sum(axis=-2)
            left = g[..., pad:pad + h, :pad].sum(axis=-1)
            right = g[..., pad:pad + h, pad + w:].sum(axis=-1)
            core[..., 0, :] += top
            core[..., -1, :] += bot
            core[..., :, 0] += left
            core[..., :, -1] += right
            core[..., 0, 0] += g[..., :pad, :pad].sum(axis=(-1, -2))
            core[..., 0, -1] += g[..., :pad, pad + w:].sum(axis=(-1, -2))
            core[..., -1, 0] += g[..., pad + h:, :pad].sum(axis=(-1, -2))
            core[..., -1, -1] += g[..., pad + h:, pad + w:].sum(axis=(-1, -2))
            return core

    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    return _record(out, [(a, vjp)])


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(dcols: np.ndarray, xshape, kh: int, kw: int, stride: int, ho: int, wo: int):
    n, c, h, w = xshape
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    dx = np.zeros(xshape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    return dx


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0, pad_mode: str = "zero") -> Node:
    """2-d convolution (cross-correlation), input (N,Cin,H,W), weight (Cout,Cin,kh,kw)."""
    x = as_node(x)
    w = as_node(w)
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    if x.value.shape[1] != w.value.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input {x.value.shape[1]} vs weight {w.value.shape[1]}")
    if padding:
        x = pad2d(x, padding, pad_mode)
    cout, cin, kh, kw = w.value.shape
    if x.value.shape[-2] < kh or x.value.shape[-1] < kw:
        raise ValueError(f"conv2d input {x.value.shape} smaller than kernel ({kh}x{kw})")
    cols, ho, wo = _im2col(x.value, kh, kw, stride)
    n = x.value.shape[0]
    w_flat = w.value.reshape(cout, cin * kh * kw)
    y = (w_flat @ cols).reshape(n, cout, ho, wo)

    xshape = x.value.shape

    def vjp_x(g):
        gy = g.reshape(n, cout, ho * wo)
        dcols = w_flat.T @ gy
        return _col2im(dcols, xshape, kh, kw, stride, ho, wo)

    def vjp_w(g):
        gy = g.reshape(n, cout, ho * wo)
        dw = (gy @ cols.swapaxes(1, 2)).sum(axis=0)
        return dw.reshape(w.value.shape)

    parents = [(x, vjp_x), (w, vjp_w)]
    if b is not None:
        b = as_node(b)
        if b.value.shape != (cout,):
            raise ValueError(f"conv2d bias must have shape ({cout},), got {b.value.shape}")
        y = y + b.value.reshape(1, cout, 1, 1)
        parents.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return _record(y, parents)


def avg_pool2d(a, k: int) -> Node:
    a = as_node(a)
    n, c, h, w = a.value.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: spatial size {(h, w)} not divisible by {k}")
    out = a.value.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def vjp(g):
        g = g[:, :, :, None, :, None] / (k * k)
        return np.broadcast_to(g, (n, c, h // k, k, w // k, k)).reshape(n, c, h, w).astype(
            a.value.dtype, copy=False)

    return _record(out, [(a, vjp)])


def upsample_nearest(a, factor: int) -> Node:
    a = as_node(a)
    out = a.value.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def vjp(g):
        s = g.shape
        g = g.reshape(*s[:-2], s[-2] // factor, factor, s[-1] // factor, factor)
        return g.sum(axis=(-3, -1))

    return _record(out, [(a, vjp)])


def pixel_shuffle(a, r: int) -> Node:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r), depth-to-space."""
    a = as_node(a)
    n, crr, h, w = a.value.shape
    if crr % (r * r):
        raise ValueError(f"pixel_shuffle: channel count {crr} not divisible by {r * r}")
    c = crr // (r * r)
    out = (a.value.reshape(n, c, r, r, h, w)
           .transpose(0, 1, 4, 2, 5, 3)
           .reshape(n, c, h * r, w * r))

    def vjp(g):
        return np.ascontiguousarray(
            g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, crr, h, w))

    return _record(np.ascontiguousarray(out), [(a, vjp)])


# ---------------------------------------------------------------------------
# Composites
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Node:
    x = as_node(x)
    shift = constant(x.value.max(axis=axis, keepdims=True))  # constant shift; exact gradient
    e = exp(sub(x, shift))
    return div(e, reduce_sum(e, axis=axis, keepdims=True))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Node:
    """Normalize over the last axis, then scale and shift."""
    x = as_node(x)
    mu = reduce_mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = reduce_mean(square(xc), axis=-1, keepdims=True)
    xn = div(xc, sqrt(add(var, eps)))
    return add(mul(xn, gamma), beta)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Node:
    """Tanh-form gaussian error linear unit (primitive; analytic gradient)."""
    x = as_node(x)
    v = x.value
    inner = _GELU_C * (v + 0.044715 * v * v * v)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def vjp(g):
        sech2 = 1.0 - th * th
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return g * (0.5 * (1.0 + th) + 0.5 * v * sech2 * d_inner)

    return _record(out.astype(v.dtype, copy=False), [(x, vjp)])


def resize_linear(x, out_h: int, out_w: int, antialias: bool = False) -> Node:
    """Differentiable separable resize of the last two axes.

    Uses the same resampling matrices as the image path, so values agree
    bit-for-bit with the non-differentiable resize.
    """
    from .tensors import resize_matrix  # local import to keep modules decoupled

    x = as_node(x)
    h, w = x.value.shape[-2], x.value.shape[-1]
    dtype = x.value.dtype
    out = x
    if h != out_h:
        wy = constant(resize_matrix(h, out_h, antialias, dtype=dtype))
        out = matmul(wy, out)
    if w != out_w:
        wx = constant(resize_matrix(w, out_w, antialias, dtype=dtype).T)
        out = matmul(out, wx)
    return out


def global_grad_norm(grads) -> float:
    """Euclidean norm over a collection of gradient arrays."""
    sq = 0.0
    for g in grads:
        sq += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return math.sqrt(sq)
