"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tensor` wraps a contiguous ``numpy`` float64 array and an optional
node on a recording :class:`Tape`.  Operations compute their result eagerly
with numpy; when any input is attached to a tape, the output is attached too
and a backward rule is recorded.  ``Tape.backward(root)`` walks the recorded
operations once, in reverse creation order (creation order is topological by
construction), and accumulates gradients onto the watched leaf tensors.

A tape lives for a single training step and is discarded after backward.
Higher-order derivatives are not supported.  Everything is float64: small
log-likelihood values make single precision too lossy for this workload.

``conv2d`` uses stride 1 and zero "same" padding, so three 2x2 max-pool
layers map a 28x28 image to 14x14, 7x7 and finally 3x3 (floor division at
odd sizes).
"""

from __future__ import annotations

import math

import numpy as np

from .container import read_container, write_container

__all__ = [
    "Tensor",
    "Tape",
    "AdamW",
    "AutodiffError",
    "as_tensor",
    "values",
    "add", "sub", "mul", "div", "neg", "matmul",
    "exp", "log", "sqrt", "square", "relu", "clip",
    "sum_", "mean_", "logsumexp", "softmax", "log_softmax",
    "reshape", "transpose", "concat", "gather", "take_along", "broadcast_to",
    "conv2d", "maxpool2x2",
    "save_checkpoint", "load_checkpoint",
]

_LOG_2PI = math.log(2.0 * math.pi)


class AutodiffError(RuntimeError):
    """Raised for misuse of the tape or malformed operands."""


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Dense float64 array with an optional handle into a recording tape."""

    __slots__ = ("data", "node", "grad")

    def __init__(self, data, node=None):
        self.data = _asarray(data)
        self.node = node
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values with no tape attachment."""
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = " (on tape)" if self.node is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; all dispatch to the module-level ops
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

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("tape", "edges", "grad")

    def __init__(self, tape, edges=()):
        self.tape = tape
        self.edges = edges  # sequence of (parent_node, vjp_fn)
        self.grad = None


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._watched: list[Tensor] = []
        self._consumed = False

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False

    def __len__(self):
        return len(self.nodes)

    def watch(self, *tensors: Tensor) -> None:
        """Register leaf tensors; their gradients accumulate into ``.grad``."""
        for t in tensors:
            if t.node is not None:
                if t.node.tape is self:
                    continue
                raise AutodiffError("tensor is already attached to a different tape")
            node = _Node(self)
            self.nodes.append(node)
            t.node = node
            self._watched.append(t)

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for watched leaves.

        ``root`` must be a scalar (size-1) tensor.  Each recorded operation
        is visited exactly once.  A tape supports a single backward pass.
        """
        if self._consumed:
            raise AutodiffError("tape has already been used for a backward pass")
        self._consumed = True
        if root.size != 1:
            raise AutodiffError(f"backward root must be scalar, got shape {root.shape}")
        if root.node is None:
            return  # root does not depend on any watched tensor; all grads zero
        if root.node.tape is not self:
            raise AutodiffError("root tensor belongs to a different tape")

        root.node.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or not node.edges:
                continue  # leaf gradients are harvested below
            for parent, vjp in node.edges:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib
            node.grad = None

        for t in self._watched:
            g = t.node.grad
            if g is not None:
                t.grad = g if t.grad is None else t.grad + g
                t.node.grad = None

    def close(self) -> None:
        """Detach watched tensors and drop all recorded operations."""
        for t in self._watched:
            t.node = None
        self._watched.clear()
        self.nodes.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def values(x) -> np.ndarray:
    """The plain ndarray behind ``x`` whether or not it is a Tensor."""
    return x.data if isinstance(x, Tensor) else _asarray(x)


def _record(out_data, inputs, vjps) -> Tensor:
    """Wrap ``out_data``; record backward edges for tape-attached inputs."""
    tape = None
    for t in inputs:
        if isinstance(t, Tensor) and t.node is not None:
            if tape is None:
                tape = t.node.tape
            elif t.node.tape is not tape:
                raise AutodiffError("operands are attached to different tapes")
    if tape is None:
        return Tensor(out_data)
    edges = tuple(
        (t.node, vjp)
        for t, vjp in zip(inputs, vjps)
        if isinstance(t, Tensor) and t.node is not None
    )
    node = _Node(tape, edges)
    tape.nodes.append(node)
    return Tensor(out_data, node)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over axes that numpy broadcasting expanded from ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules)

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _record(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _record(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _record(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), (lambda g: -g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise AutodiffError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _record(
        out,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    return _record(out, (a,), (lambda g: g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), (lambda g: g / (2.0 * out),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), (lambda g: g * (2.0 * a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _record(out, (a,), (lambda g: g * (a.data > 0.0),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Hard clip; gradient is zero outside the open interval (lo, hi)."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)
    return _record(out, (a,), (lambda g: g * mask,))


# ---------------------------------------------------------------------------
# reductions

def _restore_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _record(
        out, (a,), (lambda g: _restore_reduced(g, a.data.shape, axis, keepdims).copy(),)
    )


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]
    return _record(
        out,
        (a,),
        (lambda g: _restore_reduced(g, a.data.shape, axis, keepdims) / count,),
    )


def logsumexp(a, axis=None, keepdims=False) -> Tensor:
    """Overflow-safe log-sum-exp; an all ``-inf`` slice yields ``-inf``."""
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(a.data - m), axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out_k = m + np.log(s)
    if keepdims:
        out = out_k
    elif axis is None:
        out = out_k.reshape(())
    else:
        out = np.squeeze(out_k, axis=axis)

    def vjp(g):
        gk = g if keepdims or axis is None else np.expand_dims(g, axis)
        w = np.exp(a.data - out_k)
        w = np.where(np.isfinite(out_k), w, 0.0)
        return gk * w

    return _record(out, (a,), (vjp,))


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return out * (g - dot)

    return _record(out, (a,), (vjp,))


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# shape and indexing

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _record(out, (a,), (lambda g: g.reshape(a.data.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _record(out, (a,), (lambda g: g.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    return _record(out, (a,), (lambda g: _unbroadcast(g, a.data.shape),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _record(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def gather(a, indices, axis=0) -> Tensor:
    """Select slices ``a[..., indices, ...]`` along ``axis`` (1-D indices)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        z = np.zeros_like(a.data)
        sl = (slice(None),) * axis + (idx,)
        np.add.at(z, sl, g)
        return z

    return _record(out, (a,), (vjp,))


def take_along(a, indices, axis) -> Tensor:
    """``np.take_along_axis`` with a scatter-add backward (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def vjp(g):
        z = np.zeros_like(a.data)
        grids = np.indices(idx.shape, sparse=False)
        index_tuple = tuple(
            idx if d == (axis % a.data.ndim) else grids[d] for d in range(a.data.ndim)
        )
        np.add.at(z, index_tuple, g)
        return z

    return _record(out, (a,), (vjp,))


# ---------------------------------------------------------------------------
# convolution and pooling

_window_cache: dict = {}


def _same_pad(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int) -> np.ndarray:
    # (B, C, Hp, Wp) -> (B*oh*ow, C*kh*kw) patch matrix
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, :oh, :ow]  # (B, C, oh, ow, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, xp.shape[1] * kh * kw)
    return np.ascontiguousarray(cols)


def _conv2d_raw(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    b, c, h, wd = x.shape
    f, c2, kh, kw = w.shape
    xp = _same_pad(x, kh, kw)
    cols = _im2col(xp, kh, kw, h, wd)
    out = cols @ w.reshape(f, -1).T
    return out.reshape(b, h, wd, f).transpose(0, 3, 1, 2)


def conv2d(x, w, bias=None) -> Tensor:
    """2-D cross-correlation, stride 1, zero "same" padding, odd kernels.

    ``x`` is (B, C, H, W), ``w`` is (F, C, kh, kw), optional ``bias`` (F,).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise AutodiffError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise AutodiffError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    f, c, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise AutodiffError(f"conv2d requires odd kernel sizes, got {w.shape}")
    out = _conv2d_raw(x.data, w.data)

    def vjp_x(g):
        w_flip = w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
        return _conv2d_raw(g, np.ascontiguousarray(w_flip))

    def vjp_w(g):
        b, _, h, wd = x.data.shape
        xp = _same_pad(x.data, kh, kw)
        cols = _im2col(xp, kh, kw, h, wd)  # (B*H*W, C*kh*kw)
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)  # (B*H*W, F)
        return (cols.T @ g2).T.reshape(f, c, kh, kw)

    inputs = [x, w]
    vjps = [vjp_x, vjp_w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)
        vjps.append(lambda g: g.sum(axis=(0, 2, 3)))
    return _record(out, tuple(inputs), tuple(vjps))


def maxpool2x2(x) -> Tensor:
    """2x2 max pooling, stride 2; trailing odd rows/columns are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise AutodiffError(f"maxpool2x2 expects a 4-D tensor, got shape {x.shape}")
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    cropped = x.data[:, :, : 2 * h2, : 2 * w2]
    tiles = cropped.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h2, w2, 4
    )
    arg = np.argmax(tiles, axis=-1)
    out = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        z4 = np.zeros((b, c, h2, w2, 4))
        np.put_along_axis(z4, arg[..., None], g[..., None], axis=-1)
        z = np.zeros_like(x.data)
        z[:, :, : 2 * h2, : 2 * w2] = (
            z4.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
                b, c, 2 * h2, 2 * w2
            )
        )
        return z

    return _record(out, (x,), (vjp,))


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """AdamW with decoupled weight decay over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        """Apply one AdamW update using each parameter's accumulated ``.grad``."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise AutodiffError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - self.lr * (
                mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data
            )

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array([float(self.step_count)])}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name].copy()
            out[f"opt.v.{name}"] = self.v[name].copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["opt.step"][0])
        for name in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].copy()
            self.v[name] = arrays[f"opt.v.{name}"].copy()


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: dict[str, Tensor | np.ndarray], meta: dict | None = None) -> None:
    """Serialize named parameters (and optional extra arrays) to ``path``."""
    arrays = {name: values(p) for name, p in params.items()}
    write_container(path, arrays, meta or {}, kind="checkpoint")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays, meta, kind = read_container(path)
    if kind != "checkpoint":
        raise AutodiffError(f"{path} is a {kind!r} container, not a checkpoint")
    return arrays, meta
