"""Reverse-mode automatic differentiation on numpy arrays.

The engine records an explicit graph as ops run: every Tensor remembers the
tensors it was computed from and a closure that routes upstream gradients to
them.  backward() resolves the graph in reverse topological order.  Arrays
default to float32; ops inherit the dtype of their inputs, so a float64 graph
can be built for high-precision checks.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError


class Tensor:
    """A node in the computation graph wrapping an ndarray."""

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None, op: str = ""):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        self.data = data
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        out_data = self.data + other.data

        def bw(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return Tensor(out_data, parents=(self, other), backward_fn=bw, op="add")

    __radd__ = __add__

    def __neg__(self):
        def bw(g):
            self._accumulate(-g)

        return Tensor(-self.data, parents=(self,), backward_fn=bw, op="neg")

    def __sub__(self, other):
        other = _as_tensor(other, self.dtype)
        out_data = self.data - other.data

        def bw(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(-_unbroadcast(g, other.shape))

        return Tensor(out_data, parents=(self, other), backward_fn=bw, op="sub")

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        out_data = self.data * other.data

        def bw(g):
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor(out_data, parents=(self, other), backward_fn=bw, op="mul")

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return self * (1.0 / float(scalar))

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape
        out_data = self.data.reshape(shape)

        def bw(g):
            self._accumulate(g.reshape(old_shape))

        return Tensor(out_data, parents=(self,), backward_fn=bw, op="reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)

        def bw(g):
            self._accumulate(np.transpose(g, inverse))

        return Tensor(np.transpose(self.data, axes), parents=(self,), backward_fn=bw, op="transpose")

    # -- reductions ---------------------------------------------------------

    def sum(self):
        out_data = np.asarray(np.sum(self.data, dtype=np.float64)).astype(self.dtype)

        def bw(g):
            self._accumulate(np.broadcast_to(g, self.shape).astype(self.dtype))

        return Tensor(out_data, parents=(self,), backward_fn=bw, op="sum")

    def mean(self):
        n = self.size
        out_data = np.asarray(np.sum(self.data, dtype=np.float64) / n).astype(self.dtype)

        def bw(g):
            self._accumulate(np.broadcast_to(g / n, self.shape).astype(self.dtype))

        return Tensor(out_data, parents=(self,), backward_fn=bw, op="mean")

    # -- graph resolution ----------------------------------------------------

    def backward(self):
        """Propagate d(self)/d(node) into .grad of every reachable node.

        self must hold a single scalar.  Gradients accumulate, so callers
        owning Parameters should zero them between steps.
        """
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


class Parameter(Tensor):
    """A trainable leaf tensor; its gradient buffer always matches its shape."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0


def _as_tensor(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after a broadcast binary op."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _topological_order(root):
    """Reverse topological order of the graph rooted at `root` (iterative)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return list(reversed(order))


# -- ops ---------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  Accepts 2-D operands, stacked operands with equal
    leading dimensions, or a stacked `a` against a 2-D `b`."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    if b.ndim == 2:
        pass
    elif a.ndim == b.ndim:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul batch dimensions disagree: {a.shape} vs {b.shape}")
    else:
        raise ShapeError(f"matmul rank combination unsupported: {a.shape} vs {b.shape}")

    out_data = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                n = g.shape[-1]
                b._accumulate(np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n)))
            else:
                b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor(out_data, parents=(a, b), backward_fn=bw, op="matmul")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * s

    def bw(g):
        x._accumulate(g * (s * (1.0 + x.data * (1.0 - s))))

    return Tensor(out_data, parents=(x,), backward_fn=bw, op="silu")


def softmax_last_dim(x: Tensor, additive_mask=None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    additive_mask, if given, is a constant array broadcastable to x that is
    added to the logits first (use large negative values to zero positions
    out).  It is not differentiated.
    """
    z = x.data if additive_mask is None else x.data + additive_mask
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        x._accumulate(y * (g - dot))

    return Tensor(y, parents=(x,), backward_fn=bw, op="softmax")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize [B, C, H, W] features to zero mean / unit variance within
    each of `groups` channel groups, then apply per-channel scale and shift."""
    b, c, h, w = x.shape
    if c % groups != 0:
        raise ConfigError(f"group_norm: {groups} groups do not divide {c} channels")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")

    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(b, c, h, w)
    gam = gamma.data.reshape(1, c, 1, 1)
    out_data = xhat * gam + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = (g * gam).reshape(b, groups, -1)
            xh = xhat.reshape(b, groups, -1)
            m1 = dxhat.mean(axis=2, keepdims=True)
            m2 = (dxhat * xh).mean(axis=2, keepdims=True)
            dx = (dxhat - m1 - xh * m2) * inv
            x._accumulate(dx.reshape(b, c, h, w))

    return Tensor(out_data, parents=(x, gamma, beta), backward_fn=bw, op="group_norm")


def _conv_windows(x_pad, stride):
    """[B, C, Hp, Wp] -> column matrix [B*Ho*Wo, C*9] for a 3x3 kernel."""
    win = np.lib.stride_tricks.sliding_window_view(x_pad, (3, 3), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    bsz, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * 9)
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 and stride 1 or 2."""
    if stride not in (1, 2):
        raise ConfigError(f"conv2d stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and weight, got {x.shape} and {weight.shape}")
    o, ci, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d kernel must be 3x3, got {weight.shape}")
    if x.shape[1] != ci:
        raise ShapeError(f"conv2d channels disagree: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {o} filters")

    bsz = x.shape[0]
    x_pad = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols, ho, wo = _conv_windows(x_pad, stride)
    w_mat = weight.data.reshape(o, ci * 9).T
    out = cols @ w_mat + bias.data
    out_data = out.reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if bias.requires_grad:
            bias._accumulate(g_mat.sum(axis=0, dtype=np.float64).astype(bias.dtype))
        if weight.requires_grad:
            xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
            cols_b, _, _ = _conv_windows(xp, stride)
            weight._accumulate((cols_b.T @ g_mat).T.reshape(o, ci, 3, 3))
        if x.requires_grad:
            g_cols = (g_mat @ w_mat.T).reshape(bsz, ho, wo, ci, 3, 3).transpose(0, 3, 1, 2, 4, 5)
            gx_pad = np.zeros_like(x_pad)
            for dy in range(3):
                for dx in range(3):
                    gx_pad[:, :, dy : dy + stride * (ho - 1) + 1 : stride,
                           dx : dx + stride * (wo - 1) + 1 : stride] += g_cols[..., dy, dx]
            x._accumulate(gx_pad[:, :, 1:-1, 1:-1])

    return Tensor(out_data, parents=(x, weight, bias), backward_fn=bw, op="conv2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Duplicate every pixel of [B, C, H, W] into a 2x2 block."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x needs a 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        x._accumulate(g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor(out_data, parents=(x,), backward_fn=bw, op="upsample")


def concat(tensors, axis: int) -> Tensor:
    """Concatenate tensors along `axis`."""
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(g[tuple(index)])

    return Tensor(out_data, parents=tuple(tensors), backward_fn=bw, op="concat")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` ([V, D]) by an integer index array."""
    ids = np.asarray(ids)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range for table of {table.shape[0]} rows")
    out_data = table.data[ids]

    def bw(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            table._accumulate(gt)

    return Tensor(out_data, parents=(table,), backward_fn=bw, op="embedding")
