"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them. ``backward`` walks the
graph once in reverse topological order. Interior nodes release their
closures after the pass, so a consumed graph cannot be replayed by accident.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeError",
    "ShapeError",
    "tensor",
    "parameter",
    "no_grad",
    "matmul",
    "conv2d",
    "conv2d_transpose",
    "conv_output_size",
    "activation",
    "relu",
    "tanh",
    "softmax",
    "log_softmax",
    "stack",
    "backward",
    "grad",
    "grad_check",
]


class TapeError(RuntimeError):
    """Raised on misuse of a recorded graph (non-scalar root, reused tape)."""


class ShapeError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: Sequence["Tensor"] = (), backward_fn: Callable | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward_fn
        self._consumed = False

    # -- bookkeeping ---------------------------------------------------
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
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        other = _wrap(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return _node(a.data + b.data, "add", (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        return _node(-self.data, "neg", (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = _wrap(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

        return _node(a.data - b.data, "sub", (a, b), bw)

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        other = _wrap(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return _node(a.data * b.data, "mul", (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        a, b = self, other
        out = a.data / b.data

        def bw(g):
            ga = g / b.data
            return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

        return _node(out, "div", (a, b), bw)

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self

        fancy = any(isinstance(i, (list, np.ndarray, Tensor))
                    for i in (idx if isinstance(idx, tuple) else (idx,)))

        def bw(g):
            full = np.zeros_like(a.data)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return (full,)

        return _node(a.data[idx], "getitem", (a,), bw)

    # -- reductions and shape ops -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return _node(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), bw)

    def mean(self, axis=None):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return _node(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))

    def flatten(self):
        return self.reshape(-1)

    # -- elementwise -----------------------------------------------------
    def abs(self):
        a = self
        return _node(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))

    def log(self):
        a = self
        return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))

    def exp(self):
        out = np.exp(self.data)
        return _node(out, "exp", (self,), lambda g: (g * out,))

    def square(self):
        a = self
        return _node(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))

    def clamp_min(self, floor: float):
        """max(x, floor); gradient passes only where x > floor."""
        a = self
        mask = a.data > floor
        return _node(np.where(mask, a.data, floor), "clamp_min", (a,), lambda g: (g * mask,))

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager: operations inside record no graph."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


def _node(value: np.ndarray, op: str, parents: tuple, bw: Callable) -> Tensor:
    if not _GRAD_ENABLED[0] or not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, op=op, parents=parents, backward_fn=bw)


def tensor(data) -> Tensor:
    """Constant (no gradient) tensor."""
    return Tensor(data)


def parameter(data) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [_wrap(t) for t in items]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _node(np.stack([t.data for t in items], axis=axis), "stack", tuple(items), bw)


# ---------------------------------------------------------------------------
# dense


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _node(a.data @ b.data, "matmul", (a, b), bw)


# ---------------------------------------------------------------------------
# convolution
#
# Inputs are (C, H, W) or batched (N, C, H, W); kernels are (C_out, C_in, kH, kW)
# for both conv2d and its transpose (the transpose takes C_out channels in and
# gives C_in channels out).


def _padding_amount(padding, k: int) -> int:
    if padding == "valid":
        return 0
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"'same' padding needs an odd kernel extent, got {k}")
        return (k - 1) // 2
    if isinstance(padding, int) and padding >= 0:
        return padding
    raise ShapeError(f"unknown padding {padding!r}")


def conv_output_size(n: int, k: int, stride: int, padding) -> int:
    p = _padding_amount(padding, k)
    if k > n + 2 * p:
        raise ShapeError(f"kernel extent {k} larger than padded input extent {n + 2 * p}")
    return (n + 2 * p - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, p: int) -> tuple[np.ndarray, tuple]:
    """(N, C, H, W) -> rows of flattened patches, shape (N*H'*W', C*kh*kw)."""
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # N, C, H', W', kh, kw
    n, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    return cols, (n, ho, wo)


def _col2im(dcols: np.ndarray, out_shape: tuple, kh: int, kw: int, stride: int, p: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch rows back onto the image."""
    n, c, h, w = out_shape
    ho = (h + 2 * p - kh) // stride + 1
    wo = (w + 2 * p - kw) // stride + 1
    d = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    return out[:, :, p:p + h, p:p + w] if p else out


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, p: int, cols=None) -> np.ndarray:
    o, _, kh, kw = w.shape
    if cols is None:
        cols, (n, ho, wo) = _im2col(x, kh, kw, stride, p)
    else:
        n = x.shape[0]
        ho = (x.shape[2] + 2 * p - kh) // stride + 1
        wo = (x.shape[3] + 2 * p - kw) // stride + 1
    out = cols @ w.reshape(o, -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def _conv_adjoint(g: np.ndarray, w: np.ndarray, stride: int, p: int, in_hw: tuple) -> np.ndarray:
    """Adjoint of the conv map w.r.t. its input: (N, O, H', W') -> (N, C, H, W)."""
    o, c, kh, kw = w.shape
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    return _col2im(gm @ w.reshape(o, -1), (g.shape[0], c) + tuple(in_hw), kh, kw, stride, p)


def _kernel_grad(cols: np.ndarray, g: np.ndarray, kshape: tuple) -> np.ndarray:
    o = g.shape[1]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    return (gm.T @ cols).reshape(kshape)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"convolution input must be (C,H,W) or (N,C,H,W), got {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding="same") -> Tensor:
    """Cross-correlation of ``x`` with ``kernels`` (no kernel flip)."""
    x, kernels = _wrap(x), _wrap(kernels)
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    xb, squeeze = _batched(x)
    if kernels.ndim != 4 or kernels.shape[1] != xb.shape[1]:
        raise ShapeError(f"conv2d kernel {kernels.shape} incompatible with input {x.shape}")
    kh, kw = kernels.shape[2:]
    h, wd = xb.shape[2:]
    conv_output_size(h, kh, stride, padding)
    conv_output_size(wd, kw, stride, padding)
    p = _padding_amount(padding, kh)
    if _padding_amount(padding, kw) != p:
        raise ShapeError("non-square padding is not supported")

    cols, _ = _im2col(xb.data, kh, kw, stride, p)

    def bw(g):
        return (_conv_adjoint(g, kernels.data, stride, p, (h, wd)),
                _kernel_grad(cols, g, kernels.shape))

    out = _node(_conv_forward(xb.data, kernels.data, stride, p, cols), "conv2d", (xb, kernels), bw)
    return out.reshape(out.shape[1:]) if squeeze else out


def conv2d_transpose(x: Tensor, kernels: Tensor, stride: int = 1, padding="same",
                     output_hw: tuple | None = None) -> Tensor:
    """Transpose (adjoint) of :func:`conv2d` with the same kernel layout.

    ``x`` has ``kernels.shape[0]`` channels; the result has ``kernels.shape[1]``.
    ``output_hw`` disambiguates the spatial size when ``stride > 1``.
    """
    x, kernels = _wrap(x), _wrap(kernels)
    xb, squeeze = _batched(x)
    if kernels.ndim != 4 or kernels.shape[0] != xb.shape[1]:
        raise ShapeError(f"conv2d_transpose kernel {kernels.shape} incompatible with input {x.shape}")
    kh, kw = kernels.shape[2:]
    p = _padding_amount(padding, kh)
    ho, wo = xb.shape[2:]
    if output_hw is None:
        output_hw = ((ho - 1) * stride + kh - 2 * p, (wo - 1) * stride + kw - 2 * p)
    h, wd = output_hw
    if h < 1 or wd < 1 or conv_output_size(h, kh, stride, padding) != ho \
            or conv_output_size(wd, kw, stride, padding) != wo:
        raise ShapeError(f"conv2d_transpose: input {x.shape} is not a conv2d output shape for "
                         f"output {output_hw} with kernel {kernels.shape}, stride {stride}")

    def bw(g):
        gcols, _ = _im2col(g, kh, kw, stride, p)
        return (_conv_forward(g, kernels.data, stride, p, gcols),
                _kernel_grad(gcols, xb.data, kernels.shape))

    out = _node(_conv_adjoint(xb.data, kernels.data, stride, p, (h, wd)),
                "conv2d_transpose", (xb, kernels), bw)
    return out.reshape(out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0  # gradient at exactly 0 is 0
    return _node(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = np.tanh(x.data)
    return _node(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind in ("linear", "identity"):
        return _wrap(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    z = _wrap(z)
    e = np.exp(z.data - z.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, "softmax", (z,), bw)


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    z = _wrap(z)
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, "log_softmax", (z,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Fill ``.grad`` of every node reachable from scalar ``root``.

    Gradients are zeroed before the pass, so leaves hold d(root)/d(leaf)
    afterwards rather than a running sum across calls.
    """
    if root.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise TapeError("graph already consumed by a previous backward; record a fresh forward pass")
    order = _topo_order(root)
    for node in order:
        if node._consumed:
            raise TapeError("graph already consumed by a previous backward; record a fresh forward pass")
        node.grad = np.zeros_like(node.data)
    if not root.requires_grad:
        return
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad:
                parent.grad += g
    for node in order:
        if not node.is_leaf:
            node._backward = None
            node._parents = ()
            node._consumed = True


def grad(root: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Run :func:`backward` and return copies of the gradients of ``params``.

    Parameters the root does not depend on get zero gradients.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(root)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def grad_check(fn: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5,
               indices: Iterable[tuple] | None = None) -> float:
    """Worst relative error between backprop and central differences.

    ``fn`` maps a tensor to a scalar tensor. Relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``. ``indices`` restricts the
    check to some coordinates of ``point``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x0 = _as_array(point).copy()
    x = parameter(x0)
    analytic = grad(fn(x), [x])[0]
    coords = list(np.ndindex(x0.shape)) if indices is None else list(indices)
    worst = 0.0
    for idx in coords:
        xp = x0.copy()
        xp[idx] += epsilon
        xm = x0.copy()
        xm[idx] -= epsilon
        numeric = (fn(Tensor(xp)).item() - fn(Tensor(xm)).item()) / (2.0 * epsilon)
        a = float(analytic[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
