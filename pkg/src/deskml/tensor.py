"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array. Every differentiable op records its
parents and a backward rule on the result, forming an implicit tape;
``backward`` replays it in reverse topological order. Tensors are
immutable values: ops always allocate fresh arrays.
"""

from __future__ import annotations

import numpy as np

_DTYPES = {
    "f32": np.float32,
    "f64": np.float64,
    "i32": np.int32,
    "i64": np.int64,
    "bool": np.bool_,
}
_DTYPE_NAMES = {np.dtype(v): k for k, v in _DTYPES.items()}


class Tensor:
    __slots__ = ("data", "_parents", "_backward", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(dtype, str):
            dtype = _DTYPES[dtype]
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPE_NAMES:
            arr = arr.astype(np.float64 if arr.dtype.kind == "f" else np.int64)
        self.data = arr
        self._parents = _parents
        self._backward = _backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)

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
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    def is_float(self):
        return self.data.dtype.kind == "f"

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor({self.data!r}, dtype={self.dtype})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other, like=self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other, like=self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def astype(self, dtype):
        return astype(self, dtype)

    def detach(self):
        return Tensor(self.data)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None and like.is_float() else None
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def zeros(shape, dtype="f32") -> Tensor:
    return Tensor(np.zeros(shape, _DTYPES[dtype]))


def ones(shape, dtype="f32") -> Tensor:
    return Tensor(np.ones(shape, _DTYPES[dtype]))


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _make(data, parents, backward):
    if any(p.requires_grad for p in parents):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_binary(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_binary(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_binary(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_binary(a, b, "div")
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # stable: avoid exp overflow on large |x|
    out = np.where(a.data >= 0,
                   1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * grad,)

    return _make(out, (a,), backward)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "relu": relu, "gelu": gelu, "exp": exp, "log": log,
    "sigmoid": sigmoid, "tanh": tanh,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name."""
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}; have {sorted(_ELEMENTWISE)}")
    return fn(a) if b is None else fn(a, b)


# ---------------------------------------------------------------------------
# linear algebra / reductions


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a, axis, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        full = out if keepdims else np.expand_dims(out, axis)
        mask = (a.data == full)
        mask = mask / mask.sum(axis=axis, keepdims=True)  # split ties evenly
        gg = g if keepdims else np.expand_dims(g, axis)
        return (mask * gg,)

    return _make(out, (a,), backward)


def softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    if not a.is_float():
        raise TypeError("softmax requires a float tensor")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), backward)


def log_softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(out, tuple(tensors), backward)


def take(a, idx) -> Tensor:
    """Basic/advanced indexing with scatter-add backward."""
    a = _as_tensor(a)
    out = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), backward)


def astype(a, dtype) -> Tensor:
    a = _as_tensor(a)
    np_dtype = _DTYPES[dtype] if isinstance(dtype, str) else dtype
    if a.requires_grad and np.dtype(np_dtype).kind == "f":
        return _make(a.data.astype(np_dtype), (a,),
                     lambda g: (g.astype(a.data.dtype),))
    return Tensor(a.data.astype(np_dtype))


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the two spatial axes of a [b, H, W, C] tensor."""
    a = _as_tensor(a)
    if pad == 0:
        return a
    width = ((0, 0), (pad, pad), (pad, pad), (0, 0))
    out = np.pad(a.data, width)

    def backward(g):
        return (g[:, pad:-pad, pad:-pad, :],)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# spatial ops (NHWC)


def conv2d(a, kernel, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation; kernel is [kh, kw, cin, cout]."""
    a = _as_tensor(a)
    kernel = _as_tensor(kernel)
    if a.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects x[b,H,W,C] and kernel[kh,kw,cin,cout]")
    kh, kw, cin, cout = kernel.shape
    if a.shape[3] != cin:
        raise ValueError(f"conv2d: input has {a.shape[3]} channels, kernel expects {cin}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same padding requires odd kernel extents")
        pad = kh // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    xp = pad2d(a, pad)
    b, hp, wp, _ = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    x = xp.data

    out = np.zeros((b, oh, ow, cout), x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, i:i + oh * stride:stride, j:j + ow * stride:stride, :]
            out += np.matmul(patch, kernel.data[i, j])

    def backward(g):
        gx = np.zeros_like(x)
        gk = np.zeros_like(kernel.data)
        for i in range(kh):
            for j in range(kw):
                patch = x[:, i:i + oh * stride:stride, j:j + ow * stride:stride, :]
                gk[i, j] = np.tensordot(patch, g, axes=([0, 1, 2], [0, 1, 2]))
                gx[:, i:i + oh * stride:stride, j:j + ow * stride:stride, :] += \
                    np.matmul(g, kernel.data[i, j].T)
        return (gx, gk)

    return _make(out, (xp, kernel), backward)


def max_pool2d(a, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the spatial axes."""
    a = _as_tensor(a)
    b, h, w, c = a.shape
    if h % size or w % size:
        raise ValueError(f"max_pool2d: spatial dims {h}x{w} not divisible by {size}")
    blocks = a.data.reshape(b, h // size, size, w // size, size, c)
    out = blocks.max(axis=(2, 4))

    def backward(g):
        full = out[:, :, None, :, None, :]
        mask = (blocks == full)
        mask = mask / mask.sum(axis=(2, 4), keepdims=True)
        gb = mask * g[:, :, None, :, None, :]
        return (gb.reshape(b, h, w, c),)

    return _make(out, (a,), backward)


def avg_pool2d(a, size: int = 2) -> Tensor:
    a = _as_tensor(a)
    b, h, w, c = a.shape
    if h % size or w % size:
        raise ValueError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {size}")
    blocks = reshape(a, (b, h // size, size, w // size, size, c))
    return tmean(tmean(blocks, axis=4), axis=2)


def upsample_nearest2d(a, factor: int = 2) -> Tensor:
    a = _as_tensor(a)
    b, h, w, c = a.shape
    out = np.repeat(np.repeat(a.data, factor, axis=1), factor, axis=2)

    def backward(g):
        gb = g.reshape(b, h, factor, w, factor, c)
        return (gb.sum(axis=(2, 4)),)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# autodiff driver


def backward(out: Tensor) -> dict[int, np.ndarray]:
    """Backprop from a scalar; returns grads keyed by id(tensor)."""
    if out.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {out.shape}")

    # reverse topological order over the recorded graph
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return grads


def value_and_grad(f, params: dict[str, Tensor]):
    """Evaluate ``f(params)`` and its gradient w.r.t. every parameter."""
    leaves = {}
    for name, p in params.items():
        if not p.is_float():
            raise TypeError(f"parameter {name!r} is not float (dtype {p.dtype})")
        leaves[name] = Tensor(p.data, requires_grad=True)
    out = f(leaves)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("objective must return a scalar Tensor")
    gmap = backward(out)
    grads = {
        name: Tensor(gmap.get(id(leaf), np.zeros_like(leaf.data)))
        for name, leaf in leaves.items()
    }
    return out.detach(), grads


def grad(f, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return value_and_grad(f, params)[1]
