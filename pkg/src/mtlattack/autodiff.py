"""Dense tensors with reverse-mode automatic differentiation on numpy.

Just enough machinery for a small convolutional multi-task network and its
losses: every op records a backward closure on the tensors it produces, and
``backward()`` replays the tape in reverse topological order.  Storage is
float32 by default; reductions accumulate in float64.
"""

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where the contract requires finite values."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        return arr.astype(np.float32)
    return arr


class Tensor:
    """N-d array that may participate in the gradient tape.

    ``grad`` is populated (same shape/dtype as ``data``) after a ``backward``
    pass from a scalar root that this tensor contributed to.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float(data, dtype)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor created with non-finite values")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def on_graph(self):
        return self.requires_grad or self._backward_fn is not None

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    # -- backward ---------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every requires_grad tensor reachable from here."""
        if self.data.size != 1:
            raise ShapeError("backward root must be a scalar")
        if self._backward_fn is None and not self.requires_grad:
            raise ValueError("backward root is not on a graph")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _accumulate(tensor, delta):
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += delta.astype(tensor.dtype, copy=False).reshape(tensor.shape)


def _make(data, parents, backward_fn):
    """Wrap an op result; record the tape entry if grad mode is on."""
    arr = np.asarray(data)
    # single-pass check: any NaN/Inf poisons the float64 sum
    if not np.isfinite(arr.sum(dtype=np.float64)):
        raise NonFiniteError("operation produced non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    if _grad_enabled and any(p.on_graph for p in parents):
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


# -- elementwise and structural ops --------------------------------------


def add(a, b):
    if not isinstance(b, Tensor):
        return _make(a.data + b, (a,), lambda g, a=a: _accumulate(a, g))
    if not isinstance(a, Tensor):
        return add(b, a)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g, a=a, b=b):
        if a.on_graph:
            _accumulate(a, g if a.data.size > 1 or g.size == 1 else g.sum())
        if b.on_graph:
            _accumulate(b, g if b.data.size > 1 or g.size == 1 else g.sum())

    return _make(a.data + b.data, (a, b), bwd)


def mul(a, b):
    if not isinstance(b, Tensor):
        return _make(a.data * b, (a,), lambda g, a=a, b=b: _accumulate(a, g * b))
    if not isinstance(a, Tensor):
        return mul(b, a)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g, a=a, b=b):
        if a.on_graph:
            ga = g * b.data
            _accumulate(a, ga if a.data.size > 1 or ga.size == 1 else ga.sum())
        if b.on_graph:
            gb = g * a.data
            _accumulate(b, gb if b.data.size > 1 or gb.size == 1 else gb.sum())

    return _make(a.data * b.data, (a, b), bwd)


def scale(x, s):
    """s * x for a python scalar s."""
    return mul(x, float(s))


def relu(x):
    mask = x.data > 0
    return _make(
        np.where(mask, x.data, 0.0).astype(x.dtype),
        (x,),
        lambda g, x=x, mask=mask: _accumulate(x, g * mask),
    )


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _make(y, (x,), lambda g, x=x, y=y: _accumulate(x, g * y * (1.0 - y)))


def log(x, floor=0.0):
    """Natural log of max(x, floor); gradient is zero on the floored entries."""
    clipped = np.maximum(x.data, floor) if floor > 0 else x.data
    mask = x.data >= floor

    def bwd(g, x=x, clipped=clipped, mask=mask):
        _accumulate(x, g * mask / clipped)

    return _make(np.log(clipped), (x,), bwd)


def power(x, exponent):
    """x ** exponent for a constant real exponent; x must be non-negative."""
    y = np.power(x.data, exponent)

    def bwd(g, x=x, exponent=exponent):
        base = np.power(np.maximum(x.data, 1e-12), exponent - 1.0)
        _accumulate(x, g * exponent * base)

    return _make(y, (x,), bwd)


def reshape(x, shape):
    return _make(
        x.data.reshape(shape),
        (x,),
        lambda g, x=x: _accumulate(x, g.reshape(x.shape)),
    )


def take_flat(x, indices):
    """Gather from the flattened tensor at constant integer indices."""
    flat = x.data.reshape(-1)
    indices = np.asarray(indices, dtype=np.intp)

    def bwd(g, x=x, indices=indices):
        gx = np.zeros(x.data.size, dtype=g.dtype)
        np.add.at(gx, indices, g.reshape(-1))
        _accumulate(x, gx.reshape(x.shape))

    return _make(flat[indices], (x,), bwd)


def concat_channels(tensors):
    """Concatenate NCHW tensors along the channel axis."""
    shapes = [t.shape for t in tensors]
    if any(len(s) != 4 for s in shapes):
        raise ShapeError("concat_channels expects NCHW tensors")
    base = shapes[0]
    for s in shapes[1:]:
        if s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {shapes}")
    splits = np.cumsum([s[1] for s in shapes])[:-1]

    def bwd(g, tensors=tuple(tensors), splits=splits):
        for t, piece in zip(tensors, np.split(g, splits, axis=1)):
            if t.on_graph:
                _accumulate(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), bwd)


def upsample2x_nearest(x):
    if x.data.ndim != 4:
        raise ShapeError("upsample2x_nearest expects NCHW")
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g, x=x):
        n, c, h, w = x.shape
        _accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(y, (x,), bwd)


def channel_softmax(x):
    """Softmax over axis 1 of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError("channel_softmax expects NCHW")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g, x=x, y=y):
        _accumulate(x, (g - (g * y).sum(axis=1, keepdims=True)) * y)

    return _make(y, (x,), bwd)


# -- convolution ----------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d convolution, NCHW input, OIHW weight."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW weight")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d: kernel larger than padded input")

    cols = np.empty((n, c, kh * kw, oh * ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j, :] = xp[
                :, :, i : i + oh * stride : stride, j : j + ow * stride : stride
            ].reshape(n, c, oh * ow)
    cols = cols.reshape(n, c * kh * kw, oh * ow)
    wm = weight.data.reshape(co, c * kh * kw)
    y = np.matmul(wm, cols).reshape(n, co, oh, ow)
    if bias is not None:
        y = y + bias.data.reshape(1, co, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g, x=x, weight=weight, bias=bias, cols=cols, wm=wm):
        gm = g.reshape(n, co, oh * ow)
        if weight.on_graph:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, gw.reshape(weight.shape))
        if bias is not None and bias.on_graph:
            _accumulate(bias, gm.sum(axis=(0, 2)))
        if x.on_graph:
            gcols = np.matmul(wm.T, gm).reshape(n, c, kh, kw, oh, ow)
            gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += gcols[:, :, i, j]
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            _accumulate(x, gxp)

    return _make(y, parents, bwd)


# -- reductions (float64 accumulation) ------------------------------------


def tensor_sum(x):
    """Sum of all entries, returned as a scalar tensor."""
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _make(total, (x,), lambda g, x=x: _accumulate(x, np.broadcast_to(g, x.shape)))


def mse(pred, target):
    """Mean squared error between equal-shape tensors."""
    if not isinstance(target, Tensor):
        target = constant(np.broadcast_to(np.asarray(target, dtype=pred.dtype), pred.shape))
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    n = max(pred.data.size, 1)
    val = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def bwd(g, pred=pred, target=target, diff=diff, n=n):
        gd = g * 2.0 * diff / n
        if pred.on_graph:
            _accumulate(pred, gd)
        if target.on_graph:
            _accumulate(target, -gd)

    return _make(val, (pred, target), bwd)


PROB_FLOOR = 1e-7


def cross_entropy(probs, labels, floor=PROB_FLOOR, reduction="mean"):
    """Cross-entropy of channel-softmaxed probabilities against integer labels.

    ``probs`` is (C, ...) with the class axis first; ``labels`` matches the
    trailing shape.  Probabilities are floored before the log.
    """
    labels = np.asarray(labels)
    if labels.shape != probs.shape[1:]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs probs {probs.shape}")
    c = probs.shape[0]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError("cross_entropy: label out of range")
    npix = labels.size
    # index into the flattened (C, npix) layout
    gather = np.ravel_multi_index(
        (labels.reshape(-1).astype(np.intp), np.arange(npix)), (c, npix)
    )
    p_t = take_flat(reshape(probs, (c, npix)), gather)
    nll = mul(log(p_t, floor=floor), -1.0)
    total = tensor_sum(nll)
    if reduction == "mean":
        return scale(total, 1.0 / npix)
    if reduction == "sum":
        return total
    raise ValueError(f"unknown reduction {reduction!r}")


def binary_cross_entropy(p, target, floor=PROB_FLOOR, reduction="mean"):
    """Elementwise BCE of probabilities ``p`` against a constant target map."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"bce: shape mismatch {t.shape} vs {p.shape}")
    term = add(
        mul(log(p, floor=floor), constant(-t, dtype=p.dtype)),
        mul(log(add(mul(p, -1.0), 1.0), floor=floor), constant(t - 1.0, dtype=p.dtype)),
    )
    total = tensor_sum(term)
    if reduction == "mean":
        return scale(total, 1.0 / max(p.data.size, 1))
    if reduction == "sum":
        return total
    raise ValueError(f"unknown reduction {reduction!r}")


# -- generic dispatcher ----------------------------------------------------

_OP_TABLE = {
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "upsample2x_nearest": upsample2x_nearest,
    "channel_softmax": channel_softmax,
    "add": add,
    "concat_channels": lambda *inputs: concat_channels(list(inputs)),
    "mse": mse,
    "cross_entropy": cross_entropy,
    "sum": tensor_sum,
    "scale": scale,
}


def op_forward(kind, *inputs, **attrs):
    """Apply one of the supported op kinds by name."""
    if kind not in _OP_TABLE:
        raise ValueError(f"unknown op kind {kind!r}")
    return _OP_TABLE[kind](*inputs, **attrs)


# -- gradient checking -----------------------------------------------------


def finite_diff_check(f, x, h=1e-5, coords=None):
    """Max relative error between the autodiff gradient of ``f`` and central
    finite differences at ``x``.

    ``f`` maps a Tensor to a scalar Tensor.  ``coords`` optionally restricts
    the finite-difference sweep to a subset of flat coordinate indices (the
    autodiff gradient is always full).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    out = f(x64)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("f(x) is not finite")
    out.backward()
    g_ad = x64.grad.reshape(-1).copy()

    flat = x64.data.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    else:
        coords = np.asarray(coords, dtype=np.intp)
    # The central difference carries rounding noise of order eps * |f| / h;
    # for gradient components near zero that noise would dominate a purely
    # relative error, so the denominator is floored well above the noise scale.
    noise = np.finfo(np.float64).eps * max(1.0, abs(float(out.data))) / h
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x64).data)
            flat[i] = orig - h
            fm = float(f(x64).data)
            flat[i] = orig
            g_fd = (fp - fm) / (2.0 * h)
            denom = max(1e-8, 1e4 * noise, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, abs(g_ad[i] - g_fd) / denom)
    return worst
