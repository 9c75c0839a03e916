"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations needed by the binary supernet are provided.  Every op
records a closure that maps the upstream gradient to per-input gradients;
``backward`` walks the recorded graph in reverse topological order.
"""

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = {"dtype": np.float32, "grad": True, "ste_clip": True}


def get_default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for newly created float tensors."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def set_ste_clip(clip: bool):
    """Choose between the clipped (|x| <= 1) and plain straight-through sign."""
    _state["ste_clip"] = bool(clip)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _state["dtype"]
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A trainable leaf owned by a module.

    Whether a parameter currently receives gradients (``requires_grad``) can
    be toggled without it dropping out of ``Module.parameters()``.
    """

    __slots__ = ()

    def __init__(self, data, requires_grad=True, dtype=None):
        super().__init__(data, requires_grad, dtype)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


class _SliceGrad:
    """Gradient that is nonzero only on ``idx``; scattered lazily by ``backward``."""

    __slots__ = ("idx", "g")

    def __init__(self, idx, g):
        self.idx, self.g = idx, g


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _shape_error(op, *shapes):
    dims = ", ".join(str(tuple(s)) for s in shapes)
    return ValueError(f"{op}: incompatible shapes {dims}")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def _topological_order(root):
    order, seen = [], set()
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, retain_graph=False):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Non-leaf gradients are not kept.  The graph is released afterwards
    unless ``retain_graph`` is set.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    owned = set()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = g.astype(node.data.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            if isinstance(pg, _SliceGrad):
                # scatter into a buffer owned by this pass instead of
                # materializing a mostly-zero full-size gradient
                if prev is None:
                    prev = np.zeros(p.shape, dtype=p.data.dtype)
                elif key not in owned:
                    prev = prev.astype(p.data.dtype, copy=True)
                prev[pg.idx] += pg.g
                grads[key] = prev
                owned.add(key)
                continue
            pg = np.asarray(pg)
            if pg.dtype != p.data.dtype:
                pg = pg.astype(p.data.dtype)
            if prev is None:
                grads[key] = pg
            elif key in owned:
                prev += pg
            else:
                grads[key] = prev + pg
                owned.add(key)
        if not retain_graph:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise _shape_error("sub", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_error("elementwise_mul", a.shape, b.shape) from None

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "elementwise_mul")


def scale(x, c):
    """Multiply by a python scalar constant."""
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,), "scalar_scale")


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def abs_(x):
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def power(x, p):
    """``x ** p`` for a python scalar exponent and positive ``x``."""
    x = as_tensor(x)
    p = float(p)
    out = np.power(x.data, p)
    return _make(out, (x,), lambda g: (g * p * np.power(x.data, p - 1.0),), "power")


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def index(x, idx):
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)

    def bw(g):
        return (_SliceGrad(idx, g),)

    return _make(x.data[idx], (x,), bw, "index")


def concat(tensors, axis=1):
    """Concatenate along ``axis`` (channel axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_error("channel_concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(out, tensors, bw, "channel_concat")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# ---------------------------------------------------------------------------
# probability ops
# ---------------------------------------------------------------------------


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``logits`` [N, K] against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _shape_error("cross_entropy_loss", logits.shape, labels.shape)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw, "cross_entropy_loss")


# ---------------------------------------------------------------------------
# the straight-through sign
# ---------------------------------------------------------------------------


def sign_ste(x, clip=None):
    """+1 where x >= 0, -1 elsewhere; straight-through gradient.

    With ``clip`` (the default, see ``set_ste_clip``) the gradient is passed
    only where ``|x| <= 1``.
    """
    x = as_tensor(x)
    clip = _state["ste_clip"] if clip is None else clip
    one = x.data.dtype.type(1)
    out = np.where(x.data >= 0, one, -one)
    if clip:
        return _make(out, (x,), lambda g: (g * (np.abs(x.data) <= 1),), "sign_ste")
    return _make(out, (x,), lambda g: (g,), "sign_ste")


# ---------------------------------------------------------------------------
# convolution, pooling, normalization
# ---------------------------------------------------------------------------


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp, k, stride, ho, wo):
    """Patches as a [C*k*k, N*Ho*Wo] matrix."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    n, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)


def conv2d(x, w, bias=None, stride=1, padding=0):
    """Dense 2-D convolution (cross-correlation), NCHW layout."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise _shape_error("conv2d_fp", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise _shape_error("conv2d_fp", x.shape, w.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wm = w.data.reshape(o, -1)
    out = (wm @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wm.T @ g2).reshape(c, k, k, n, ho, wo)
            hp, wp = xp.shape[2], xp.shape[3]
            dxp = np.zeros((c, n, hp, wp), dtype=x.data.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, i, j]
            dxp = dxp.transpose(1, 0, 2, 3)
            gx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(np.ascontiguousarray(out), parents, bw, "conv2d_fp")


def linear(x, w, bias=None):
    """``x @ w.T + bias`` with ``x`` [N, in] and ``w`` [out, in]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise _shape_error("linear", x.shape, w.shape)
    out = x.data @ w.data.T
    parents = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, w, bias)

    def bw(g):
        grads = (g @ w.data, g.T @ x.data)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return _make(out, parents, bw, "linear")


def batchnorm_eval_np(x, gamma, beta, running_mean, running_var, eps):
    """Frozen batchnorm on a raw array; shared by the dense and packed paths."""
    shp = (1, -1, 1, 1)
    inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
    return (x - running_mean.astype(x.dtype).reshape(shp)) * (inv * gamma).reshape(shp) + beta.reshape(shp)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch normalization over (N, H, W) per channel.

    In training mode the running statistics arrays are updated in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise _shape_error("batchnorm2d", x.shape, gamma.shape)
    shp = (1, -1, 1, 1)
    if not training:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.data.dtype)
        xhat = (x.data - running_mean.astype(x.data.dtype).reshape(shp)) * inv.reshape(shp)
        out = batchnorm_eval_np(x.data, gamma.data, beta.data, running_mean, running_var, eps)

        def bw_eval(g):
            return (
                g * (inv * gamma.data).reshape(shp),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

        return _make(out, (x, gamma, beta), bw_eval, "batchnorm2d")

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu.reshape(shp)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * (m / max(m - 1, 1))

    def bw(g):
        dxhat = g * gamma.data.reshape(shp)
        s1 = dxhat.sum(axis=(0, 2, 3)).reshape(shp)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shp)
        gx = (inv.reshape(shp) / m) * (m * dxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(out, (x, gamma, beta), bw, "batchnorm2d")


def avgpool2x2(x):
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x2: spatial dims must be even, got {(h, w)}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        g4 = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * x.data.dtype.type(0.25)
        return (g4,)

    return _make(out, (x,), bw, "avgpool2x2")


def global_avgpool(x):
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _make(
        out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),), "global_avgpool"
    )


def spatial_shift(x, dy=1, dx=1):
    """Shift content by (dy, dx) towards the origin, replicating the far edge.

    ``out[i, j] = x[min(i + dy, H - 1), min(j + dx, W - 1)]``.
    """
    x = as_tensor(x)
    h, w = x.shape[2], x.shape[3]
    rows = np.minimum(np.arange(h) + dy, h - 1)
    cols = np.minimum(np.arange(w) + dx, w - 1)
    out = x.data[:, :, rows][:, :, :, cols]

    def bw(g):
        # gather matrices: out = R @ x @ C.T, so dx = R.T @ g @ C
        r = np.zeros((h, h), dtype=g.dtype)
        r[np.arange(h), rows] = 1
        c = np.zeros((w, w), dtype=g.dtype)
        c[np.arange(w), cols] = 1
        return (r.T @ (g @ c),)

    return _make(out, (x,), bw, "spatial_shift")


def fit_channels(x, n):
    """Keep the first ``n`` channels of ``x``, zero-padding if it has fewer."""
    x = as_tensor(x)
    c = x.shape[1]
    if c == n:
        return x
    if c > n:
        return index(x, (slice(None), slice(0, n)))
    pad = Tensor(np.zeros((x.shape[0], n - c) + x.shape[2:], dtype=x.data.dtype))
    return concat([x, pad], axis=1)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(fn, x, eps=1e-6, max_coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a Tensor to a scalar Tensor.  The relative error per
    coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with default_dtype(np.float64):
        out = fn(xt)
        backward(out)
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
    flat = np.arange(x0.size)
    if max_coords is not None and x0.size > max_coords:
        rng = rng or np.random.default_rng(0)
        flat = rng.choice(x0.size, size=max_coords, replace=False)
    worst = 0.0
    with no_grad(), default_dtype(np.float64):
        for i in flat:
            xp, xm = x0.copy(), x0.copy()
            xp.flat[i] += eps
            xm.flat[i] -= eps
            num = (fn(Tensor(xp)).item() - fn(Tensor(xm)).item()) / (2 * eps)
            a = analytic.flat[i]
            worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst
