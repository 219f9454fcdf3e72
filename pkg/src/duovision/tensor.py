"""Dense float tensors with a reverse-mode gradient tape.

Design notes, in brief:

* Data lives in numpy ndarrays (row-major). float32 is the working
  precision for training; the gradient-check suite rebuilds the same
  graphs in float64 against central finite differences.
* Recording is opt-in: ops attach backward rules to the thread-local
  active `Tape` only when one exists and an input requires grad, so
  frozen-model inference pays for no graph.
* Every op verifies its output is finite and raises `NumericalError`
  otherwise; faults surface at the op that produced them.
* Broadcasting is limited to numpy-style alignment of leading/size-1
  axes (batch axes in practice); backward folds broadcast axes back by
  summation.
"""

import threading

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericalError, UsageError

_tls = threading.local()

FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> None:
    global FINITE_CHECKS
    FINITE_CHECKS = bool(enabled)


def _check(name, arr):
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} produced non-finite values")
    return arr


class Tensor:
    """A dense float array plus optional gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
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

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars go through shift/scale so no graph nodes
    # are spent on constant tensors
    def __add__(self, other):
        return shift(self, other) if isinstance(other, (int, float)) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if isinstance(other, (int, float)) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise UsageError("tensor/tensor division is not an op; scale by a constant instead")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of ops; reverse replay populates gradients.

    Appending order is execution order, so the reversed list is a valid
    topological order and each node is visited exactly once on the way
    back. `backward` clears the node list afterwards, which releases
    every intermediate the graph was keeping alive.
    """

    def __init__(self):
        self._nodes = []  # (out, inputs, backward_fn)

    def __enter__(self):
        stack = getattr(_tls, "stack", None)
        if stack is None:
            stack = _tls.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _append(self, out, inputs, backward_fn):
        self._nodes.append((out, inputs, backward_fn))

    def clear(self):
        self._nodes.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every recorded tensor reachable from loss."""
        if loss.shape != ():
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise UsageError("loss does not depend on any tracked tensor")
        loss.grad = np.ones((), dtype=loss.dtype)
        for out, inputs, backward_fn in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = gi.copy() if gi.base is not None or gi is g else gi
                else:
                    inp.grad = inp.grad + gi
            if out is not loss:
                out.grad = None  # consumers already ran; free the buffer
        self.clear()


def active_tape():
    stack = getattr(_tls, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Backward through the currently active tape."""
    tape = active_tape()
    if tape is None:
        raise UsageError("backward called with no active tape")
    tape.backward(loss)


def _make(out_data, name, inputs, backward_fn):
    _check(name, out_data)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._append(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_check(name, a, b):
    if a.dtype != b.dtype:
        raise DimensionError(f"{name}: dtype mismatch {a.dtype} vs {b.dtype}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("add", a, b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("mul", a, b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _make(a.data * s, "scale", (a,), lambda g: (g * s,))


def shift(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data + c, "shift", (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), "matmul", (a, b), bwd)


# ------------------------------------------------------------------- shape


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape {a.shape} -> {shape} changes element count")
    return _make(a.data.reshape(shape), "reshape", (a,),
                 lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(tensors)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 "concat", tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(f"narrow [{start}:{start + length}] outside axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return _make(a.data[sl], "narrow", (a,), bwd)


# --------------------------------------------------------------- gather ops


def gather(table: Tensor, ids) -> Tensor:
    """Row lookup: table [V, d], integer ids of any shape -> ids.shape + (d,)."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise UsageError("gather ids must be integers")
    if table.ndim != 2:
        raise DimensionError(f"gather table must be 2-d, got {table.shape}")

    def bwd(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], "gather", (table,), bwd)


def take_along_last(x: Tensor, idx) -> Tensor:
    """out[...] = x[..., idx[...]]; idx shape must equal x.shape[:-1]."""
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"take_along_last idx {idx.shape} vs x {x.shape}")

    def bwd(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0],
                 "take_along_last", (x,), bwd)


def place_rows(base: Tensor, rows: Tensor, positions) -> Tensor:
    """Overwrite base[b, positions[b, k], :] with rows[b, k, :].

    Positions must be unique per batch row. Backward routes the gradient
    of each written slot to `rows` and zeroes it in `base`.
    """
    positions = np.asarray(positions)
    if base.ndim != 3 or rows.ndim != 3 or positions.ndim != 2:
        raise DimensionError(f"place_rows expects base [B,L,D], rows [B,K,D], pos [B,K]; "
                             f"got {base.shape}, {rows.shape}, {positions.shape}")
    bsz = base.shape[0]
    bidx = np.arange(bsz)[:, None]
    out = base.data.copy()
    out[bidx, positions] = rows.data

    def bwd(g):
        gb = g.copy()
        gb[bidx, positions] = 0.0
        return gb, g[bidx, positions]

    return _make(out, "place_rows", (base, rows), bwd)


# ------------------------------------------------------------- activations


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_K = 0.044715


def gelu(x: Tensor) -> Tensor:
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(_GELU_K)
    xd = x.data
    inner = c * (xd + k * xd ** 3)
    t = np.tanh(inner)

    def bwd(g):
        dinner = c * (1.0 + 3.0 * k * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * dinner),)

    return _make(0.5 * xd * (1.0 + t), "gelu", (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, "softmax", (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"log_softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    y = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return _make(y, "log_softmax", (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs d={d}")
    eps = x.dtype.type(eps)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = np.sum(g * xhat, axis=lead)
        dbeta = np.sum(g, axis=lead)
        dxhat = g * gamma.data
        dx = inv * (dxhat
                    - np.mean(dxhat, axis=-1, keepdims=True)
                    - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(gamma.data * xhat + beta.data, "layer_norm", (x, gamma, beta), bwd)


# ----------------------------------------------------------------- pooling


def avg_pool2d(x: Tensor, stride: int) -> Tensor:
    """Non-overlapping window means over a square grid; kernel = stride.

    Accepts [g, g, d] or [B, g, g, d]. Backward spreads each output
    gradient uniformly (1/stride^2) over its window.
    """
    a = int(stride)
    if x.ndim not in (3, 4):
        raise DimensionError(f"avg_pool2d expects [g,g,d] or [B,g,g,d], got {x.shape}")
    g_ax = x.ndim - 3
    g0, g1 = x.shape[g_ax], x.shape[g_ax + 1]
    if g0 != g1:
        raise DimensionError(f"avg_pool2d grid must be square, got {x.shape}")
    if a <= 0 or g0 % a != 0:
        raise ConfigurationError(f"pool stride {a} does not divide grid side {g0}")
    out_side = g0 // a
    lead = x.shape[:g_ax]
    win = x.data.reshape(lead + (out_side, a, out_side, a, x.shape[-1]))
    y = win.mean(axis=(g_ax + 1, g_ax + 3))

    def bwd(g):
        per = (g / (a * a)).astype(g.dtype)
        up = np.repeat(np.repeat(per, a, axis=g_ax), a, axis=g_ax + 1)
        return (up,)

    return _make(y, "avg_pool2d", (x,), bwd)


# -------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(g.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(g.dtype),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), "sum", (x,), bwd)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]

    def bwd(g):
        if axis is None:
            return ((np.broadcast_to(g, x.shape) / count).astype(g.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(gg, x.shape) / count).astype(g.dtype),)

    return _make(np.mean(x.data, axis=axis, keepdims=keepdims), "mean", (x,), bwd)


# ------------------------------------------------------------- grad checks


def numeric_grad(fn, leaves, index, h: float = 1e-6):
    """Central finite differences of fn(*leaves) w.r.t. leaves[index]."""
    leaf = leaves[index]
    out = np.zeros(leaf.shape, dtype=np.float64)
    flat = leaf.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(*leaves).data)
        flat[i] = orig - h
        fm = float(fn(*leaves).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def gradcheck(fn, leaves, tol: float = 1e-5, h: float = 1e-6) -> float:
    """Compare analytic grads of scalar fn(*leaves) against finite differences.

    Leaves must be float64 tensors with requires_grad. Returns the worst
    relative error; raises AssertionError above tol.
    """
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise UsageError("gradcheck leaves must be float64")
        leaf.zero_grad()
    with Tape() as tape:
        out = fn(*leaves)
        tape.backward(out)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        numeric = numeric_grad(fn, leaves, i, h=h)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        rel = float(np.max(np.abs(analytic - numeric) / denom)) if leaf.size else 0.0
        worst = max(worst, rel)
    if worst >= tol:
        raise AssertionError(f"gradcheck failed: worst relative error {worst:.3e} >= {tol:.1e}")
    return worst
