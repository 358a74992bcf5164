"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Implements a define-by-run tape: every operation on `Tensor` records its
parents and a backward closure.  `backward()` topologically sorts the
recorded nodes and accumulates gradients into the leaves.  All storage is
numpy float64; broadcasting follows numpy semantics with gradients summed
back over broadcast axes.

Also provides the adaptive-moment optimizer used for both network training
and grasp synthesis, a central finite-difference oracle, gradient clipping,
and the binary parameter-checkpoint format (magic "GTKM").
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractViolation, NumericFault

__all__ = [
    "Tensor",
    "tensor",
    "param",
    "backward",
    "finite_diff_gradient",
    "check_gradient",
    "clip_global_norm",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

_node_counter = 0


def _next_id():
    global _node_counter
    _node_counter += 1
    return _node_counter


class Tensor:
    """A node on the computation tape wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "_bwd", "name", "nid", "op")

    def __init__(self, data, requires_grad=False, parents=(), bwd=None, name=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.parents = parents
        self._bwd = bwd
        self.name = name
        self.op = op
        self.nid = _next_id()

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, exponent):
        return powc(self, float(exponent))

    def __getitem__(self, idx):
        return take(self, idx)

    # convenience reductions
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, name=None):
    """Constant (non-trainable) tape leaf."""
    return Tensor(data, requires_grad=False, name=name)


def param(data, name=None):
    """Trainable tape leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# -- broadcasting helper ----------------------------------------------------


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents, bwd, op):
    return Tensor(data, parents=tuple(parents), bwd=bwd, op=op)


# -- elementwise arithmetic --------------------------------------------------


def add(a, b):
    out = _make(a.data + b.data, (a, b), None, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    out._bwd = bwd
    return out


def sub(a, b):
    out = _make(a.data - b.data, (a, b), None, "sub")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    out._bwd = bwd
    return out


def mul(a, b):
    out = _make(a.data * b.data, (a, b), None, "mul")

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    out._bwd = bwd
    return out


def div(a, b):
    out = _make(a.data / b.data, (a, b), None, "div")

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    out._bwd = bwd
    return out


def powc(a, p):
    out = _make(a.data**p, (a,), None, f"pow{p}")

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    out._bwd = bwd
    return out


def exp(a):
    e = np.exp(a.data)
    out = _make(e, (a,), None, "exp")
    out._bwd = lambda g: (g * e,)
    return out


def log(a):
    out = _make(np.log(a.data), (a,), None, "log")
    out._bwd = lambda g: (g / a.data,)
    return out


def sqrt(a):
    s = np.sqrt(a.data)
    out = _make(s, (a,), None, "sqrt")
    out._bwd = lambda g: (g * 0.5 / s,)
    return out


def sin(a):
    out = _make(np.sin(a.data), (a,), None, "sin")
    out._bwd = lambda g: (g * np.cos(a.data),)
    return out


def cos(a):
    out = _make(np.cos(a.data), (a,), None, "cos")
    out._bwd = lambda g: (-g * np.sin(a.data),)
    return out


def relu(a):
    mask = a.data > 0.0
    out = _make(np.where(mask, a.data, 0.0), (a,), None, "relu")
    out._bwd = lambda g: (g * mask,)
    return out


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = _make(s, (a,), None, "sigmoid")
    out._bwd = lambda g: (g * s * (1.0 - s),)
    return out


def tanh(a):
    t = np.tanh(a.data)
    out = _make(t, (a,), None, "tanh")
    out._bwd = lambda g: (g * (1.0 - t * t),)
    return out


def swish(a):
    """x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = _make(a.data * s, (a,), None, "swish")
    out._bwd = lambda g: (g * (s + a.data * s * (1.0 - s)),)
    return out


def abs_(a):
    sgn = np.sign(a.data)
    out = _make(np.abs(a.data), (a,), None, "abs")
    out._bwd = lambda g: (g * sgn,)
    return out


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    out = _make(a.data @ b.data, (a, b), None, "matmul")

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.outer(ad, g) if bd.ndim == 2 else None
            if gb is None:
                gb = ad[:, None] * g[..., None, :]
                gb = _unbroadcast(gb, bd.shape)
            return ga, gb
        if bd.ndim == 1:
            ga = g[..., :, None] * bd[None, :]
            ga = _unbroadcast(ga, ad.shape)
            gb = np.swapaxes(ad, -1, -2) @ g if ad.ndim == 2 else np.einsum("...ij,...i->j", ad, g)
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    out._bwd = bwd
    return out


def transpose(a, axes=None):
    out = _make(np.transpose(a.data, axes), (a,), None, "transpose")
    inv = None if axes is None else tuple(np.argsort(axes))
    out._bwd = lambda g: (np.transpose(g, inv),)
    return out


def reshape(a, shape):
    out = _make(a.data.reshape(shape), (a,), None, "reshape")
    out._bwd = lambda g: (g.reshape(a.shape),)
    return out


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, None, "concat")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    out._bwd = bwd
    return out


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = _make(np.stack([t.data for t in tensors], axis=axis), tensors, None, "stack")

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    out._bwd = bwd
    return out


def take(a, idx):
    """Basic or integer-array indexing; backward scatter-adds."""
    out = _make(a.data[idx], (a,), None, "take")

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    out._bwd = bwd
    return out


def sum_(a, axis=None, keepdims=False):
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), None, "sum")

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    out._bwd = bwd
    return out


def mean_(a, axis=None, keepdims=False):
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def max_(a, axis, keepdims=False):
    """Reduction max with subgradient routed to the (first) argmax."""
    idx = np.argmax(a.data, axis=axis)
    val = np.max(a.data, axis=axis, keepdims=keepdims)
    out = _make(val, (a,), None, "max")

    def bwd(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis=axis)
        return (ga,)

    out._bwd = bwd
    return out


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make(s, (a,), None, "softmax")

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    out._bwd = bwd
    return out


def maximum_c(a, c):
    """Elementwise max with a constant."""
    mask = a.data > c
    out = _make(np.where(mask, a.data, c), (a,), None, "maximum_c")
    out._bwd = lambda g: (g * mask,)
    return out


def minimum_c(a, c):
    mask = a.data < c
    out = _make(np.where(mask, a.data, c), (a,), None, "minimum_c")
    out._bwd = lambda g: (g * mask,)
    return out


def where_mask(mask, a, b):
    """Select with a fixed boolean mask (not differentiated through)."""
    mask = np.asarray(mask, dtype=bool)
    out = _make(np.where(mask, a.data, b.data), (a, b), None, "where")

    def bwd(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    out._bwd = bwd
    return out


def linear(x, w, b=None):
    """Affine map on the last axis: x @ w (+ b)."""
    y = matmul(x, w)
    return y if b is None else y + b


def norm_rows(a, eps=0.0):
    """Euclidean norm along the last axis, keepdims."""
    sq = sum_(a * a, axis=-1, keepdims=True)
    if eps:
        sq = sq + eps
    return sqrt(sq)


def normalize_rows(a, eps=1e-12):
    return a / norm_rows(a, eps=eps)


# -- backward pass ----------------------------------------------------------


def _toposort(output):
    order = []
    visited = set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.nid in visited:
            continue
        visited.add(node.nid)
        stack.append((node, True))
        for p in node.parents:
            if p.nid not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def backward(output, check_finite=True):
    """Accumulate gradients of a scalar `output` into every reachable leaf.

    Leaves with `requires_grad` end up with `.grad` set.  The tape itself is
    not consumed; calling backward twice adds gradients again, so callers
    zero grads between steps.
    """
    if output.size != 1:
        raise ContractViolation(f"backward needs a scalar output, got shape {output.shape}")
    if check_finite and not np.isfinite(output.data).all():
        raise NumericFault(f"non-finite value at output node '{output.op}'")

    grads = {output.nid: np.ones_like(output.data)}
    for node in reversed(_toposort(output)):
        g = grads.pop(node.nid, None)
        if g is None:
            continue
        if check_finite and not np.isfinite(g).all():
            raise NumericFault(f"non-finite gradient flowing into node '{node.op}'")
        if node._bwd is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node._bwd(g)):
            if not p.requires_grad or pg is None:
                continue
            if p.nid in grads:
                grads[p.nid] = grads[p.nid] + pg
            else:
                grads[p.nid] = pg
    # leaves that are themselves intermediate (requires_grad via parents) keep
    # nothing; only true leaves (no parents) retain .grad


def zero_grads(params):
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


# -- finite differences ------------------------------------------------------


def finite_diff_gradient(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at x, same shape as x."""
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(x))
        flat[i] = old - eps
        fm = float(f(x))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericFault(f"non-finite function value in finite differences at index {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def check_gradient(f, x, eps=1e-6, coords=None, rng=None):
    """Compare reverse-mode and finite-difference gradients of scalar f.

    f maps a plain ndarray to a Tensor when given a Tensor, and to a float
    when given an ndarray (same code path works for both since Tensor
    supports the arithmetic used).  Returns the max relative error over the
    checked coordinates, with relative error defined against the largest
    gradient magnitude so that near-zero entries do not blow up the ratio.
    """
    xt = param(np.array(x, dtype=np.float64))
    out = f(xt)
    backward(out)
    g_ad = xt.grad if xt.grad is not None else np.zeros_like(xt.data)

    flat = np.array(x, dtype=np.float64)
    n = flat.size
    if coords is None:
        idx = np.arange(n)
    else:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(n, size=min(coords, n), replace=False)

    def scalar_f(arr):
        return float(f(tensor(arr)).data)

    scale = max(np.abs(g_ad).max(), 1e-8)
    worst = 0.0
    base = flat.ravel().copy()
    for i in idx:
        arr = flat.copy().ravel()
        arr[i] = base[i] + eps
        fp = scalar_f(arr.reshape(flat.shape))
        arr[i] = base[i] - eps
        fm = scalar_f(arr.reshape(flat.shape))
        g_fd = (fp - fm) / (2.0 * eps)
        err = abs(g_ad.ravel()[i] - g_fd) / max(scale, abs(g_fd))
        worst = max(worst, err)
    return worst


# -- optimizer ---------------------------------------------------------------


def clip_global_norm(grads, max_norm=10.0):
    """Scale a dict/list of gradient arrays so the global L2 norm <= max_norm."""
    vals = grads.values() if isinstance(grads, dict) else grads
    total = np.sqrt(sum(float((g * g).sum()) for g in vals))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    if isinstance(grads, dict):
        return {k: g * scale for k, g in grads.items()}, total
    return [g * scale for g in grads], total


class Adam:
    """Adaptive-moment optimizer over a dict of named parameter Tensors."""

    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads=None):
        """Apply one update; grads default to the .grad fields on the params."""
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = grads[k] if grads is not None else p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ContractViolation(f"gradient shape {g.shape} != param shape {p.data.shape} for '{k}'")
            if not np.isfinite(g).all():
                raise NumericFault(f"non-finite gradient for parameter '{k}'")
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**t)
            vhat = self.v[k] / (1 - b2**t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- checkpoint format -------------------------------------------------------

CHECKPOINT_MAGIC = b"GTKM"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params):
    """Write named float64 arrays to the self-describing binary format."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(params):
            arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for s in arr.shape:
                fh.write(struct.pack("<I", s))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into a dict of name -> ndarray."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ContractViolation(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ContractViolation(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            out[name] = data.astype(np.float64)
    return out
