"""Dense tensors with reverse-mode automatic differentiation.

A dynamic tape is rebuilt for every forward pass: while a GradTape is
active, every primitive that touches a tensor with requires_grad=True
appends a node (output, parents, backward closure) to it.  backward()
walks the tape once, in reverse insertion order, accumulating gradients
into .grad buffers.  With no active tape the primitives compute values
only, which is what inference uses.

Training runs in float32; tests that do finite-difference checks switch
to float64 via default_dtype()/set_default_dtype().
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError, StanError

_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DTYPE
    if dtype not in (np.float32, np.float64):
        raise StanError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the global float precision (used by grad checks)."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@dataclass
class TapeNode:
    out: "Tensor"
    parents: tuple
    backward_fn: object  # grad_out -> tuple of parent grads (or None per parent)


class GradTape:
    """Append-only record of primitives, replayed in reverse by backward()."""

    _active: "GradTape | None" = None

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._used = False

    def __enter__(self):
        if GradTape._active is not None:
            raise StanError("nested GradTapes are not supported")
        GradTape._active = self
        return self

    def __exit__(self, *exc):
        GradTape._active = None
        return False

    def record(self, out, parents, backward_fn):
        self.nodes.append(TapeNode(out, tuple(parents), backward_fn))
        out._tape = self


class Tensor:
    """n-dimensional float array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic used all over the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _record(out, parents, backward_fn):
    tape = GradTape._active
    if tape is not None and out.requires_grad:
        tape.record(out, parents, backward_fn)


def _needs_grad(*tensors) -> bool:
    return GradTape._active is not None and any(t.requires_grad for t in tensors)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # copy: backward closures may hand out views of shared buffers
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    The tape the loss was recorded on is consumed; calling backward twice
    on the same tape is rejected.
    """
    if loss.size != 1:
        raise StanError("backward() needs a scalar loss")
    tape = loss._tape
    if tape is None:
        raise StanError("loss was not recorded on any tape")
    if tape._used:
        raise StanError("tape already consumed by a previous backward()")
    tape._used = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for parent, gp in zip(node.parents, grads):
            if gp is not None and parent.requires_grad:
                _accumulate(parent, gp)


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, requires_grad=_needs_grad(a, b))
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, requires_grad=_needs_grad(a, b))
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, requires_grad=_needs_grad(a, b))
    _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, requires_grad=_needs_grad(a))
    _record(out, (a,), lambda g: (g * c,))
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), requires_grad=_needs_grad(a))
    mask = a.data > 0
    _record(out, (a,), lambda g: (g * mask,))
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, requires_grad=_needs_grad(a))
    _record(out, (a,), lambda g: (g * y * (1.0 - y),))
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, requires_grad=_needs_grad(a))
    _record(out, (a,), lambda g: (g * (1.0 - y * y),))
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=_needs_grad(a))

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    _record(out, (a,), bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), requires_grad=_needs_grad(a))
    _record(out, (a,), lambda g: (g.reshape(a.shape),))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes), requires_grad=_needs_grad(a))
    inv = [0] * len(axes)
    for i, ax in enumerate(axes):
        inv[ax] = i
    _record(out, (a,), lambda g: (g.transpose(inv),))
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of empty list")
    nd = tensors[0].data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat axis {axis} out of range for rank {nd}")
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        requires_grad=_needs_grad(*tensors),
    )
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx], requires_grad=_needs_grad(a))

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    _record(out, (a,), bwd)
    return out


def mean(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean(), requires_grad=_needs_grad(a))
    n = a.data.size
    _record(out, (a,), lambda g: (np.full_like(a.data, g / n),))
    return out


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), requires_grad=_needs_grad(a))
    _record(out, (a,), lambda g: (np.full_like(a.data, g),))
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """[C,H,W] -> [C] spatial mean."""
    if x.data.ndim != 3:
        raise ShapeError(f"global_avg_pool expects [C,H,W], got {x.shape}")
    out = Tensor(x.data.mean(axis=(1, 2)), requires_grad=_needs_grad(x))
    _, h, w = x.shape
    _record(out, (x,), lambda g: (np.broadcast_to(g[:, None, None] / (h * w), x.shape).copy(),))
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_needs_grad(a, b))
    _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over shared leading dims: [...,m,k] x [...,k,n]."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm inner dims disagree: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), requires_grad=_needs_grad(a, b))
    _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
            _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape),
        ),
    )
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., d_in] . w[d_out, d_in]^T (+ b[d_out])."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight width {w.shape[1]}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(y, requires_grad=_needs_grad(*parents))

    def bwd(g):
        g2 = g.reshape(-1, w.shape[0])
        x2 = x.data.reshape(-1, w.shape[1])
        gx = (g2 @ w.data).reshape(x.shape)
        gw = g2.T @ x2
        if b is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    _record(out, parents, bwd)
    return out


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift per channel."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data, requires_grad=_needs_grad(x, gamma, beta))
    n = x.shape[-1]

    def bwd(g):
        gg = g * gamma.data
        gx = inv * (
            gg
            - gg.mean(axis=-1, keepdims=True)
            - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=red), g.sum(axis=red))

    _record(out, (x, gamma, beta), bwd)
    return out


# ---------------------------------------------------------------------------
# spatial primitives
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """x[C_in,H,W] * w[C_out,C_in,kh,kw] -> [C_out,H',W']."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] and [O,C,kh,kw], got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin} vs kernel {cin_w}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError("conv2d kernel larger than padded input")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data

    y = np.zeros((cout, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
            y += np.einsum("oc,chw->ohw", w.data[:, :, i, j], patch)
    out = Tensor(y, requires_grad=_needs_grad(x, w))

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
                gw[:, :, i, j] = np.einsum("ohw,chw->oc", g, patch)
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                    "oc,ohw->chw", w.data[:, :, i, j], g
                )
        gx = gxp[:, padding : padding + h, padding : padding + wd] if padding else gxp
        return (gx, gw)

    _record(out, (x, w), bwd)
    return out


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Window maximum; the gradient goes to the first (row-major) argmax."""
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2d expects [C,H,W], got {x.shape}")
    stride = k if stride is None else stride
    c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError("maxpool2d window exceeds input")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    y = np.empty((c, ho, wo), dtype=x.data.dtype)
    arg = np.empty((c, ho, wo), dtype=np.int64)  # flat index into each k*k window
    for i in range(ho):
        for j in range(wo):
            win = x.data[:, i * stride : i * stride + k, j * stride : j * stride + k]
            flat = win.reshape(c, -1)
            a = flat.argmax(axis=1)  # first max in row-major order
            arg[:, i, j] = a
            y[:, i, j] = flat[np.arange(c), a]
    out = Tensor(y, requires_grad=_needs_grad(x))

    def bwd(g):
        gx = np.zeros_like(x.data)
        for i in range(ho):
            for j in range(wo):
                a = arg[:, i, j]
                ii = i * stride + a // k
                jj = j * stride + a % k
                # np.add.at handles overlapping windows hitting one cell
                np.add.at(gx, (np.arange(c), ii, jj), g[:, i, j])
        return (gx,)

    _record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Stabilized with max-subtraction; raises NumericalError on non-finite
    inputs so training fails fast instead of silently diverging.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N,K] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise StanError(f"label out of range [0,{k})")
    if not np.all(np.isfinite(logits.data)):
        raise NumericalError("non-finite logits in cross_entropy")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss_val = float((lse - z[np.arange(n), labels]).mean())
    if not np.isfinite(loss_val):
        raise NumericalError("non-finite cross_entropy loss")
    out = Tensor(loss_val, requires_grad=_needs_grad(logits))

    def bwd(g):
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    _record(out, (logits,), bwd)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    details: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(f, x: Tensor, eps: float = 1e-5, tol: float = 1e-3) -> GradCheckReport:
    """Compare the analytic gradient of scalar-valued f at x with central
    finite differences, elementwise.  Callers keep x away from kinks
    (relu zero, maxpool ties)."""
    x = Tensor(x.data, requires_grad=True)
    with GradTape():
        loss = f(x)
        backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    worst = 0.0
    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x.data)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x.data)).data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        worst = max(worst, _rel_err(float(aflat[i]), numeric))
    return GradCheckReport(max_rel_err=worst, tol=tol)


def grad_check_params(f, params: dict, eps: float = 1e-5, tol: float = 5e-3) -> GradCheckReport:
    """Finite-difference sweep over every element of every named parameter.

    f() re-runs the forward pass using the (possibly perturbed) parameter
    values and returns a scalar loss value as float.  Analytic gradients
    must already be populated on the parameters.
    """
    worst = 0.0
    details = []
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        pw = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            pw = max(pw, _rel_err(float(aflat[i]), numeric))
        details.append((name, pw))
        worst = max(worst, pw)
    return GradCheckReport(max_rel_err=worst, tol=tol, details=details)
