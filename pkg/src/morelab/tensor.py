"""Dense f32 tensors with reverse-mode automatic differentiation.

Design constraints: row-major numpy storage, explicit shapes (no implicit
broadcasting beyond the two bias-add forms), f32 everywhere except inside the
finite-difference oracle, NaN/Inf rejected at op boundaries.  The computation
graph lives on the output tensors themselves as parent links plus a backward
closure; ``backward`` replays it in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DisconnectedTensor,
    LabelOutOfRange,
    NonFiniteValue,
    ShapeMismatch,
)

__all__ = [
    "Tensor",
    "add",
    "add_bias",
    "add_channel_bias",
    "backward",
    "colmul",
    "conv2d",
    "cross_entropy",
    "finite_diff_gradient",
    "matmul",
    "max_pool2d",
    "mean",
    "mul",
    "relu",
    "reshape",
    "scale",
    "sgd_step",
    "softmax",
    "sub",
    "sum_all",
    "take_column",
]


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"non-finite values in {what}")


class Tensor:
    """A dense f32 array, optionally participating in the autodiff graph.

    ``data`` is immutable by convention once the tensor has entered a graph;
    ``grad`` is the only buffer mutated afterwards (by ``backward`` and the
    optimizer's zero-fill).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _make_node(
    out_data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], None],
    what: str,
) -> Tensor:
    """Wrap an op result; record the graph only if a parent needs gradients."""
    _check_finite(out_data, what)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add {a.shape} vs {b.shape}")

    def bwd(g, a=a, b=b):
        _accum(a, g)
        _accum(b, g)

    return _make_node(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub {a.shape} vs {b.shape}")

    def bwd(g, a=a, b=b):
        _accum(a, g)
        _accum(b, -g)

    return _make_node(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul {a.shape} vs {b.shape}")

    def bwd(g, a=a, b=b):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteValue
        out_data = a.data * b.data
    return _make_node(out_data, (a, b), bwd, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = np.float32(c)

    def bwd(g, x=x, c=c):
        _accum(x, g * c)

    with np.errstate(over="ignore"):
        out_data = x.data * c
    return _make_node(out_data, (x,), bwd, "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias add: x[B, K] + b[K].  The one sanctioned broadcast."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"add_bias {x.shape} vs {b.shape}")

    def bwd(g, x=x, b=b):
        _accum(x, g)
        _accum(b, g.sum(axis=0))

    return _make_node(x.data + b.data, (x, b), bwd, "add_bias")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Per-channel bias add: x[B, F, H, W] + b[F]."""
    if x.data.ndim != 4 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"add_channel_bias {x.shape} vs {b.shape}")

    def bwd(g, x=x, b=b):
        _accum(x, g)
        _accum(b, g.sum(axis=(0, 2, 3)))

    return _make_node(x.data + b.data[None, :, None, None], (x, b), bwd, "add_channel_bias")


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, np.float32(0))

    def bwd(g, x=x):
        # subgradient at exactly 0 is 0 by the strict comparison
        _accum(x, g * (x.data > 0))

    return _make_node(out_data, (x,), bwd, "relu")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeMismatch(f"reshape {x.shape} -> {shape}")

    def bwd(g, x=x):
        _accum(x, g.reshape(x.shape))

    return _make_node(x.data.reshape(shape), (x,), bwd, "reshape")


def sum_all(x: Tensor) -> Tensor:
    def bwd(g, x=x):
        _accum(x, np.full(x.shape, g, dtype=np.float32))

    return _make_node(x.data.sum(dtype=np.float32).reshape(()), (x,), bwd, "sum")


def mean(x: Tensor) -> Tensor:
    inv = np.float32(1.0 / x.data.size)

    def bwd(g, x=x, inv=inv):
        _accum(x, np.full(x.shape, g * inv, dtype=np.float32))

    return _make_node(x.data.mean(dtype=np.float32).reshape(()), (x,), bwd, "mean")


def take_column(x: Tensor, j: int) -> Tensor:
    """Select column j of x[B, M] as a length-B vector."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"take_column on shape {x.shape}")
    if not 0 <= j < x.shape[1]:
        raise ShapeMismatch(f"column {j} out of range for shape {x.shape}")

    def bwd(g, x=x, j=j):
        gx = np.zeros(x.shape, dtype=np.float32)
        gx[:, j] = g
        _accum(x, gx)

    return _make_node(np.ascontiguousarray(x.data[:, j]), (x,), bwd, "take_column")


def colmul(x: Tensor, s: Tensor) -> Tensor:
    """Scale row b of x[B, K] by s[b]; the mixture-weighting kernel."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ShapeMismatch(f"colmul {x.shape} vs {s.shape}")

    def bwd(g, x=x, s=s):
        _accum(x, g * s.data[:, None])
        _accum(s, (g * x.data).sum(axis=1))

    return _make_node(x.data * s.data[:, None], (x, s), bwd, "colmul")


# ---------------------------------------------------------------------------
# matmul / conv / pooling
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims {a.shape} x {b.shape}")

    def bwd(g, a=a, b=b):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make_node(a.data @ b.data, (a, b), bwd, "matmul")


def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Layout [C*kh*kw, B*ho*wo] so the convolution is a single GEMM."""
    b, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, b * ho * wo)


def _col2im(
    dcols: np.ndarray, xp_shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int
) -> np.ndarray:
    b, c = xp_shape[:2]
    dxp = np.zeros(xp_shape, dtype=np.float32)
    dcols = dcols.reshape(c, kh, kw, b, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                :, i, j
            ].transpose(1, 0, 2, 3)
    return dxp


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x[B, C, H, W] with kernels[F, C, kh, kw]."""
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D operands, got {x.shape} and {kernels.shape}")
    bsz, c, h, w = x.shape
    f, ck, kh, kw = kernels.shape
    if ck != c:
        raise ShapeMismatch(f"conv2d channels: input {c} vs kernel {ck}")
    if stride < 1:
        raise ShapeMismatch(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)  # [C*kh*kw, B*ho*wo]
    kmat = kernels.data.reshape(f, c * kh * kw)
    out_data = (kmat @ cols).reshape(f, bsz, ho, wo).transpose(1, 0, 2, 3)

    def bwd(g, x=x, kernels=kernels, cols=cols, kmat=kmat, xp_shape=xp.shape):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, bsz * ho * wo)
        if kernels.requires_grad:
            _accum(kernels, (gm @ cols.T).reshape(kernels.shape))
        if x.requires_grad:
            dcols = kmat.T @ gm
            dxp = _col2im(dcols, xp_shape, kh, kw, stride, ho, wo)
            dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
            _accum(x, dx)

    return _make_node(np.ascontiguousarray(out_data), (x, kernels), bwd, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping size x size max pooling; H and W must divide evenly."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"max_pool2d expects 4-D input, got {x.shape}")
    bsz, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeMismatch(f"max_pool2d: {h}x{w} not divisible by {size}")
    xv = x.data
    out_data: np.ndarray | None = None
    for i in range(size):
        for j in range(size):
            window = xv[:, :, i::size, j::size]
            out_data = window.copy() if out_data is None else np.maximum(out_data, window, out=out_data)

    def bwd(g, x=x, out_data=out_data):
        # gradient routes to the first max in row-major window order
        dx = np.zeros(x.shape, dtype=np.float32)
        taken = np.zeros(g.shape, dtype=bool)
        for i in range(size):
            for j in range(size):
                window = x.data[:, :, i::size, j::size]
                win = (window == out_data) & ~taken
                dx[:, :, i::size, j::size] = g * win
                taken |= win
        _accum(x, dx)

    return _make_node(out_data, (x,), bwd, "max_pool2d")


# ---------------------------------------------------------------------------
# softmax / cross-entropy
# ---------------------------------------------------------------------------


def softmax(z: Tensor) -> Tensor:
    """Stable softmax over the last axis of a 1-D or 2-D tensor."""
    if z.data.ndim not in (1, 2):
        raise ShapeMismatch(f"softmax expects 1-D or 2-D input, got {z.shape}")
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, z=z, out_data=out_data):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(z, out_data * (g - dot))

    return _make_node(out_data, (z,), bwd, "softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood with a fused log-sum-exp.

    ``labels`` is an integer array of shape [B]; a 1-D logits tensor is
    treated as a batch of one.
    """
    z = logits.data if logits.data.ndim == 2 else logits.data[None, :]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    bsz, k = z.shape
    if labels.shape[0] != bsz:
        raise ShapeMismatch(f"cross_entropy: {bsz} rows vs {labels.shape[0]} labels")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise LabelOutOfRange(f"labels must lie in [0, {k})")

    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    picked = z[np.arange(bsz), labels]
    out_data = (lse - picked).mean(dtype=np.float32).reshape(())

    def bwd(g, logits=logits, shifted=shifted, labels=labels):
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(bsz), labels] -= 1.0
        dz = (g / np.float32(bsz)) * p
        _accum(logits, dz.reshape(logits.shape))

    return _make_node(out_data, (logits,), bwd, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float32)
    if t.grad is None:
        t.grad = g.reshape(t.shape).copy()
    else:
        t.grad += g.reshape(t.shape)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Reverse-mode gradients of a scalar loss.

    With ``wrt`` given, returns the gradient arrays for exactly those tensors
    (raising DisconnectedTensor for any that the loss does not depend on) and
    leaves every other tensor's ``grad`` untouched.  Without ``wrt``, every
    reachable ``requires_grad`` leaf gets its ``grad`` buffer (re)filled.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")

    order = _toposort(loss)
    by_id = {id(n): n for n in order}

    targets = list(wrt) if wrt is not None else None
    if targets is not None:
        missing = [t for t in targets if id(t) not in by_id]
        if missing:
            raise DisconnectedTensor(
                f"{len(missing)} wrt tensor(s) not reachable from the loss"
            )

    # stash pre-call grads so non-wrt tensors can be left untouched
    saved: dict[int, np.ndarray | None] = {}
    for node in order:
        if node.requires_grad:
            saved[id(node)] = node.grad
            node.grad = None

    loss.grad = np.ones(loss.shape, dtype=np.float32)
    for node in reversed(order):
        if node._backward_fn is None or node.grad is None:
            continue
        node._backward_fn(node.grad)

    if targets is None:
        # keep grads on requires_grad leaves, clear intermediates
        for node in order:
            if node._parents and node.grad is not None:
                node.grad = None
        return None

    wrt_ids = {id(t) for t in targets}
    results: list[np.ndarray] = []
    collected = {tid: by_id[tid].grad for tid in wrt_ids}
    for node in order:
        if id(node) in saved and id(node) not in wrt_ids:
            node.grad = saved[id(node)]
    for t in targets:
        g = collected[id(t)]
        if g is None:
            g = np.zeros(t.shape, dtype=np.float32)
        t.grad = g
        results.append(g)
    return results


# ---------------------------------------------------------------------------
# gradient oracle and optimizer step
# ---------------------------------------------------------------------------


def finite_diff_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Independent of the reverse-mode path: only forward evaluations, with the
    difference quotient accumulated in f64 against the actually-representable
    step (f32 rounding of x +/- h cancels out of the quotient).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = x.data.reshape(-1)
    grad = np.empty(base.shape[0], dtype=np.float64)
    for i in range(base.shape[0]):
        xp = base.copy()
        xm = base.copy()
        xp[i] = np.float32(base[i] + np.float32(h))
        xm[i] = np.float32(base[i] - np.float32(h))
        step = float(xp[i]) - float(xm[i])
        fp = f(Tensor(xp.reshape(x.shape))).item()
        fm = f(Tensor(xm.reshape(x.shape))).item()
        grad[i] = (fp - fm) / step
    return Tensor(grad.reshape(x.shape).astype(np.float32))


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    lr: float,
    momentum: float = 0.0,
    velocities: list[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """In-place SGD update: v <- momentum*v + g; p <- p - lr*v.

    Returns the velocity buffers so callers can thread them through steps.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} params vs {len(grads)} grads")
    if velocities is None:
        velocities = [np.zeros(p.shape, dtype=np.float32) for p in params]
    lr32 = np.float32(lr)
    mom32 = np.float32(momentum)
    for p, g, v in zip(params, grads, velocities):
        g = np.asarray(g, dtype=np.float32)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad shape {g.shape} vs param {p.data.shape}")
        v *= mom32
        v += g
        p.data -= lr32 * v
    return velocities


class SGD:
    """Momentum SGD over a fixed parameter list, buffers owned by the instance."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocities = [np.zeros(p.shape, dtype=np.float32) for p in self.params]

    def step(self) -> None:
        grads = []
        for p in self.params:
            grads.append(p.grad if p.grad is not None else np.zeros(p.shape, dtype=np.float32))
        sgd_step(self.params, grads, self.lr, self.momentum, self.velocities)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
