"""Small reverse-mode autodiff engine over numpy arrays.

Every op builds a node holding its output array and a closure that maps the
output gradient to gradients of its parents.  ``Tensor.backward`` walks the
graph in reverse topological order and accumulates into ``.grad``.

Feature maps are laid out as [batch, channel, height, width].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

IN_EPS = 1e-5
BN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """An array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg), p.shape)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # arithmetic -----------------------------------------------------------
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
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Parameter(Tensor):
    """A learnable leaf tensor."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True, name: str | None = None):
        super().__init__(data, requires_grad=trainable, name=name)
        self.trainable = trainable


def tensor(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _node(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus_np(z) -> np.ndarray:
    z = np.asarray(z)
    # x + ln(1 + e^-x) for x > 0, ln(1 + e^x) otherwise
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def softplus(x) -> Tensor:
    """ln(1 + exp(x)) with derivative sigmoid(x)."""
    x = _lift(x)
    s = _sigmoid_np(x.data)
    return _node(softplus_np(x.data), (x,), lambda g: (g * s,), "softplus")


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(x.data.sum(axis=axis)), (x,), back, "sum")


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def index(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.asarray(x.data[idx]), (x,), back, "index")


def stack(items: Sequence[Tensor]) -> Tensor:
    items = [_lift(t) for t in items]
    data = np.stack([t.data for t in items])
    return _node(data, items, lambda g: tuple(g[i] for i in range(len(items))), "stack")


# feature-map ops -----------------------------------------------------------

def _check4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op} expects [n, c, h, w], got shape {x.shape}")
    if x.shape[2] * x.shape[3] < 1:
        raise ValueError(f"{op}: zero spatial extent")


def _check_vec(v: Tensor, c: int, what: str) -> None:
    if v.shape != (c,):
        raise ValueError(f"{what} must have shape ({c},), got {v.shape}")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = IN_EPS) -> Tensor:
    """Per-sample, per-channel spatial normalization with affine gamma/beta.

    Statistics use the population variance and are accumulated in float64.
    """
    _check4(x, "instance_norm")
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    _check_vec(gamma, c, "gamma")
    _check_vec(beta, c, "beta")
    xd = x.data.astype(np.float64)
    m = x.shape[2] * x.shape[3]
    mu = xd.mean(axis=(2, 3), keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data.astype(np.float64)[None, :, None, None]
    out = gd * xhat + beta.data.astype(np.float64)[None, :, None, None]

    def back(g):
        g = g.astype(np.float64)
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        dx = inv / m * (
            m * dxhat
            - dxhat.sum(axis=(2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
        )
        return (dx.astype(x.dtype), dgamma.astype(gamma.dtype), dbeta.astype(beta.dtype))

    return _node(out.astype(x.dtype), (x, gamma, beta), back, "instance_norm")


@dataclass
class RunningStats:
    """Batch-norm running mean/variance buffers (not trained)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def zeros(cls, c: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    training: bool,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over all axes but the channel axis (axis 1).

    Works on [n, c] and [n, c, h, w]. In training mode batch statistics are
    used and the running buffers are updated in place.
    """
    if x.ndim not in (2, 4):
        raise ValueError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    c = x.shape[1]
    _check_vec(gamma, c, "gamma")
    _check_vec(beta, c, "beta")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data.astype(np.float64)
    m = xd.size // c
    gd = gamma.data.astype(np.float64).reshape(bshape)
    bd = beta.data.astype(np.float64).reshape(bshape)
    if not training:
        inv = 1.0 / np.sqrt(stats.var.astype(np.float64).reshape(bshape) + eps)
        xhat = (xd - stats.mean.astype(np.float64).reshape(bshape)) * inv

        def back_eval(g):
            g = g.astype(np.float64)
            return (
                (g * gd * inv).astype(x.dtype),
                (g * xhat).sum(axis=axes).astype(gamma.dtype),
                g.sum(axis=axes).astype(beta.dtype),
            )

        return _node((gd * xhat + bd).astype(x.dtype), (x, gamma, beta), back_eval, "batch_norm")

    if m < 2:
        raise ValueError("batch_norm in training mode needs more than one value per channel")
    mu = xd.mean(axis=axes, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    mom = stats.momentum
    stats.mean[...] = (1 - mom) * stats.mean + mom * mu.reshape(c)
    stats.var[...] = (1 - mom) * stats.var + mom * var.reshape(c) * m / (m - 1)

    def back(g):
        g = g.astype(np.float64)
        dxhat = g * gd
        dx = inv / m * (
            m * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return (
            dx.astype(x.dtype),
            (g * xhat).sum(axis=axes).astype(gamma.dtype),
            g.sum(axis=axes).astype(beta.dtype),
        )

    return _node((gd * xhat + bd).astype(x.dtype), (x, gamma, beta), back, "batch_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per (sample, channel): [n, c, h, w] -> [n, c]."""
    _check4(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.astype(np.float64).mean(axis=(2, 3)).astype(x.dtype)

    def back(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),)

    return _node(out, (x,), back, "global_avg_pool")


def scale_channels(x: Tensor, a: Tensor) -> Tensor:
    """x[n, k, :, :] * a[n, k]."""
    _check4(x, "scale_channels")
    if a.shape != x.shape[:2]:
        raise ValueError(f"gate shape {a.shape} does not match {x.shape[:2]}")
    ad = a.data[:, :, None, None]
    xd = x.data
    return _node(
        xd * ad,
        (x, a),
        lambda g: (g * ad, (g * xd).sum(axis=(2, 3))),
        "scale_channels",
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with weight shaped [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents: tuple = (x, weight)
    if bias is not None:
        _check_vec(bias, weight.shape[0], "bias")
        out = out + bias.data
        parents = (x, weight, bias)

    def back(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _node(out, parents, back, "linear")


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation, weight [out, in, kh, kw], zero padding.

    Default padding is kh // 2 (same-size output at stride 1 for odd kernels).
    """
    _check4(x, "conv2d")
    if weight.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"conv2d: weight {weight.shape} incompatible with input {x.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    o, c, kh, kw = weight.shape
    pad = kh // 2 if padding is None else padding
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    n, _, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: kernel larger than padded input")
    # cols: [n, c, ho, wo, kh, kw]
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    wd = weight.data
    out = np.einsum("nchwij,ocij->nohw", cols, wd, optimize=True)

    def back(g):
        dw = np.einsum("nohw,nchwij->ocij", g, cols, optimize=True)
        dcols = np.einsum("nohw,ocij->nchwij", g, wd, optimize=True)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[..., i, j]
        dx = dxp[:, :, pad : pad + xd.shape[2], pad : pad + xd.shape[3]] if pad else dxp
        return (dx, dw)

    return _node(out.astype(xd.dtype), (x, weight), back, "conv2d")


# distances and losses ------------------------------------------------------

def cosine_distance_rows(x: Tensor, y: Tensor, guard: float = 0.0) -> Tensor:
    """Row-wise d(x, y) = 0.5 - x.y / (2 |x| |y|) for [m, c] inputs.

    With ``guard == 0`` a zero-norm row raises; otherwise ``guard`` is added
    to each norm.
    """
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"cosine_distance_rows: shapes {x.shape} and {y.shape}")
    xd = x.data.astype(np.float64)
    yd = y.data.astype(np.float64)
    nx = np.sqrt((xd * xd).sum(axis=1))
    ny = np.sqrt((yd * yd).sum(axis=1))
    if guard == 0.0 and (np.any(nx == 0) or np.any(ny == 0)):
        raise ValueError("cosine distance of a zero-norm vector")
    gx, gy = nx + guard, ny + guard
    dot = (xd * yd).sum(axis=1)
    cos = dot / (gx * gy)
    out = np.clip(0.5 - 0.5 * cos, 0.0, 1.0)
    # d|x|/dx = x/|x|, zero at the origin
    ux = np.divide(xd, nx[:, None], out=np.zeros_like(xd), where=nx[:, None] > 0)
    uy = np.divide(yd, ny[:, None], out=np.zeros_like(yd), where=ny[:, None] > 0)

    def back(g):
        g = g.astype(np.float64)[:, None]
        dcos_dx = yd / (gx * gy)[:, None] - (cos / gx)[:, None] * ux
        dcos_dy = xd / (gx * gy)[:, None] - (cos / gy)[:, None] * uy
        return ((-0.5 * g * dcos_dx).astype(x.dtype), (-0.5 * g * dcos_dy).astype(y.dtype))

    return _node(out.astype(x.dtype), (x, y), back, "cosine_distance")


def cosine_distance(x, y, guard: float = 0.0) -> Tensor:
    """d(x, y) for two vectors; returns a scalar tensor."""
    x = _lift(x)
    y = _lift(y, x)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"cosine_distance: shapes {x.shape} and {y.shape}")
    return reshape(cosine_distance_rows(reshape(x, (1, -1)), reshape(y, (1, -1)), guard), ())


def euclidean_rows(x: Tensor, i: np.ndarray, j: np.ndarray, eps: float = 1e-12) -> Tensor:
    """sqrt(|x[i] - x[j]|^2 + eps) for index arrays i, j over the rows of x."""
    i = np.asarray(i, dtype=np.intp)
    j = np.asarray(j, dtype=np.intp)
    xd = x.data.astype(np.float64)
    diff = xd[i] - xd[j]
    dist = np.sqrt((diff * diff).sum(axis=1) + eps)

    def back(g):
        gd = (g.astype(np.float64) / dist)[:, None] * diff
        full = np.zeros_like(xd)
        np.add.at(full, i, gd)
        np.add.at(full, j, -gd)
        return (full.astype(x.dtype),)

    return _node(dist.astype(x.dtype), (x,), back, "euclidean_rows")


def softmax_cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy against label-smoothed targets.

    Target mass is 1 - smoothing on the true class and smoothing / (K - 1)
    on each other class.
    """
    if logits.ndim != 2:
        raise ValueError("logits must be [n, K]")
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per row required")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError("label out of range")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.full((n, k), smoothing / (k - 1) if k > 1 else 0.0)
    target[np.arange(n), labels] = 1.0 - smoothing if k > 1 else 1.0
    loss = -(target * logp).sum() / n

    def back(g):
        return (((np.exp(logp) - target) * (float(g) / n)).astype(logits.dtype),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), back, "softmax_cross_entropy")


# gradient checking ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    per_input: list[float] = field(default_factory=list)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-4,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn(*inputs)`` to central differences.

    Inputs are promoted to float64 in place.  The error of each coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-3 * scale), where
    scale is the largest numeric gradient magnitude over all inputs.  With
    ``max_coords`` set, larger inputs are checked on a seeded random subset of
    that many coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for t in inputs:
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar output, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    pick = np.random.default_rng(seed)
    numeric, checked = [], []
    for t in inputs:
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        ks = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            ks = np.sort(pick.choice(flat.size, max_coords, replace=False))
        checked.append(ks)
        for k in ks:
            orig = flat[k]
            flat[k] = orig + step
            fp = float(fn(*inputs).data)
            flat[k] = orig - step
            fm = float(fn(*inputs).data)
            flat[k] = orig
            nflat[k] = (fp - fm) / (2 * step)
        numeric.append(num)

    scale = max((float(np.abs(n).max()) for n in numeric if n.size), default=0.0)
    floor = max(1e-3 * scale, 1e-12)
    per_input = []
    for a, n, ks in zip(analytic, numeric, checked):
        if ks.size == 0:
            per_input.append(0.0)
            continue
        a, n = a.reshape(-1)[ks], n.reshape(-1)[ks]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        per_input.append(float((np.abs(a - n) / denom).max()))
    worst = max(per_input, default=0.0)
    return GradCheckReport(max_rel_error=worst, passed=worst < tol, tol=tol, per_input=per_input)
