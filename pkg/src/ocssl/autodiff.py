"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation appends a node to an implicit graph: nodes carry a global
creation sequence number, so reverse creation order is a valid reverse
topological order. ``Tensor.backward`` walks that order once.

Only the handful of operations the SSL losses and MLPs need are provided.
"""

from __future__ import annotations

import itertools
import logging
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_seq = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Diagnostics:
    """Counters for numerically degenerate inputs seen during forward passes."""

    def __init__(self):
        self.zero_norm_rows = 0

    def reset(self):
        self.zero_norm_rows = 0


diagnostics = Diagnostics()


class Tensor:
    """A float64 array that can take part in a differentiation graph.

    Leaves created with ``requires_grad=True`` accumulate ``grad`` across
    backward calls until ``zero_grad`` is called. Tensors with
    ``requires_grad=False`` are constants: they receive and propagate no
    gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _op(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._seq = next(_seq)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        """Stop-gradient: same values, no graph connection."""
        return Tensor._op(self.data, (), None)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- differentiation -------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes = _reachable(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t._seq, reverse=True)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=np.float64), like.shape))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor._op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor._op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._op(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._op(np.log(ad), (a,), lambda g: (g / ad,))


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``relu``, ``scale``."""
    table = {"add": add, "sub": sub, "mul": mul, "relu": relu, "scale": scale}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


# -- reductions and reshaping ------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._op(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return Tensor._op(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Row slice ``a[start:stop]`` of a 2-D tensor."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return Tensor._op(a.data[start:stop], (a,), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if len(parts) == 1:
        return parts[0]
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: trailing shapes differ: {sorted(widths)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor._op(np.concatenate([p.data for p in parts], axis=0), parts, back)


def transpose(a: Tensor) -> Tensor:
    return Tensor._op(a.data.T, (a,), lambda g: (g.T,))


# -- linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x + bias`` with a length-n bias broadcast over the rows of ``x``."""
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    return Tensor._op(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)))


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner products of two ``b x n`` tensors."""
    _same_shape("rowdot", a, b)
    ad, bd = a.data, b.data
    return Tensor._op(
        np.einsum("ij,ij->i", ad, bd), (a, b),
        lambda g: (g[:, None] * bd, g[:, None] * ad),
    )


def l2_normalize(v: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale each row (or a single vector) to unit Euclidean norm.

    The norm is stabilized as ``||v|| + eps``; rows whose norm is not above
    ``eps`` are counted in ``diagnostics.zero_norm_rows``.
    """
    squeeze = v.ndim == 1
    x = v.data[None, :] if squeeze else v.data
    norm = np.sqrt(np.einsum("ij,ij->i", x, x))[:, None]
    degenerate = int(np.count_nonzero(norm <= eps))
    if degenerate:
        diagnostics.zero_norm_rows += degenerate
        logger.debug("l2_normalize: %d zero-norm rows", degenerate)
    denom = norm + eps
    y = x / denom

    def back(g):
        g2 = g[None, :] if squeeze else g
        # d(x/(|x|+e)) = g/(|x|+e) - x * <g, x> / ((|x|+e)^2 |x|)
        safe = np.where(norm > 0, norm, 1.0)
        proj = np.einsum("ij,ij->i", g2, x)[:, None]
        gx = g2 / denom - x * proj / (denom * denom * safe)
        return (gx[0] if squeeze else gx,)

    return Tensor._op(y[0] if squeeze else y, (v,), back)


# -- normalization ---------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    training: bool,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    track: bool = True,
) -> Tensor:
    """Batch normalization over the rows of ``x``.

    In training mode the batch statistics are used and, when ``track`` is
    set, ``running_mean``/``running_var`` are updated in place (unbiased
    variance, as is conventional). In eval mode the running statistics are
    used and the op is affine in ``x``.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects a 2-D batch, got {x.shape}")
    n = x.shape[1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError("batch_norm: gamma/beta width mismatch")
    b = x.shape[0]
    xd, gd = x.data, gamma.data

    if training:
        if b < 2:
            raise ValueError("batch_norm in training mode needs at least 2 rows")
        mu = xd.mean(axis=0)
        xc = xd - mu
        var = (xc * xc).mean(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if track and running_mean is not None and running_var is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * b / (b - 1)

        def back(g):
            gxhat = g * gd
            gx = inv / b * (b * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
            return gx, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm eval mode needs running statistics")
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean) * inv

        def back(g):
            return g * gd * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    return Tensor._op(xhat * gd + beta.data, (x, gamma, beta), back)


# -- pieces for softmax cross-entropy ------------------------------------------------------


def logsumexp_rows(a: Tensor, where: np.ndarray | None = None) -> Tensor:
    """Row-wise log-sum-exp, optionally over a boolean mask of included entries."""
    x = a.data
    mask = np.ones(x.shape, dtype=bool) if where is None else np.asarray(where, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("logsumexp_rows: a row has no included entries")
    masked = np.where(mask, x, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = e / s
    return Tensor._op(out, (a,), lambda g: (g[:, None] * soft,))


def pick(a: Tensor, cols: np.ndarray) -> Tensor:
    """``out[i] = a[i, cols[i]]``."""
    cols = np.asarray(cols, dtype=np.int64)
    idx = np.arange(a.shape[0])
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[idx, cols] = g
        return (full,)

    return Tensor._op(a.data[idx, cols], (a,), back)


# -- gradient oracle -------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-4,
    floor: float = 1e-3,
) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor. The relative
    error of each coordinate is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    out.backward()
    g_ad = np.zeros_like(x0) if leaf.grad is None else leaf.grad

    g_fd = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = g_fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x0)).item()
        flat[i] = orig - eps
        fm = f(Tensor(x0)).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), floor)
    return float(np.max(np.abs(g_ad - g_fd) / denom))


def parameters_grad_free(params: Iterable[Tensor]) -> bool:
    """True when none of ``params`` holds a gradient."""
    return all(p.grad is None for p in params)
