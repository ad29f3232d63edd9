"""Dense f64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy float64 array plus an optional gradient buffer.
Operations record a tape implicitly through parent links and backward
closures; ``backward(loss)`` walks the graph in reverse topological order
and accumulates gradients into every reachable tensor that requires them.

Everything is float64 and reduction orders are fixed, so identically
seeded runs produce bit-identical results on the same build.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "ShapeError",
    "Tensor",
    "tensor",
    "constant",
    "no_grad",
    "grad_enabled",
    "matmul",
    "bmm",
    "add",
    "sub",
    "mul",
    "bmul",
    "badd",
    "neg",
    "scale",
    "concat",
    "narrow",
    "transpose",
    "swap_axes",
    "reshape",
    "role_shift",
    "sum_all",
    "mean_all",
    "softmax",
    "layer_norm",
    "gelu",
    "dropout",
    "mse_loss",
    "backward",
    "CounterRng",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class _GradMode:
    enabled = True


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        self._prev = _GradMode.enabled
        _GradMode.enabled = False
        return self

    def __exit__(self, *exc):
        _GradMode.enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _GradMode.enabled


class Tensor:
    """A node in the computation graph holding a float64 ndarray.

    ``data`` is treated as immutable once the tensor participates in a
    recorded computation; only ``grad`` accumulates in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    if _GradMode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss.

    Populates ``grad`` on every requires_grad tensor reachable from
    ``loss``.  Repeated calls without clearing gradients accumulate.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Iterative DFS topological sort; graphs can exceed the recursion limit.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # Closures may hand the same array to several parents, so a buffer is
    # only mutated in place once this pass owns it (first join copies).
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = {id(loss)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g if node._bwd is not None else np.array(g, dtype=np.float64)
        else:
            node.grad = node.grad + g
        if node._bwd is None:
            continue
        parent_grads = node._bwd(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._bwd is None:
                if p.grad is None:
                    p.grad = np.array(pg, dtype=np.float64)
                else:
                    p.grad = p.grad + pg
            else:
                pid = id(p)
                held = grads.get(pid)
                if held is None:
                    grads[pid] = pg
                elif pid in owned:
                    held += pg
                else:
                    grads[pid] = held + pg
                    owned.add(pid)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return (g @ b.data.T, a.data.T @ g)

    return _node(out, (a, b), bwd)


def bmm(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Batched matrix product: (B,m,k) @ (B,k,n), optionally (B,n,k)^T."""
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"bmm needs rank-3 operands, got {a.shape} @ {b.shape}")
    bd = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if a.shape[0] != b.shape[0] or a.shape[2] != bd.shape[1]:
        raise ShapeError(f"bmm shape mismatch: {a.shape} @ {bd.shape}")
    out = a.data @ bd

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if transpose_b:
            gb = np.swapaxes(gb, -1, -2)
        return (ga, gb)

    return _node(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# elementwise suite


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs identical shapes, got {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def badd(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting add: b is broadcast against a's shape (bias add)."""
    out = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _node(out, (a, b), bwd)


def bmul(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting multiply (soft gating by per-sample scalars)."""
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat of an empty sequence")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(ts)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(idx)])
        return pieces

    return _node(out, tuple(ts), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow out of range: axis {axis} [{start}:{start + length}) of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros(a.shape)  # calloc: untouched pages stay zero
        ga[idx] = g
        return (ga,)

    return _node(out, (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose is rank-2 only, got {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2).copy()
    return _node(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


class ShiftIndex:
    """Precompiled partial permutation of the last axis.

    ``src[j]`` is the source index feeding output j, -1 for zero; ``inv``
    is its inverse (well defined because nonnegative entries are
    distinct), which makes the backward pass another gather.
    """

    __slots__ = ("src_clipped", "src_mask", "inv_clipped", "inv_mask")

    def __init__(self, src: np.ndarray):
        src = np.asarray(src, dtype=np.int64)
        inv = np.full(len(src), -1, dtype=np.int64)
        for j, s in enumerate(src):
            if s >= 0:
                inv[s] = j
        self.src_clipped = np.where(src < 0, 0, src)
        self.src_mask = (src >= 0).astype(np.float64) if (src < 0).any() else None
        self.inv_clipped = np.where(inv < 0, 0, inv)
        self.inv_mask = (inv >= 0).astype(np.float64) if (inv < 0).any() else None


def role_shift(a: Tensor, shift: ShiftIndex) -> Tensor:
    """Apply a precompiled partial permutation: out[..., j] = a[..., src[j]]."""
    out = a.data[..., shift.src_clipped]
    if shift.src_mask is not None:
        out *= shift.src_mask

    def bwd(g):
        ga = g[..., shift.inv_clipped]
        if shift.inv_mask is not None:
            ga *= shift.inv_mask
        return (ga,)

    return _node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and nonlinearities


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())
    return _node(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum() / n)
    return _node(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def softmax(a: Tensor, axis: int) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), bwd)


_LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        gg = g * gain.data
        dmean = gg.mean(axis=-1, keepdims=True)
        dproj = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = (gg - dmean - xhat * dproj) * inv
        axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=axes)
        gbias = g.sum(axis=axes)
        return (gx, ggain, gbias)

    return _node(out, (x, gain, bias), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF gelu: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    out = x.data * phi_cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi_cdf + x.data * pdf),)

    return _node(out, (x,), bwd)


def dropout(x: Tensor, p: float, rng: "CounterRng", train: bool) -> Tensor:
    """Inverted dropout; identity when evaluating or p == 0."""
    if not train or p <= 0.0:
        return x
    keep = rng.uniform(x.shape) >= p
    return bmul(x, constant(keep / (1.0 - p)))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_same_shape("mse_loss", pred, target)
    d = sub(pred, target)
    return mean_all(mul(d, d))


# ---------------------------------------------------------------------------
# seeded counter-based randomness


class CounterRng:
    """Counter-based RNG: each draw keys a fresh Philox stream.

    State is the (seed, counter) pair, which serializes into checkpoints so
    interrupted runs resume with an identical random stream.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed)
        self.counter = int(counter)

    def _gen(self) -> np.random.Generator:
        g = np.random.Generator(np.random.Philox(key=[self.seed, self.counter]))
        self.counter += 1
        return g

    def uniform(self, shape) -> np.ndarray:
        return self._gen().random(shape)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        return self._gen().integers(low, high, size=size)

    def gumbel(self, shape) -> np.ndarray:
        u = self._gen().random(shape)
        return -np.log(-np.log(u + 1e-20) + 1e-20)

    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)
