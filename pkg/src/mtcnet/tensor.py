"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every op builds a node holding its parents and a closure that pushes the
output gradient back to them. ``Tensor.backward`` walks the graph in reverse
topological order. Arrays are plain C-ordered ``numpy.float64``.
"""
from __future__ import annotations

import contextlib
import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
_DEBUG = False


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar argument is outside its valid range."""


class EvaluationError(RuntimeError):
    """A computation produced non-finite values."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or truncated."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool) -> None:
    """Toggle non-finite assertions after every op."""
    global _DEBUG
    _DEBUG = bool(flag)


class SeededRng:
    """PCG64 stream keyed by a 64-bit seed; ``child`` derives independent streams."""

    def __init__(self, seed: int, *key: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.key])))

    def child(self, *key: int) -> "SeededRng":
        return SeededRng(self.seed, *self.key, *key)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, n):
        return self._gen.permutation(n)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # graph bookkeeping

    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward) -> "Tensor":
        if _DEBUG and not np.all(np.isfinite(data)):
            raise EvaluationError("non-finite value produced")
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, True, tuple(parents), backward)

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Param(Tensor):
    """Named leaf tensor; ``trainable=False`` marks frozen weights."""

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def init_weight(rng: SeededRng, d_in: int, d_out: int, name: str, trainable: bool = True) -> Param:
    bound = 1.0 / math.sqrt(d_in)
    return Param(rng.uniform(-bound, bound, size=(d_in, d_out)), name, trainable)


def init_zeros(shape, name: str, trainable: bool = True) -> Param:
    return Param(np.zeros(shape), name, trainable)


def init_ones(shape, name: str, trainable: bool = True) -> Param:
    return Param(np.ones(shape), name, trainable)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return Tensor._make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere)."""
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    x2 = x * x
    t = np.tanh(c * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), back)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return Tensor._make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather ``table[ids]`` along axis 0 (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, *shape[1:]))
        return (full,)

    return Tensor._make(table.data[ids], (table,), back)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(out, (a,), back)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes into one GEMM
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*ad.shape[:-1], bd.shape[-1])

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            return ((g2 @ bd.T).reshape(ad.shape), ad.reshape(-1, ad.shape[-1]).T @ g2)

        return Tensor._make(out, (a, b), back)
    out = ad @ bd

    def back(g):
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.multiply.outer(ad, g) if bd.ndim == 2 else None
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape} does not match weight {w.shape}")
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalisers


def softmax_rows(x, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``x / temperature`` (row-max stabilised)."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    x = as_tensor(x)
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return ((g - (g * p).sum(axis=-1, keepdims=True)) * p / temperature,)

    return Tensor._make(p, (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return Tensor._make(out, (x,), lambda g: (g - g.sum(axis=-1, keepdims=True) * p,))


def layer_norm(x, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x = as_tensor(x)
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm: width {d} vs scale {scale.shape} / shift {shift.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    s = scale.data
    out = xhat * s + shift.data

    def back(g):
        gx_hat = g * s
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._make(out, (x, scale, shift), back)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit norm; zero rows stay zero."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    safe = np.where(n > eps, n, 1.0)
    y = np.where(n > eps, x.data / safe, 0.0)

    def back(g):
        gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(n > eps, gx, 0.0),)

    return Tensor._make(y, (x,), back)


# ---------------------------------------------------------------- losses


def token_nll(logits: Tensor, targets, mask=None) -> Tensor:
    """Sum over positions of ``-log softmax(logits)[target]``; masked positions skipped."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"token_nll: logits {logits.shape} vs targets {targets.shape}")
    m = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = -(picked * m).sum()

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * m[..., None],)

    return Tensor._make(np.asarray(out), (logits,), back)


def info_nce(logits: Tensor, positives) -> Tensor:
    """Mean over rows of ``-log(sum_pos softmax(logits))``; rows without positives skipped."""
    pos = np.asarray(positives, dtype=bool)
    rows = pos.any(axis=-1)
    if not rows.any():
        return Tensor(np.asarray(0.0))
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p_all = e / e.sum(axis=-1, keepdims=True)
    ep = np.where(pos, e, 0.0)
    sp = ep.sum(axis=-1, keepdims=True)
    p_pos = ep / np.where(sp > 0, sp, 1.0)
    per_row = -np.log(np.where(rows, sp[..., 0], 1.0)) + np.log(e.sum(axis=-1))
    n = rows.sum()
    out = (per_row * rows).sum() / n

    def back(g):
        return (g * (p_all - p_pos) * rows[:, None] / n,)

    return Tensor._make(np.asarray(out), (logits,), back)


# ---------------------------------------------------------------- gradient check


def grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Param], eps: float = 1e-5,
               max_entries: int | None = None, rng: SeededRng | None = None) -> dict[str, float]:
    """Max relative error per trainable param between backprop and central differences.

    ``max_entries`` caps how many coordinates of each param are probed (chosen by ``rng``).
    """
    if not eps > 0:
        raise ParameterError("eps must be positive")
    params = [p for p in params if p.trainable]
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise EvaluationError("loss is not finite")
    loss.backward()
    report = {}
    with no_grad():
        for p in params:
            analytic = p.grad.copy()
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = (rng or SeededRng(0)).choice(flat.size, max_entries, replace=False)
            worst = 0.0
            for i in idx:
                old = flat[i]
                flat[i] = old + eps
                fp = float(loss_fn().data)
                flat[i] = old - eps
                fm = float(loss_fn().data)
                flat[i] = old
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise EvaluationError(f"non-finite loss while probing {p.name}")
                num = (fp - fm) / (2 * eps)
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
            report[p.name] = worst
    return report


# ---------------------------------------------------------------- checkpoint I/O

_CKPT_MAGIC = b"MTCW"
_CKPT_VERSION = 1


def save_params(params: dict[str, np.ndarray], path) -> None:
    """Write ``name -> array`` in the MTCW little-endian layout."""
    parts = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("checkpoint truncated")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last parameter")
    return out
