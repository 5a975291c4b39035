"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs carry a node on it.
Tensors without a tape are constants; operations on constants return
constants and record nothing, which keeps inference and finite-difference
evaluation cheap.

Broadcasting is deliberately narrow. Two operands of a binary elementwise
operation must either share a shape, or the smaller one must be

* a scalar (shape ``()``),
* a vector matching the last (channel) axis of the other, or
* a ``b x n`` matrix matching the first and last axes of the other
  (one channel vector per batch element).

Anything else raises :class:`DimensionError`.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NonFiniteError

__all__ = [
    "Tensor", "Tape", "as_tensor", "add", "sub", "mul", "div", "neg",
    "square", "matmul", "conv2d", "gap", "spatial_sum", "activation",
    "softplus", "concat", "upsample_nearest", "avgpool2", "reshape",
    "transpose", "sum", "mean", "standardize", "slice_rows", "stack_rows",
    "backward", "grad_check",
]

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Append-only record of differentiable operations.

    Node ``i`` stores the ids of its inputs, a vector-Jacobian closure and
    the operation name. Inputs are always recorded before their consumers,
    so walking the node list backwards is a valid reverse topological order.
    """

    def __init__(self, check_finite: bool = False):
        self.check_finite = check_finite
        self.kinds: list[str] = []
        self.parents: list[tuple[int | None, ...]] = []
        self.vjps: list[VJP | None] = []
        self.shapes: list[tuple[int, ...]] = []
        self.gradients: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.kinds)

    def _record(self, kind, value, parents, vjp) -> int:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(
                f"non-finite value produced by node {len(self.kinds)} ({kind})")
        self.kinds.append(kind)
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.shapes.append(value.shape)
        return len(self.kinds) - 1

    def variable(self, data, name: str | None = None) -> "Tensor":
        """Register ``data`` as a differentiable leaf on this tape."""
        value = np.array(data, dtype=np.float64)
        t = Tensor(value, name=name)
        t.tape = self
        t.node_id = self._record("leaf" if name is None else f"leaf:{name}",
                                 value, (), None)
        return t

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Propagate d(loss) back to every ancestor node.

        Returns (and stores in :attr:`gradients`) a map from node id to the
        gradient array, shaped like the node's value.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ContractError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            vjp = self.vjps[nid]
            if g is None or vjp is None:
                continue
            for pid, pg in zip(self.parents[nid], vjp(g)):
                if pid is None or pg is None:
                    continue
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else prev + pg
        self.gradients = grads
        return grads

    def grad(self, t: "Tensor") -> np.ndarray:
        """Gradient of the last backward pass w.r.t. ``t`` (zeros if unreached)."""
        if t.tape is not self:
            raise ContractError("tensor is not recorded on this tape")
        g = self.gradients.get(t.node_id)
        return np.zeros(t.shape) if g is None else g


class Tensor:
    """A float64 array, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "tape", "node_id", "name")
    __array_priority__ = 100

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape: Tape | None = None
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = "const" if self.tape is None else f"node={self.node_id}"
        return f"Tensor(shape={self.shape}, {tag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError(f"{kind}: operands live on different tapes")
            tape = t.tape
    out = Tensor(value)
    if tape is not None:
        parents = tuple(t.node_id if t.tape is tape else None for t in inputs)
        out.tape = tape
        out.node_id = tape._record(kind, value, parents, vjp)
    return out


# -- broadcasting helpers ----------------------------------------------------

def _broadcast(kind, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    for small, big in ((a, b), (b, a)):
        if small == ():
            return big
        if len(small) == 1 and len(big) >= 1 and small[0] == big[-1]:
            return big
        if (len(small) == 2 and len(big) > 2
                and small[0] == big[0] and small[1] == big[-1]):
            return big
    raise DimensionError(f"{kind}: cannot combine shapes {a} and {b}")


def _expand(x: np.ndarray, big: tuple) -> np.ndarray:
    if x.ndim == 2 and len(big) > 2:
        return x.reshape((x.shape[0],) + (1,) * (len(big) - 2) + (x.shape[1],))
    return x


def _reduce(g: np.ndarray, small: tuple) -> np.ndarray:
    if g.shape == small:
        return g
    if small == ():
        return np.asarray(g.sum())
    if len(small) == 1:
        return g.reshape(-1, small[0]).sum(axis=0)
    return g.reshape(small[0], -1, small[1]).sum(axis=1)


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    out = _expand(a.data, shape) + _expand(b.data, shape)
    return _make("add", out, (a, b), lambda g: (_reduce(g, sa), _reduce(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    out = _expand(a.data, shape) - _expand(b.data, shape)
    return _make("sub", out, (a, b), lambda g: (_reduce(g, sa), -_reduce(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast("mul", a.shape, b.shape)
    ea, eb = _expand(a.data, shape), _expand(b.data, shape)

    need_a, need_b = a.tape is not None, b.tape is not None

    def vjp(g):
        return (_reduce(g * eb, a.shape) if need_a else None,
                _reduce(g * ea, b.shape) if need_b else None)
    return _make("mul", ea * eb, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast("div", a.shape, b.shape)
    ea, eb = _expand(a.data, shape), _expand(b.data, shape)
    out = ea / eb

    def vjp(g):
        return _reduce(g / eb, a.shape), _reduce(-g * out / eb, b.shape)
    return _make("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make("square", x * x, (a,), lambda g: (2.0 * x * g,))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of an ``r x c`` and a ``c x k`` tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    need_a, need_b = a.tape is not None, b.tape is not None
    return _make("matmul", A @ B, (a, b),
                 lambda g: (g @ B.T if need_a else None, A.T @ g if need_b else None))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {shape}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def _same_padding(k: int) -> tuple[int, int]:
    total = k - 1
    return total // 2, total - total // 2


def conv2d(x, k, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation of NHWC input with an ``kh x kw x m x n`` kernel.

    ``padding="same"`` zero-pads ``floor((k-1)/2)`` before and the remainder
    after each spatial axis; ``"valid"`` does not pad.
    """
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape}, {k.shape}")
    b, h, w, m = x.shape
    kh, kw, km, n = k.shape
    if km != m:
        raise DimensionError(f"conv2d: input has {m} channels, kernel expects {km}")
    if stride < 1:
        raise ContractError("conv2d: stride must be a positive integer")
    if padding == "same":
        (pt, pb), (pl, pr) = _same_padding(kh), _same_padding(kw)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ContractError(f"conv2d: unknown padding {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    X = x.data
    if pt or pb or pl or pr:
        X = np.pad(X, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    K = k.data
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    def window(i, j):
        return (slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
                slice(j, j + stride * (wo - 1) + 1, stride), slice(None))

    out = np.zeros((b * ho * wo, n))
    for i in range(kh):
        for j in range(kw):
            out += X[window(i, j)].reshape(-1, m) @ K[i, j]
    out = out.reshape(b, ho, wo, n)

    need_x, need_k = x.tape is not None, k.tape is not None

    def vjp(g):
        g2 = g.reshape(-1, n)
        dX = np.zeros_like(X) if need_x else None
        dK = np.empty_like(K) if need_k else None
        for i in range(kh):
            for j in range(kw):
                sl = window(i, j)
                if need_k:
                    dK[i, j] = X[sl].reshape(-1, m).T @ g2
                if need_x:
                    dX[sl] += (g2 @ K[i, j].T).reshape(b, ho, wo, m)
        return (dX[:, pt:pt + h, pl:pl + w, :] if need_x else None), dK
    return _make("conv2d", out, (x, k), vjp)


# -- pooling and resampling ----------------------------------------------------

def _require_4d(kind, x):
    if x.ndim != 4:
        raise DimensionError(f"{kind}: expected b x h x w x m input, got {x.shape}")


def gap(x) -> Tensor:
    """Channel-wise global average pooling, ``b x h x w x m -> b x m``."""
    x = as_tensor(x)
    _require_4d("gap", x)
    b, h, w, m = x.shape
    scale = 1.0 / (h * w)
    out = x.data.mean(axis=(1, 2))
    return _make("gap", out, (x,),
                 lambda g: (np.broadcast_to((g * scale)[:, None, None, :], (b, h, w, m)).copy(),))


def spatial_sum(x) -> Tensor:
    """Sum over the spatial axes, ``b x h x w x m -> b x m``."""
    x = as_tensor(x)
    _require_4d("spatial_sum", x)
    shape = x.shape
    return _make("spatial_sum", x.data.sum(axis=(1, 2)), (x,),
                 lambda g: (np.broadcast_to(g[:, None, None, :], shape).copy(),))


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    _require_4d("upsample_nearest", x)
    b, h, w, m = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)
    return _make("upsample_nearest", out, (x,),
                 lambda g: (g.reshape(b, h, factor, w, factor, m).sum(axis=(2, 4)),))


def avgpool2(x) -> Tensor:
    """2x2 average pooling with stride 2."""
    x = as_tensor(x)
    _require_4d("avgpool2", x)
    b, h, w, m = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2: spatial dims must be even, got {h}x{w}")
    out = x.data.reshape(b, h // 2, 2, w // 2, 2, m).mean(axis=(2, 4))

    def vjp(g):
        g4 = np.broadcast_to((0.25 * g)[:, :, None, :, None, :], (b, h // 2, 2, w // 2, 2, m))
        return (g4.reshape(b, h, w, m),)
    return _make("avgpool2", out, (x,), vjp)


# -- nonlinearities ----------------------------------------------------------

def activation(x, kind: str) -> Tensor:
    """Elementwise ``relu``/``sigmoid``/``tanh``/``elu``, or channel-halving ``glu``."""
    x = as_tensor(x)
    X = x.data
    if kind == "relu":
        mask = X > 0
        return _make("relu", np.maximum(X, 0.0), (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        s = expit(X)
        return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))
    if kind == "tanh":
        t = np.tanh(X)
        return _make("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))
    if kind == "elu":
        neg_part = np.expm1(np.minimum(X, 0.0))
        mask = X > 0
        out = np.where(mask, X, neg_part)
        return _make("elu", out, (x,), lambda g: (g * np.where(mask, 1.0, neg_part + 1.0),))
    if kind == "glu":
        c = X.shape[-1]
        if c % 2:
            raise DimensionError(f"glu: channel count must be even, got {c}")
        a, b = X[..., : c // 2], X[..., c // 2:]
        s = expit(b)

        def vjp(g):
            return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)
        return _make("glu", a * s, (x,), vjp)
    raise ContractError(f"unknown activation {kind!r}")


def softplus(x) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    x = as_tensor(x)
    X = x.data
    return _make("softplus", np.logaddexp(0.0, X), (x,), lambda g: (g * expit(X),))


# -- structural ----------------------------------------------------------------

def concat(a, b) -> Tensor:
    """Concatenate two ``b x p`` and ``b x q`` tensors along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    p = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make("concat", out, (a, b), lambda g: (g[:, :p], g[:, p:]))


def slice_rows(x, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the leading (batch) axis."""
    x = as_tensor(x)
    shape = x.shape
    if not 0 <= start < stop <= shape[0]:
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for {shape}")

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)
    return _make("slice_rows", x.data[start:stop].copy(), (x,), vjp)


def stack_rows(parts: Sequence) -> Tensor:
    """Concatenate tensors along the leading axis (inverse of :func:`slice_rows`)."""
    parts = [as_tensor(p) for p in parts]
    tails = {p.shape[1:] for p in parts}
    if len(tails) != 1:
        raise DimensionError(f"stack_rows: trailing shapes differ: {sorted(tails)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=0)

    def vjp(g):
        return [g[bounds[i]:bounds[i + 1]] for i in range(len(parts))]
    return _make("stack_rows", out, parts, vjp)


# -- reductions ----------------------------------------------------------------

def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape
    return _make("sum", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.full(shape, float(g)),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    n = x.data.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    return _make("mean", np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(shape, float(g) / n),))


def standardize(x, eps: float = 1e-8) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel standardization over every axis but the last.

    Returns ``(x_hat, mean, biased_var)``; only ``x_hat`` is differentiable.
    """
    x = as_tensor(x)
    X = x.data
    c = X.shape[-1]
    flat = X.reshape(-1, c)
    mu = flat.mean(axis=0)
    var = flat.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * inv

    def vjp(g):
        gf = g.reshape(-1, c)
        xf = xhat.reshape(-1, c)
        dx = inv * (gf - gf.mean(axis=0) - xf * (gf * xf).mean(axis=0))
        return (dx.reshape(X.shape),)
    return _make("standardize", xhat, (x,), vjp), mu, var


# -- differentiation entry points ----------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


def grad_check(f: Callable[..., Tensor], inputs: Sequence, step: float = 1e-6) -> float:
    """Maximum relative error between tape gradients and central differences.

    ``f`` receives one tensor per entry of ``inputs`` and must return a
    scalar tensor. The per-coordinate error is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tape = Tape(check_finite=True)
    leaves = [tape.variable(a) for a in arrays]
    loss = f(*leaves)
    tape.backward(loss)
    worst = 0.0
    for idx, base in enumerate(arrays):
        analytic = tape.grad(leaves[idx])
        for pos in np.ndindex(base.shape):
            args = list(arrays)
            plus, minus = base.copy(), base.copy()
            plus[pos] += step
            minus[pos] -= step
            args[idx] = plus
            fp = float(f(*[Tensor(a) for a in args]).data)
            args[idx] = minus
            fm = float(f(*[Tensor(a) for a in args]).data)
            numeric = (fp - fm) / (2.0 * step)
            if not np.isfinite(numeric):
                raise NonFiniteError(f"non-finite finite difference at input {idx}{pos}")
            a = float(analytic[pos])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
