"""Layers: dense/conv, the generative convolution, normalizations, residual blocks.

Functional forms (``gconv_forward_fused``, ``batchnorm`` ...) operate on
tensors directly. The ``Layer`` subclasses own their parameter arrays and
look them up in a name -> Tensor mapping at call time, so the same layer
can run on tape variables (training, gradient checks) or on plain
constants (inference).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, NormalizationError
from .tensor import Tensor

BN_EPS = 1e-8
BN_MOMENTUM = 0.9
GATE_REDUCTION = 8


# ---------------------------------------------------------------------------
# Initialization

def orthogonal(rng: np.random.Generator | None, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    """Random (semi-)orthogonal ``rows x cols`` matrix.

    ``rng=None`` returns zeros, for building models whose shapes are all that
    is needed (weight audits).
    """
    if rng is None:
        return np.zeros((rows, cols))
    flip = rows < cols
    a = rng.standard_normal((cols, rows) if flip else (rows, cols))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if flip:
        q = q.T
    return gain * q


# ---------------------------------------------------------------------------
# Generative convolution

@dataclass
class GConvParams:
    """Base kernel bank ``K`` (o x n), scaling weights ``W_s`` ((m + d_z) x n)
    and combination weights ``W_L`` (n x n) of one generative convolution.

    ``kernel_size`` holds ``(kh, kw)`` so that ``K`` can be reshaped to a
    ``kh x kw x m x n`` convolution kernel.
    """

    K: Tensor
    W_s: Tensor
    W_L: Tensor
    kernel_size: tuple[int, int] = (1, 1)
    bias: Tensor | None = None

    def __post_init__(self):
        self.K, self.W_s, self.W_L = (T.as_tensor(a) for a in (self.K, self.W_s, self.W_L))
        if self.bias is not None:
            self.bias = T.as_tensor(self.bias)
        o, n = self.K.shape
        kh, kw = self.kernel_size
        if o % (kh * kw):
            raise DimensionError(f"kernel bank rows {o} not divisible by {kh}x{kw}")
        if self.W_s.ndim != 2 or self.W_s.shape[1] != n:
            raise DimensionError(f"W_s must have {n} columns, got {self.W_s.shape}")
        if self.W_s.shape[0] <= self.in_channels:
            raise DimensionError(f"W_s rows {self.W_s.shape[0]} leave no room for a latent")
        if self.W_L.shape != (n, n):
            raise DimensionError(f"W_L must be {n}x{n}, got {self.W_L.shape}")

    @property
    def in_channels(self) -> int:
        kh, kw = self.kernel_size
        return self.K.shape[0] // (kh * kw)

    @property
    def out_channels(self) -> int:
        return self.K.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.W_s.shape[0] - self.in_channels

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        kh, kw = self.kernel_size
        return kh, kw, self.in_channels, self.out_channels

    @staticmethod
    def count(kh: int, kw: int, m: int, n: int, d_z: int) -> int:
        """Weights held by a bias-free generative convolution."""
        return kh * kw * m * n + (m + d_z) * n + n * n


def gconv_scaling(x_m, z, W_s) -> Tensor:
    """Per-sample kernel scaling values ``sigmoid([x_m, z] @ W_s)``, shape ``b x n``."""
    x_m, z, W_s = T.as_tensor(x_m), T.as_tensor(z), T.as_tensor(W_s)
    if x_m.ndim != 2 or z.ndim != 2:
        raise DimensionError(f"gconv_scaling: expected b x m and b x d_z, got {x_m.shape}, {z.shape}")
    if x_m.shape[1] + z.shape[1] != W_s.shape[0]:
        raise DimensionError(
            f"gconv_scaling: {x_m.shape[1]} + {z.shape[1]} inputs vs W_s rows {W_s.shape[0]}")
    return T.activation(T.matmul(T.concat(x_m, z), W_s), "sigmoid")


def gconv_select(K, s_row) -> Tensor:
    """Scale column ``i`` of the bank by ``s_i`` (``K @ Diag(s)``)."""
    K, s_row = T.as_tensor(K), T.as_tensor(s_row)
    n = K.shape[1]
    if s_row.data.size != n:
        raise DimensionError(f"gconv_select: {s_row.data.size} scales for {n} kernels")
    return T.mul(K, T.reshape(s_row, (n,)))


def gconv_combine(K_sel, W_L) -> Tensor:
    """Latent-specific kernels: linear recombination of the selected bank."""
    K_sel, W_L = T.as_tensor(K_sel), T.as_tensor(W_L)
    n = K_sel.shape[1]
    if W_L.shape != (n, n):
        raise DimensionError(f"gconv_combine: W_L must be {n}x{n}, got {W_L.shape}")
    return T.matmul(K_sel, W_L)


def _check_gconv_inputs(X, z, p: GConvParams):
    if X.ndim != 4:
        raise DimensionError(f"gconv: expected b x h x w x m input, got {X.shape}")
    if z.ndim != 2 or z.shape[0] != X.shape[0]:
        raise DimensionError(f"gconv: latent batch {z.shape} does not match input {X.shape}")
    if X.shape[3] != p.in_channels:
        raise DimensionError(f"gconv: input has {X.shape[3]} channels, kernel expects {p.in_channels}")


def _add_bias(Y, p: GConvParams):
    return Y if p.bias is None else T.add(Y, p.bias)


def gconv_forward_direct(X, z, p: GConvParams, padding: str = "same") -> Tensor:
    """Reference path: materialize a kernel bank per sample and convolve twice."""
    X, z = T.as_tensor(X), T.as_tensor(z)
    _check_gconv_inputs(X, z, p)
    kshape = p.kernel_shape
    base = T.conv2d(X, T.reshape(p.K, kshape), padding=padding)
    S = gconv_scaling(T.gap(X), z, p.W_s)
    per_sample = []
    for i in range(X.shape[0]):
        K_hat = gconv_combine(gconv_select(p.K, T.slice_rows(S, i, i + 1)), p.W_L)
        per_sample.append(T.conv2d(T.slice_rows(X, i, i + 1), T.reshape(K_hat, kshape),
                                   padding=padding))
    return _add_bias(T.add(base, T.stack_rows(per_sample)), p)


def gconv_forward_fused(X, z, p: GConvParams, padding: str = "same") -> Tensor:
    """One shared convolution, per-sample channel scaling, then a 1x1 mix by ``W_L``."""
    X, z = T.as_tensor(X), T.as_tensor(z)
    _check_gconv_inputs(X, z, p)
    n = p.out_channels
    base = T.conv2d(X, T.reshape(p.K, p.kernel_shape), padding=padding)
    S = gconv_scaling(T.gap(X), z, p.W_s)
    mixed = T.conv2d(T.mul(base, S), T.reshape(p.W_L, (1, 1, n, n)), padding="valid")
    return _add_bias(T.add(base, mixed), p)


def gdense_forward(x, z, p: GConvParams) -> Tensor:
    """Generative convolution on a 1x1 grid: a latent-conditioned dense layer."""
    x, z = T.as_tensor(x), T.as_tensor(z)
    if x.ndim != 2 or x.shape[1] != p.in_channels:
        raise DimensionError(f"gdense: expected b x {p.in_channels} input, got {x.shape}")
    if z.ndim != 2 or z.shape[0] != x.shape[0]:
        raise DimensionError(f"gdense: latent batch {z.shape} does not match input {x.shape}")
    base = T.matmul(x, p.K)
    S = gconv_scaling(x, z, p.W_s)
    return _add_bias(T.add(base, T.matmul(T.mul(base, S), p.W_L)), p)


# ---------------------------------------------------------------------------
# Spectral normalization

@dataclass
class PowerIterationState:
    """Persistent left/right singular vector estimates for one weight matrix."""

    u: np.ndarray
    v: np.ndarray

    @classmethod
    def init(cls, rows: int, cols: int, rng: np.random.Generator | None) -> "PowerIterationState":
        if rng is None:
            return cls(np.zeros(rows), np.zeros(cols))
        u = rng.standard_normal(rows)
        v = rng.standard_normal(cols)
        return cls(u / np.linalg.norm(u), v / np.linalg.norm(v))


def _unit(x: np.ndarray) -> np.ndarray:
    return x / max(np.linalg.norm(x), 1e-12)


def spectral_normalize(W, state: PowerIterationState, iters: int = 1,
                       update: bool = True) -> Tensor:
    """Divide ``W`` by its power-iteration estimate of the largest singular value.

    With ``update=True`` the state vectors advance ``iters`` steps first; the
    estimate ``u^T W v`` is then differentiated with ``u`` and ``v`` held fixed.
    """
    W = T.as_tensor(W)
    if W.ndim != 2:
        raise DimensionError(f"spectral_normalize: expected a matrix, got {W.shape}")
    Wd = W.data
    if not np.any(Wd):
        raise NormalizationError("spectral_normalize: weight matrix is all zeros")
    if state.u.shape != (Wd.shape[0],) or state.v.shape != (Wd.shape[1],):
        raise DimensionError(f"spectral_normalize: state does not fit a {Wd.shape} matrix")
    if update:
        u = state.u
        for _ in range(iters):
            v = _unit(Wd.T @ u)
            u = _unit(Wd @ v)
        if iters > 0:
            state.u[...] = u
            state.v[...] = v
    sigma = T.sum(T.mul(W, np.outer(state.u, state.v)))
    return T.div(W, sigma)


# ---------------------------------------------------------------------------
# Batch normalization

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def init(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))


def _normalized(X: Tensor, mode: str, running: RunningStats | None, eps: float) -> Tensor:
    if mode == "train":
        if X.shape[0] < 2:
            raise ContractError("batchnorm: train mode needs a batch of at least 2")
        xhat, mu, var = T.standardize(X, eps)
        if running is not None:
            count = X.data.size // X.shape[-1]
            unbiased = var * count / max(count - 1, 1)
            running.mean[...] = running.momentum * running.mean + (1 - running.momentum) * mu
            running.var[...] = running.momentum * running.var + (1 - running.momentum) * unbiased
        return xhat
    if mode == "eval":
        if running is None:
            raise ContractError("batchnorm: eval mode needs running statistics")
        return T.mul(T.sub(X, running.mean), 1.0 / np.sqrt(running.var + eps))
    raise ContractError(f"batchnorm: unknown mode {mode!r}")


def batchnorm(X, gamma, beta, mode: str = "train", running: RunningStats | None = None,
              eps: float = BN_EPS) -> Tensor:
    """Per-channel standardization over batch and spatial axes, then ``gamma * x + beta``."""
    X = T.as_tensor(X)
    xhat = _normalized(X, mode, running, eps)
    return T.add(T.mul(xhat, gamma), beta)


def latent_batchnorm(X, z, W_gamma, W_beta, mode: str = "train",
                     running: RunningStats | None = None, eps: float = BN_EPS) -> Tensor:
    """Batch normalization whose per-sample gain ``1 + z W_gamma`` and shift
    ``z W_beta`` are inferred from the latent."""
    X, z = T.as_tensor(X), T.as_tensor(z)
    if z.ndim != 2 or z.shape[0] != X.shape[0]:
        raise DimensionError(f"latent_batchnorm: latent {z.shape} vs input {X.shape}")
    m = X.shape[-1]
    for nm, Wt in (("W_gamma", W_gamma), ("W_beta", W_beta)):
        if tuple(T.as_tensor(Wt).shape) != (z.shape[1], m):
            raise DimensionError(f"latent_batchnorm: {nm} must be {z.shape[1]}x{m}")
    gamma = T.add(T.matmul(z, W_gamma), 1.0)
    beta = T.matmul(z, W_beta)
    xhat = _normalized(X, mode, running, eps)
    return T.add(T.mul(xhat, gamma), beta)


def channel_gate(X, W1, W2, reduction: int = GATE_REDUCTION) -> Tensor:
    """Channel attention: ``X * sigmoid(relu(gap(X) W1) W2)`` per sample and channel."""
    X = T.as_tensor(X)
    m = X.shape[-1]
    if m % reduction:
        raise DimensionError(f"channel_gate: {m} channels not divisible by {reduction}")
    hidden = m // reduction
    if T.as_tensor(W1).shape != (m, hidden) or T.as_tensor(W2).shape != (hidden, m):
        raise DimensionError(f"channel_gate: expected W1 {m}x{hidden} and W2 {hidden}x{m}")
    a = T.activation(T.matmul(T.gap(X), W1), "relu")
    gate = T.activation(T.matmul(a, W2), "sigmoid")
    return T.mul(X, gate)


# ---------------------------------------------------------------------------
# Stateful layer objects

class Layer:
    """Named container of parameter arrays, buffers and child layers."""

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: list[Layer] = []

    def child(self, layer: "Layer") -> "Layer":
        self.children.append(layer)
        return layer

    def key(self, local: str) -> str:
        return f"{self.name}.{local}"

    def p(self, P, local: str) -> Tensor:
        if P is None:
            return Tensor(self.params[local])
        return P[self.key(local)]

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {self.key(k): v for k, v in self.params.items()}
        for c in self.children:
            out.update(c.named_parameters())
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {self.key(k): v for k, v in self.buffers.items()}
        for c in self.children:
            out.update(c.named_buffers())
        return out

    def layers(self):
        yield self
        for c in self.children:
            yield from c.layers()


class Dense(Layer):
    def __init__(self, name, d_in, d_out, rng, bias=True, sn=False):
        super().__init__(name)
        self.d_in, self.d_out = d_in, d_out
        self.params["W"] = orthogonal(rng, d_in, d_out)
        if bias:
            self.params["b"] = np.zeros(d_out)
        self.sn = PowerIterationState.init(d_in, d_out, rng) if sn else None
        if sn:
            self.buffers["sn_u"], self.buffers["sn_v"] = self.sn.u, self.sn.v

    def weight(self, P, update=True) -> Tensor:
        W = self.p(P, "W")
        return W if self.sn is None else spectral_normalize(W, self.sn, 1, update)

    def __call__(self, P, x, z=None, train=True):
        y = T.matmul(x, self.weight(P, train))
        return T.add(y, self.p(P, "b")) if "b" in self.params else y


class GDense(Layer):
    """Dense layer whose weight bank is selected and recombined per latent."""

    def __init__(self, name, d_in, d_out, d_z, rng, bias=True):
        super().__init__(name)
        self.d_in, self.d_out, self.d_z = d_in, d_out, d_z
        self.params["K"] = orthogonal(rng, d_in, d_out)
        self.params["W_s"] = orthogonal(rng, d_in + d_z, d_out)
        self.params["W_L"] = orthogonal(rng, d_out, d_out)
        if bias:
            self.params["b"] = np.zeros(d_out)

    def gparams(self, P) -> GConvParams:
        b = self.p(P, "b") if "b" in self.params else None
        return GConvParams(self.p(P, "K"), self.p(P, "W_s"), self.p(P, "W_L"), (1, 1), b)

    def __call__(self, P, x, z=None, train=True):
        return gdense_forward(x, z, self.gparams(P))


class Conv(Layer):
    def __init__(self, name, kh, kw, m, n, rng, bias=True, sn=False):
        super().__init__(name)
        self.kshape = (kh, kw, m, n)
        self.params["K"] = orthogonal(rng, kh * kw * m, n).reshape(self.kshape)
        if bias:
            self.params["b"] = np.zeros(n)
        self.sn = PowerIterationState.init(kh * kw * m, n, rng) if sn else None
        if sn:
            self.buffers["sn_u"], self.buffers["sn_v"] = self.sn.u, self.sn.v

    def kernel(self, P, update=True) -> Tensor:
        K = self.p(P, "K")
        if self.sn is None:
            return K
        kh, kw, m, n = self.kshape
        W = spectral_normalize(T.reshape(K, (kh * kw * m, n)), self.sn, 1, update)
        return T.reshape(W, self.kshape)

    def __call__(self, P, x, z=None, train=True):
        y = T.conv2d(x, self.kernel(P, train))
        return T.add(y, self.p(P, "b")) if "b" in self.params else y


class GConv(Layer):
    """Generative convolution layer (fused execution by default)."""

    def __init__(self, name, kh, kw, m, n, d_z, rng, bias=True, fused=True):
        super().__init__(name)
        self.kshape = (kh, kw, m, n)
        self.d_z = d_z
        self.fused = fused
        self.params["K"] = orthogonal(rng, kh * kw * m, n)
        self.params["W_s"] = orthogonal(rng, m + d_z, n)
        self.params["W_L"] = orthogonal(rng, n, n)
        if bias:
            self.params["b"] = np.zeros(n)

    def gparams(self, P) -> GConvParams:
        b = self.p(P, "b") if "b" in self.params else None
        return GConvParams(self.p(P, "K"), self.p(P, "W_s"), self.p(P, "W_L"),
                           self.kshape[:2], b)

    def __call__(self, P, x, z=None, train=True):
        if z is None:
            raise ContractError(f"{self.name}: generative convolution needs a latent")
        fwd = gconv_forward_fused if self.fused else gconv_forward_direct
        return fwd(x, z, self.gparams(P))


class BatchNorm(Layer):
    def __init__(self, name, m, eps=BN_EPS):
        super().__init__(name)
        self.eps = eps
        self.params["gamma"] = np.ones(m)
        self.params["beta"] = np.zeros(m)
        self.running = RunningStats.init(m)
        self.buffers["running_mean"], self.buffers["running_var"] = self.running.mean, self.running.var

    def __call__(self, P, x, z=None, train=True):
        return batchnorm(x, self.p(P, "gamma"), self.p(P, "beta"),
                         "train" if train else "eval", self.running, self.eps)


class LatentBatchNorm(Layer):
    def __init__(self, name, m, d_z, rng, eps=BN_EPS):
        super().__init__(name)
        self.eps = eps
        self.params["W_gamma"] = orthogonal(rng, d_z, m)
        self.params["W_beta"] = orthogonal(rng, d_z, m)
        self.running = RunningStats.init(m)
        self.buffers["running_mean"], self.buffers["running_var"] = self.running.mean, self.running.var

    def __call__(self, P, x, z=None, train=True):
        return latent_batchnorm(x, z, self.p(P, "W_gamma"), self.p(P, "W_beta"),
                                "train" if train else "eval", self.running, self.eps)


class ChannelGate(Layer):
    def __init__(self, name, m, rng, reduction=GATE_REDUCTION):
        super().__init__(name)
        if m % reduction:
            raise DimensionError(f"{name}: {m} channels not divisible by {reduction}")
        self.reduction = reduction
        self.params["W1"] = orthogonal(rng, m, m // reduction)
        self.params["W2"] = orthogonal(rng, m // reduction, m)

    def __call__(self, P, x, z=None, train=True):
        return channel_gate(x, self.p(P, "W1"), self.p(P, "W2"), self.reduction)


def _act(x, kind):
    return T.activation(x, kind)


def _act_width(c: int, kind: str) -> int:
    return c // 2 if kind == "glu" else c


class ResBlockG(Layer):
    """Generator residual block.

    main: BigBN -> act -> (up) -> conv3x3 -> BigBN -> act -> conv3x3 [-> gate]
    skip: (up) -> conv1x1 when channels or resolution change, else identity.
    ``conv_kind="gconv"`` swaps both 3x3 convolutions for generative ones.
    """

    def __init__(self, name, c_in, c_out, d_z, rng, upsample=True, conv_kind="conv",
                 act="relu", gate=False):
        super().__init__(name)
        self.c_in, self.c_out, self.upsample, self.act = c_in, c_out, upsample, act
        self.bn1 = self.child(LatentBatchNorm(f"{name}.bn1", c_in, d_z, rng))
        self.bn2 = self.child(LatentBatchNorm(f"{name}.bn2", c_out, d_z, rng))

        def conv3(sub, m, n, bias):
            if conv_kind == "gconv":
                return GConv(f"{name}.{sub}", 3, 3, m, n, d_z, rng, bias=bias)
            if conv_kind == "conv":
                return Conv(f"{name}.{sub}", 3, 3, m, n, rng, bias=bias)
            raise ContractError(f"unknown conv kind {conv_kind!r}")
        # bn2 subtracts the batch mean, so a bias on conv1 would be dead weight
        self.conv1 = self.child(conv3("conv1", _act_width(c_in, act), c_out, False))
        self.conv2 = self.child(conv3("conv2", _act_width(c_out, act), c_out, True))
        self.gate = self.child(ChannelGate(f"{name}.gate", c_out, rng)) if gate else None
        self.shortcut = None
        if c_in != c_out or upsample:
            self.shortcut = self.child(Conv(f"{name}.shortcut", 1, 1, c_in, c_out, rng))

    def __call__(self, P, x, z=None, train=True):
        h = _act(self.bn1(P, x, z, train), self.act)
        if self.upsample:
            h = T.upsample_nearest(h)
        h = self.conv1(P, h, z, train)
        h = _act(self.bn2(P, h, z, train), self.act)
        h = self.conv2(P, h, z, train)
        if self.gate is not None:
            h = self.gate(P, h)
        s = T.upsample_nearest(x) if self.upsample else x
        if self.shortcut is not None:
            s = self.shortcut(P, s)
        if s.shape != h.shape:
            raise DimensionError(f"{self.name}: main {h.shape} vs skip {s.shape}")
        return T.add(h, s)


class ResBlockD(Layer):
    """Discriminator residual block with spectrally normalized convolutions.

    main: relu -> conv3x3 -> relu -> conv3x3 -> (avgpool)
    skip: conv1x1 -> (avgpool) when channels or resolution change, else identity.
    The ``optimized`` first block skips the leading relu and pools before its
    shortcut conv.
    """

    def __init__(self, name, c_in, c_out, rng, downsample=True, optimized=False, sn=True):
        super().__init__(name)
        self.c_in, self.c_out = c_in, c_out
        self.downsample, self.optimized = downsample, optimized
        self.conv1 = self.child(Conv(f"{name}.conv1", 3, 3, c_in, c_out, rng, sn=sn))
        self.conv2 = self.child(Conv(f"{name}.conv2", 3, 3, c_out, c_out, rng, sn=sn))
        self.shortcut = None
        if optimized or c_in != c_out or downsample:
            self.shortcut = self.child(Conv(f"{name}.shortcut", 1, 1, c_in, c_out, rng, sn=sn))

    def __call__(self, P, x, z=None, train=True):
        x = T.as_tensor(x)
        if self.downsample and (x.shape[1] % 2 or x.shape[2] % 2):
            raise DimensionError(f"{self.name}: cannot downsample {x.shape[1]}x{x.shape[2]}")
        h = x if self.optimized else _act(x, "relu")
        h = self.conv1(P, h, train=train)
        h = self.conv2(P, _act(h, "relu"), train=train)
        if self.downsample:
            h = T.avgpool2(h)
        if self.optimized:
            s = self.shortcut(P, T.avgpool2(x) if self.downsample else x, train=train)
        else:
            s = x
            if self.shortcut is not None:
                s = self.shortcut(P, s, train=train)
            if self.downsample:
                s = T.avgpool2(s)
        if s.shape != h.shape:
            raise DimensionError(f"{self.name}: main {h.shape} vs skip {s.shape}")
        return T.add(h, s)


def resblock_g_forward(X, z, block: ResBlockG, P=None, train=True) -> Tensor:
    return block(P, X, z, train)


def resblock_d_forward(X, block: ResBlockD, P=None, train=True) -> Tensor:
    return block(P, X, train=train)
