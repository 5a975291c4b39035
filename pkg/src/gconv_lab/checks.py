"""Seeded verification suites: per-layer gradient checks and two-path GConv equivalence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import tensor as T
from .layers import GConvParams

GRAD_TOL = 1e-5
EQUIV_TOL = 1e-9

GRADCHECK_LAYERS = (
    "conv2d", "dense", "gconv_direct", "gconv_fused", "gdense", "batchnorm",
    "latent_batchnorm", "spectral_norm", "channel_gate", "resblock_g", "resblock_d",
)


@dataclass
class CaseResult:
    layer: str
    case: int
    shape: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _corrupt(x):
    """Identity forward whose backward is deliberately off by 50%."""
    x = T.as_tensor(x)
    return T._make("corrupt", x.data.copy(), (x,), lambda g: (1.5 * g,))


def _layer_case(layer: L.Layer, x, z, rng, train: bool, fault: bool):
    # weights keep their initialisation; biases and BN affine terms are drawn
    # from N(0,1) because zeros park relu inputs exactly on the kink
    for key, a in layer.named_parameters().items():
        if key.rsplit(".", 1)[-1] in ("b", "gamma", "beta"):
            a[...] = rng.standard_normal(a.shape)
    names = list(layer.named_parameters())
    arrays = [layer.named_parameters()[n] for n in names]
    with_z = z is not None
    probe = layer(None, x, z, train)
    R = rng.standard_normal(probe.shape)

    def f(xt, *rest):
        zt = rest[0] if with_z else None
        P = dict(zip(names, rest[1:] if with_z else rest))
        out = layer(P, xt, zt, train)
        if fault:
            out = _corrupt(out)
        return T.sum(T.mul(out, R))

    inputs = [x] + ([z] if with_z else []) + [a.copy() for a in arrays]
    return f, inputs


def _build_case(kind: str, rng: np.random.Generator, fault: bool):
    b = int(rng.integers(2, 4))
    if kind == "conv2d":
        k = int(rng.choice([1, 3]))
        m, n = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        layer = L.Conv("conv", k, k, m, n, rng)
        x = rng.standard_normal((b, h, w, m))
        return f"b{b} {h}x{w} {m}->{n} k{k}", _layer_case(layer, x, None, rng, True, fault)
    if kind == "dense":
        m, n = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        layer = L.Dense("dense", m, n, rng)
        return f"b{b} {m}->{n}", _layer_case(layer, rng.standard_normal((b, m)), None, rng, True, fault)
    if kind in ("gconv_direct", "gconv_fused"):
        k = int(rng.choice([1, 3]))
        m, n, d_z = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h = int(rng.integers(2, 4))
        layer = L.GConv("gconv", k, k, m, n, d_z, rng, fused=(kind == "gconv_fused"))
        x, z = rng.standard_normal((b, h, h, m)), rng.standard_normal((b, d_z))
        return f"b{b} {h}x{h} {m}->{n} k{k} dz{d_z}", _layer_case(layer, x, z, rng, True, fault)
    if kind == "gdense":
        m, n, d_z = int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
        layer = L.GDense("gdense", m, n, d_z, rng)
        x, z = rng.standard_normal((b, m)), rng.standard_normal((b, d_z))
        return f"b{b} {m}->{n} dz{d_z}", _layer_case(layer, x, z, rng, True, fault)
    if kind == "batchnorm":
        m, h = int(rng.integers(1, 4)), int(rng.integers(2, 4))
        layer = L.BatchNorm("bn", m)
        x = rng.standard_normal((b, h, h, m))
        return f"b{b} {h}x{h} c{m}", _layer_case(layer, x, None, rng, True, fault)
    if kind == "latent_batchnorm":
        m, h, d_z = int(rng.integers(1, 4)), int(rng.integers(2, 4)), int(rng.integers(1, 4))
        layer = L.LatentBatchNorm("lbn", m, d_z, rng)
        x, z = rng.standard_normal((b, h, h, m)), rng.standard_normal((b, d_z))
        return f"b{b} {h}x{h} c{m} dz{d_z}", _layer_case(layer, x, z, rng, True, fault)
    if kind == "spectral_norm":
        if rng.random() < 0.5:
            m, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            layer = L.Dense("sn_dense", m, n, rng, sn=True)
            x = rng.standard_normal((b, m))
            desc = f"dense {m}->{n}"
        else:
            m, n = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            layer = L.Conv("sn_conv", 3, 3, m, n, rng, sn=True)
            x = rng.standard_normal((b, 3, 3, m))
            desc = f"conv3x3 {m}->{n}"
        for _ in range(5):
            layer(None, x, None, True)
        return desc, _layer_case(layer, x, None, rng, False, fault)
    if kind == "channel_gate":
        m = 8 * int(rng.integers(1, 3))
        layer = L.ChannelGate("gate", m, rng)
        h = int(rng.integers(1, 4))
        return f"b{b} {h}x{h} c{m}", _layer_case(layer, rng.standard_normal((b, h, h, m)),
                                                  None, rng, True, fault)
    if kind == "resblock_g":
        c_in, c_out, d_z = int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(1, 4))
        up = bool(rng.random() < 0.5)
        conv_kind = "gconv" if rng.random() < 0.5 else "conv"
        h = 2
        layer = L.ResBlockG("rbg", c_in, c_out, d_z, rng, upsample=up, conv_kind=conv_kind)
        x, z = rng.standard_normal((b, h, h, c_in)), rng.standard_normal((b, d_z))
        return (f"b{b} {h}x{h} {c_in}->{c_out} {conv_kind}{' up' if up else ''}",
                _layer_case(layer, x, z, rng, True, fault))
    if kind == "resblock_d":
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        down = bool(rng.random() < 0.5)
        optimized = bool(rng.random() < 0.3)
        layer = L.ResBlockD("rbd", c_in, c_out, rng, downsample=down, optimized=optimized)
        x = rng.standard_normal((b, 4, 4, c_in))
        for _ in range(5):
            layer(None, x, None, True)
        tag = ("opt " if optimized else "") + ("down" if down else "")
        return f"b{b} 4x4 {c_in}->{c_out} {tag}".rstrip(), _layer_case(layer, x, None, rng, False, fault)
    raise ValueError(f"unknown layer kind {kind!r}")


def gradcheck_suite(seed: int = 0, cases: int = 20, layers=GRADCHECK_LAYERS,
                    fault: str | None = None, tol: float = GRAD_TOL,
                    step: float = 1e-6) -> list[CaseResult]:
    """Finite-difference check ``cases`` random configurations of every layer kind.

    Case ``c`` of a layer kind depends only on ``seed``, the kind's position
    in :data:`GRADCHECK_LAYERS` and ``c``, so a subset of ``layers`` or a
    different ``step`` revisits exactly the same configurations.
    """
    results = []
    for kind in layers:
        rng = np.random.default_rng([seed, GRADCHECK_LAYERS.index(kind)])
        for c in range(cases):
            desc, (f, inputs) = _build_case(kind, rng, fault == kind)
            err = T.grad_check(f, inputs, step=step)
            results.append(CaseResult(kind, c, desc, err, tol))
    return results


@dataclass
class EquivalenceResult:
    case: int
    shape: str
    deviation: float
    zero_mixing: bool
    tol: float = EQUIV_TOL

    @property
    def ok(self) -> bool:
        return self.deviation < self.tol and (not self.zero_mixing or self.deviation == 0.0)


def equivalence_suite(seed: int = 0, count: int = 120) -> list[EquivalenceResult]:
    """Compare direct and fused GConv outputs over random shapes.

    Deviation is ``max|Y_direct - Y_fused| / max|Y_direct|``. Every tenth
    case zeroes ``W_L`` and must then agree exactly.
    """
    rng = np.random.default_rng(seed)
    out = []
    batches = (1, 2, 4)
    for i in range(count):
        b = batches[i % 3]
        m, n = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        d_z = int(rng.integers(1, 9))
        k = int(rng.choice([1, 3]))
        zero = i % 10 == 9
        p = GConvParams(rng.standard_normal((k * k * m, n)), rng.standard_normal((m + d_z, n)),
                        np.zeros((n, n)) if zero else rng.standard_normal((n, n)), (k, k),
                        rng.standard_normal(n))
        X = rng.standard_normal((b, h, w, m))
        z = rng.standard_normal((b, d_z))
        Yd = L.gconv_forward_direct(X, z, p).data
        Yf = L.gconv_forward_fused(X, z, p).data
        dev = float(np.abs(Yd - Yf).max() / max(np.abs(Yd).max(), 1e-300))
        out.append(EquivalenceResult(i, f"b{b} {h}x{w} {m}->{n} k{k} dz{d_z}", dev, zero))
    return out
