"""Generator/discriminator builders and the convolution-weight auditor."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import AuditError, ContractError, GConvLabError
from .layers import (BatchNorm, Conv, Dense, GConv, GConvParams, GDense, Layer,
                     ResBlockD, ResBlockG)

LATENT_DIM = 32
TOY_HIDDEN = 128

# (base channels after the FC, output channels of each up block)
GENERATOR_STAGES = {
    32: (256, (256, 256, 256)),
    128: (512, (512, 512, 256, 128, 64)),
    256: (512, (512, 512, 256, 128, 64, 32)),
}
# (output channels, downsample) per residual block
DISCRIMINATOR_STAGES = {
    32: ((128, True), (128, True), (128, False), (128, False)),
    128: ((64, True), (128, True), (256, True), (512, True), (512, True), (512, False)),
    256: ((32, True), (64, True), (128, True), (256, True), (512, True), (512, True),
          (512, False)),
}


@dataclass(frozen=True)
class ArchSpec:
    resolution: int | str = 32
    role: str = "generator"
    conv_kind: str = "conv"
    d_z: int = LATENT_DIM
    activation: str = "relu"
    channel_gate: bool = False
    hidden: int = TOY_HIDDEN
    toy_depth: int = 3
    sn: bool = True

    def validate(self) -> "ArchSpec":
        if self.resolution != "toy" and self.resolution not in GENERATOR_STAGES:
            raise ContractError(f"unsupported resolution {self.resolution!r}")
        if self.role not in ("generator", "discriminator"):
            raise ContractError(f"unknown role {self.role!r}")
        if self.conv_kind not in ("conv", "gconv"):
            raise ContractError(f"unknown conv kind {self.conv_kind!r}")
        if self.activation not in ("relu", "elu", "glu"):
            raise ContractError(f"unsupported block activation {self.activation!r}")
        if self.d_z < 1:
            raise ContractError("latent dimension must be positive")
        return self


class Model:
    """A stack of layers with a flat, ordered parameter namespace."""

    def __init__(self, spec: ArchSpec):
        self.spec = spec
        self.blocks: list[Layer] = []

    def add(self, layer: Layer) -> Layer:
        self.blocks.append(layer)
        return layer

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for b in self.blocks:
            out.update(b.named_parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for b in self.blocks:
            out.update(b.named_buffers())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = self.parameters()
        out.update(self.buffers())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise ContractError(f"checkpoint lacks entries: {sorted(missing)[:5]}")
        for k, arr in own.items():
            if arr.shape != state[k].shape:
                raise ContractError(f"{k}: shape {state[k].shape} != {arr.shape}")
            arr[...] = state[k]

    def variables(self, tape: T.Tape) -> dict[str, T.Tensor]:
        return {k: tape.variable(v, name=k) for k, v in self.parameters().items()}

    def layers(self):
        for b in self.blocks:
            yield from b.layers()

    def forward(self, P, x, train=True, trace=None):
        raise NotImplementedError

    def __call__(self, x, P=None, train=True, trace=None) -> T.Tensor:
        return self.forward(P, x, train, trace)


def _record(trace, name, t):
    if trace is not None:
        trace.append((name, tuple(t.shape)))
    return t


class Generator(Model):
    """Latent ``b x d_z`` -> image ``b x r x r x 3`` in ``[-1, 1]``."""

    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        super().__init__(spec)
        c0, widths = GENERATOR_STAGES[spec.resolution]
        self.c0 = c0
        self.fc = self.add(Dense("fc", spec.d_z, 4 * 4 * c0, rng))
        self.res = []
        c = c0
        for i, w in enumerate(widths):
            self.res.append(self.add(ResBlockG(
                f"rb{i}", c, w, spec.d_z, rng, upsample=True, conv_kind=spec.conv_kind,
                act=spec.activation, gate=spec.channel_gate)))
            c = w
        self.bn = self.add(BatchNorm("bn_out", c))
        self.out = self.add(Conv("conv_out", 3, 3, c, 3, rng))

    def forward(self, P, z, train=True, trace=None):
        z = T.as_tensor(z)
        h = _record(trace, "fc", T.reshape(self.fc(P, z), (z.shape[0], 4, 4, self.c0)))
        for blk in self.res:
            h = _record(trace, blk.name, blk(P, h, z, train))
        h = T.activation(self.bn(P, h, train=train), "relu")
        h = _record(trace, "conv_out", T.activation(self.out(P, h), "tanh"))
        return h


class Discriminator(Model):
    """Image ``b x r x r x 3`` -> score ``b x 1``."""

    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        super().__init__(spec)
        self.res = []
        c = 3
        for i, (w, down) in enumerate(DISCRIMINATOR_STAGES[spec.resolution]):
            self.res.append(self.add(ResBlockD(f"rb{i}", c, w, rng, downsample=down,
                                               optimized=(i == 0), sn=spec.sn)))
            c = w
        self.fc = self.add(Dense("fc", c, 1, rng, sn=spec.sn))

    def forward(self, P, x, train=True, trace=None):
        h = T.as_tensor(x)
        for blk in self.res:
            h = _record(trace, blk.name, blk(P, h, train=train))
        h = _record(trace, "global_sum", T.spatial_sum(T.activation(h, "relu")))
        return _record(trace, "fc", self.fc(P, h, train=train))


class ToyGenerator(Model):
    """MLP latent -> 2-D point; hidden layers optionally latent-conditioned."""

    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        super().__init__(spec)
        self.hidden = []
        d = spec.d_z
        for i in range(spec.toy_depth):
            if spec.conv_kind == "gconv":
                layer = GDense(f"fc{i}", d, spec.hidden, spec.d_z, rng)
            else:
                layer = Dense(f"fc{i}", d, spec.hidden, rng)
            self.hidden.append(self.add(layer))
            d = spec.hidden
        self.out = self.add(Dense("fc_out", d, 2, rng))

    def forward(self, P, z, train=True, trace=None):
        z = T.as_tensor(z)
        _record(trace, "input", z)
        h = z
        for layer in self.hidden:
            h = _record(trace, layer.name, T.activation(layer(P, h, z, train), "relu"))
        return _record(trace, "fc_out", self.out(P, h))


class ToyDiscriminator(Model):
    """MLP 2-D point -> score."""

    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        super().__init__(spec)
        self.hidden = []
        d = 2
        for i in range(spec.toy_depth):
            self.hidden.append(self.add(Dense(f"fc{i}", d, spec.hidden, rng, sn=spec.sn)))
            d = spec.hidden
        self.out = self.add(Dense("fc_out", d, 1, rng, sn=spec.sn))

    def forward(self, P, x, train=True, trace=None):
        h = _record(trace, "input", T.as_tensor(x))
        for layer in self.hidden:
            h = _record(trace, layer.name, T.activation(layer(P, h, train=train), "relu"))
        return _record(trace, "fc_out", self.out(P, h, train=train))


def build_model(spec: ArchSpec, seed: int | np.random.Generator = 0,
                init: str = "orthogonal") -> Model:
    """Instantiate an orthogonally initialized network for ``spec``.

    ``init="shape"`` leaves every weight at zero; such a model is only good
    for counting and must not be run.
    """
    spec.validate()
    if init == "shape":
        rng = None
    elif init == "orthogonal":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    else:
        raise ContractError(f"unknown init {init!r}")
    if spec.resolution == "toy":
        cls = ToyGenerator if spec.role == "generator" else ToyDiscriminator
    else:
        cls = Generator if spec.role == "generator" else Discriminator
        if spec.role == "discriminator" and spec.conv_kind != "conv":
            raise ContractError("the discriminator always uses standard convolutions")
    return cls(spec, rng)


# ---------------------------------------------------------------------------
# Auditing

@dataclass
class ParamReport:
    resolution: int | str
    conv_kind: str
    total_weights: int
    conv_weights: int
    gconv_extra: int
    layers: list[dict] = field(default_factory=list)

    def check(self) -> None:
        extras = sum(l.get("gconv_extra", 0) for l in self.layers)
        if extras != self.gconv_extra:
            raise AuditError(f"gconv_extra {self.gconv_extra} != per-layer sum {extras}")

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "conv_kind": self.conv_kind,
            "conv_weights": self.conv_weights,
            "gconv_extra": self.gconv_extra,
            "total_weights": self.total_weights,
            "layers": self.layers,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _counted_layers(model: Model):
    """Layers included under the ``conv_only`` convention."""
    if isinstance(model, (ToyGenerator, ToyDiscriminator)):
        return [*model.hidden, model.out]
    counted = []
    for blk in model.res:
        counted += [blk.conv1, blk.conv2]
    if isinstance(model, Generator):
        counted.append(model.out)
    return counted


def _layer_entry(layer: Layer, d_z: int) -> dict:
    if isinstance(layer, (GConv, GDense)):
        if isinstance(layer, GConv):
            kh, kw, m, n = layer.kshape
        else:
            kh, kw, m, n = 1, 1, layer.d_in, layer.d_out
        count = GConvParams.count(kh, kw, m, n, d_z)
        return {"name": layer.name, "shape": [kh, kw, m, n], "count": count,
                "gconv_extra": count - kh * kw * m * n}
    W = layer.params["K"] if "K" in layer.params else layer.params["W"]
    shape = list(W.shape) if W.ndim == 4 else [1, 1, *W.shape]
    return {"name": layer.name, "shape": shape, "count": int(W.size), "gconv_extra": 0}


def count_weights(model: Model, policy: str = "conv_only") -> ParamReport:
    """Count weights. ``conv_only`` covers the residual-block 3x3 convolutions
    plus the generator's output convolution, without biases, shortcuts,
    the latent FC or normalization parameters; ``all`` counts everything."""
    params = model.parameters()
    total = int(sum(v.size for v in params.values()))
    counted = [_layer_entry(l, model.spec.d_z) for l in _counted_layers(model)]
    extra = sum(e["gconv_extra"] for e in counted)
    if policy == "conv_only":
        conv = sum(e["count"] for e in counted)
        layers = counted
    elif policy == "all":
        conv = total
        layers = [{"name": k, "shape": list(v.shape), "count": int(v.size), "gconv_extra": 0}
                  for k, v in params.items()]
        for e in layers:
            if e["name"].endswith((".W_s", ".W_L")):
                e["gconv_extra"] = e["count"]
    else:
        raise ContractError(f"unknown counting policy {policy!r}")
    report = ParamReport(model.spec.resolution, model.spec.conv_kind, total, conv, extra, layers)
    report.check()
    return report


def shape_audit(spec: ArchSpec, batch: int = 2, seed: int = 0) -> list[tuple[str, tuple]]:
    """Trace every stage's output shape on a dummy batch."""
    model = build_model(spec, seed)
    rng = np.random.default_rng(seed)
    if spec.role == "generator":
        x = rng.standard_normal((batch, spec.d_z))
    elif spec.resolution == "toy":
        x = rng.standard_normal((batch, 2))
    else:
        r = spec.resolution
        x = rng.uniform(-1, 1, (batch, r, r, 3))
    trace: list[tuple[str, tuple]] = []
    try:
        out = model(x, train=True, trace=trace)
    except GConvLabError as exc:
        last = trace[-1][0] if trace else "input"
        raise AuditError(f"shape audit failed after layer {last!r}: {exc}") from exc
    if spec.role == "generator":
        want = (batch, 2) if spec.resolution == "toy" else (batch, spec.resolution, spec.resolution, 3)
    else:
        want = (batch, 1)
    if out.shape != want:
        raise AuditError(f"final layer {trace[-1][0]!r} produced {out.shape}, expected {want}")
    return trace
