"""Adversarial losses, Adam, the Gaussian-ring data source and the training loop."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ContractError, TrainingError
from .metrics import mode_coverage
from .zoo import ArchSpec, Model, build_model

LOSS_KINDS = ("cross_entropy", "hinge", "lsgan")
LOSS_ALIASES = {"ce": "cross_entropy"}


def _loss_kind(kind: str) -> str:
    kind = LOSS_ALIASES.get(kind, kind)
    if kind not in LOSS_KINDS:
        raise ContractError(f"unknown loss {kind!r}")
    return kind


def _flat(scores, what) -> T.Tensor:
    s = T.as_tensor(scores)
    if s.data.size == 0:
        raise ContractError(f"{what}: empty batch")
    return T.reshape(s, (s.data.size,))


def loss_d(scores_real, scores_fake, kind: str = "hinge") -> T.Tensor:
    """Discriminator loss, averaged over the batch. Scores are raw logits."""
    kind = _loss_kind(kind)
    r, f = _flat(scores_real, "loss_d"), _flat(scores_fake, "loss_d")
    if kind == "hinge":
        return T.add(T.mean(T.activation(T.sub(1.0, r), "relu")),
                     T.mean(T.activation(T.add(f, 1.0), "relu")))
    if kind == "cross_entropy":
        # -log sigmoid(r) = softplus(-r); -log(1 - sigmoid(f)) = softplus(f)
        return T.add(T.mean(T.softplus(T.neg(r))), T.mean(T.softplus(f)))
    return T.add(T.mul(0.5, T.mean(T.square(T.sub(r, 1.0)))),
                 T.mul(0.5, T.mean(T.square(f))))


def loss_g(scores_fake, kind: str = "hinge") -> T.Tensor:
    kind = _loss_kind(kind)
    f = _flat(scores_fake, "loss_g")
    if kind == "hinge":
        return T.neg(T.mean(f))
    if kind == "cross_entropy":
        return T.mean(T.softplus(T.neg(f)))
    return T.mul(0.5, T.mean(T.square(T.sub(f, 1.0))))


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | None = None) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    lr = state.lr if lr is None else lr
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - state.beta1) * g if m is None else state.beta1 * m + (1.0 - state.beta1) * g
        v = (1.0 - state.beta2) * g * g if v is None else state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Data

@dataclass(frozen=True)
class GmmSpec:
    """Equal-weight Gaussian modes evenly spaced on a circle."""

    modes: int = 8
    radius: float = 2.0
    std: float = 0.02

    def __post_init__(self):
        if self.modes < 1 or self.std <= 0:
            raise ContractError("GmmSpec needs at least one mode and a positive std")

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.modes, 1.0 / self.modes)

    def centers(self) -> np.ndarray:
        a = 2 * np.pi * np.arange(self.modes) / self.modes
        return self.radius * np.stack([np.cos(a), np.sin(a)], axis=1)


def sample_gmm(spec: GmmSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    if count < 1:
        raise ContractError("sample count must be positive")
    idx = rng.integers(spec.modes, size=count)
    return spec.centers()[idx] + spec.std * rng.standard_normal((count, 2))


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainConfig:
    seed: int = 0
    d_z: int = 32
    batch_g: int = 256
    batch_d: int = 256
    n_dis: int = 1
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    iterations: int = 15000
    loss: str = "hinge"
    g_kind: str = "gconv"
    d_kind: str = "conv"
    decay_iters: int = 0
    eval_every: int = 1000
    eval_samples: int = 2000
    hidden: int = 128
    d_sn: bool = False

    @classmethod
    def cifar(cls, **kw) -> "TrainConfig":
        """lr 2e-4 for both networks, five critic steps, G batch twice D's."""
        base = dict(lr_g=2e-4, lr_d=2e-4, n_dis=5, batch_d=64, batch_g=128,
                    iterations=50000, decay_iters=50000)
        return cls(**{**base, **kw}).validate()

    @classmethod
    def ttur(cls, **kw) -> "TrainConfig":
        """Two-time-scale rule: lr_D = 4 lr_G, one critic step."""
        base = dict(lr_g=1e-4, lr_d=4e-4, n_dis=1, batch_d=32, batch_g=32,
                    iterations=300000, decay_iters=50000)
        return cls(**{**base, **kw}).validate()

    def validate(self) -> "TrainConfig":
        if self.n_dis < 1:
            raise ContractError("n_dis must be at least 1")
        if self.lr_g < 0 or self.lr_d < 0:
            raise ContractError("learning rates must be non-negative")
        if min(self.batch_g, self.batch_d, self.d_z, self.eval_samples) < 1:
            raise ContractError("batch sizes, latent size and eval sample count must be positive")
        if self.iterations < 0 or self.decay_iters < 0 or self.eval_every < 1:
            raise ContractError("iteration counts must be non-negative")
        _loss_kind(self.loss)
        for k in (self.g_kind, self.d_kind):
            if k not in ("conv", "gconv"):
                raise ContractError(f"unknown layer kind {k!r}")
        if self.d_kind != "conv":
            raise ContractError("the discriminator always uses standard layers")
        return self

    def lr_at(self, it: int, base: float) -> float:
        """Constant, then linear decay to zero across the last ``decay_iters``."""
        start = self.iterations - self.decay_iters
        if self.decay_iters == 0 or it < start:
            return base
        return base * (self.iterations - it) / self.decay_iters

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


HISTORY_FIELDS = ("iter", "loss_d", "loss_g", "mode_coverage", "high_quality_ratio")


@dataclass
class TrainHistory:
    config: TrainConfig
    records: list[dict] = field(default_factory=list)
    generator: Model | None = None
    discriminator: Model | None = None

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in self.records:
            w.writerow([r["iter"], repr(r["loss_d"]), repr(r["loss_g"]), r["mode_coverage"],
                        repr(r["high_quality_ratio"])])
        return buf.getvalue()

    def checkpoint(self) -> dict[str, np.ndarray]:
        out = {f"generator/{k}": v.copy() for k, v in self.generator.state_dict().items()}
        out.update({f"discriminator/{k}": v.copy()
                    for k, v in self.discriminator.state_dict().items()})
        return out

    def sample(self, count: int, seed: int | None = None) -> np.ndarray:
        """Draw generator outputs with a latent stream independent of training."""
        rng = np.random.default_rng([self.config.seed if seed is None else seed, 7])
        z = rng.standard_normal((count, self.config.d_z))
        return self.generator(z, train=False).data


def toy_specs(config: TrainConfig) -> tuple[ArchSpec, ArchSpec]:
    g = ArchSpec("toy", "generator", config.g_kind, d_z=config.d_z, hidden=config.hidden)
    d = ArchSpec("toy", "discriminator", config.d_kind, d_z=config.d_z, hidden=config.hidden,
                 sn=config.d_sn)
    return g, d


def train_gan(config: TrainConfig, data: GmmSpec = GmmSpec(),
              arch: tuple[ArchSpec, ArchSpec] | None = None, progress=None) -> TrainHistory:
    """Alternate ``n_dis`` discriminator updates with one generator update.

    Every ``eval_every`` generator iterations (and after the last one) a
    snapshot of the latest losses and the mode coverage of
    ``eval_samples`` generated points is appended to the history.
    """
    config.validate()
    g_spec, d_spec = arch if arch is not None else toy_specs(config)
    seq = np.random.SeedSequence(config.seed)
    init_g, init_d, data_seq, latent_seq = seq.spawn(4)
    G = build_model(g_spec, np.random.default_rng(init_g))
    D = build_model(d_spec, np.random.default_rng(init_d))
    data_rng = np.random.default_rng(data_seq)
    z_rng = np.random.default_rng(latent_seq)
    history = TrainHistory(config, [], G, D)
    g_params, d_params = G.parameters(), D.parameters()
    g_opt, d_opt = AdamState(config.lr_g), AdamState(config.lr_d)

    # divergence is detected and reported below, so overflow warnings are noise
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for it in range(config.iterations):
            _train_step(config, data, G, D, g_params, d_params, g_opt, d_opt,
                        data_rng, z_rng, it, history, progress)
    return history


def _check_loss(value: T.Tensor, what: str, it: int) -> float:
    v = float(value.data)
    if not math.isfinite(v):
        raise TrainingError(f"{what} diverged at iteration {it}")
    return v


def _update(params, tape, P, state, lr, it):
    try:
        adam_step(params, {k: tape.grad(v) for k, v in P.items()}, state, lr)
    except TrainingError as exc:
        raise TrainingError(f"{exc} at iteration {it}") from None


def _train_step(config, data, G, D, g_params, d_params, g_opt, d_opt, data_rng, z_rng, it,
                history, progress):
    b = config.batch_d
    for _ in range(config.n_dis):
        real = sample_gmm(data, b, data_rng)
        fake = G(z_rng.standard_normal((b, config.d_z)), train=True).data
        tape = T.Tape()
        P = D.variables(tape)
        # one pass over real and fake keeps a single power-iteration update per step
        scores = D(np.concatenate([real, fake]), P, train=True)
        ld = loss_d(T.slice_rows(scores, 0, b), T.slice_rows(scores, b, 2 * b), config.loss)
        lossd = _check_loss(ld, "discriminator loss", it)
        tape.backward(ld)
        _update(d_params, tape, P, d_opt, config.lr_at(it, config.lr_d), it)

    tape = T.Tape()
    P = G.variables(tape)
    fake = G(z_rng.standard_normal((config.batch_g, config.d_z)), P, train=True)
    lg = loss_g(D(fake, train=False), config.loss)
    lossg = _check_loss(lg, "generator loss", it)
    tape.backward(lg)
    _update(g_params, tape, P, g_opt, config.lr_at(it, config.lr_g), it)

    done = it + 1
    if done % config.eval_every == 0 or done == config.iterations:
        rep = mode_coverage(history.sample(config.eval_samples), data)
        history.records.append({"iter": done, "loss_d": lossd, "loss_g": lossg,
                                "mode_coverage": rep.covered_modes,
                                "high_quality_ratio": rep.high_quality_ratio})
        if progress is not None:
            progress(history.records[-1])


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
