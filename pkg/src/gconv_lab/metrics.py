"""Distribution-level evaluation: Fréchet distance, Inception score, mode coverage."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError

SYMMETRY_TOL = 1e-10
NEG_EIG_TOL = 1e-8


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).ravel()
        C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        if C.shape != (mu.size, mu.size):
            raise DimensionError(f"covariance {C.shape} does not match mean of length {mu.size}")
        if np.max(np.abs(C - C.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.abs(C).max()):
            raise ContractError("covariance is not symmetric")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "C", 0.5 * (C + C.T))

    @property
    def dim(self) -> int:
        return self.mu.size


def fit_gaussian_stats(samples) -> GaussianStats:
    """Sample mean and unbiased (1/(N-1)) covariance of an ``N x d`` array."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected N x d samples, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ContractError("need at least two samples to estimate a covariance")
    mu = x.mean(axis=0)
    d = x - mu
    C = d.T @ d / (x.shape[0] - 1)
    return GaussianStats(mu, 0.5 * (C + C.T))


def _psd_sqrt(C: np.ndarray, what: str) -> np.ndarray:
    w, V = np.linalg.eigh(C)
    if w.min(initial=0.0) < -NEG_EIG_TOL:
        raise ContractError(f"{what} is not positive semi-definite (eigenvalue {w.min():.3g})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(p: GaussianStats, q: GaussianStats) -> float:
    """``|mu_p - mu_q|^2 + tr(C_p + C_q - 2 (C_p C_q)^(1/2))``.

    The trace of ``(C_p C_q)^(1/2)`` is taken from the symmetric matrix
    ``C_q^(1/2) C_p C_q^(1/2)``, which has the same eigenvalues.
    """
    if p.dim != q.dim:
        raise DimensionError(f"dimension mismatch: {p.dim} vs {q.dim}")
    diff = p.mu - q.mu
    sq = _psd_sqrt(q.C, "C_q")
    _psd_sqrt(p.C, "C_p")
    M = sq @ p.C @ sq
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    if w.min(initial=0.0) < -NEG_EIG_TOL:
        raise ContractError(f"C_q^1/2 C_p C_q^1/2 has eigenvalue {w.min():.3g}")
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    value = float(diff @ diff + np.trace(p.C) + np.trace(q.C) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def inception_score(P) -> float:
    """``exp(mean_i KL(P[i] || mean_j P[j]))`` over one split."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ContractError("inception_score needs a non-empty N x L probability matrix")
    if (P < 0).any() or np.abs(P.sum(axis=1) - 1.0).max() > 1e-9:
        raise ContractError("rows must be non-negative and sum to 1")
    marginal = P.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(P) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


@dataclass
class ModeReport:
    covered_modes: int
    counts: np.ndarray
    high_quality_ratio: float

    def to_dict(self) -> dict:
        return {"covered_modes": self.covered_modes, "counts": [int(c) for c in self.counts],
                "high_quality_ratio": self.high_quality_ratio}


def mode_coverage(samples, spec, threshold_multiplier: float = 3.0) -> ModeReport:
    """Nearest-center assignment of 2-D samples against a :class:`GmmSpec`.

    A mode counts as covered when at least ``max(1, N / (10 * modes))``
    samples fall within ``threshold_multiplier * std`` of its center.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError("mode_coverage needs a non-empty N x 2 sample array")
    centers = spec.centers()
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    close = np.sqrt(d2[np.arange(len(x)), nearest]) <= threshold_multiplier * spec.std
    counts = np.bincount(nearest[close], minlength=len(centers))
    need = max(1.0, x.shape[0] / (10 * len(centers)))
    return ModeReport(int((counts >= need).sum()), counts, float(close.mean()))
