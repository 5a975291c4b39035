"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criteria are checked at their stated tolerances. Runtime budgets are
reported next to each verdict; they describe a laptop, so they are shown
rather than enforced. Run standalone with ``python tests/test_acceptance.py``.
"""
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from gconv_lab import layers as L
from gconv_lab import tensor as T
from gconv_lab.checks import GRAD_TOL, GRADCHECK_LAYERS, equivalence_suite, gradcheck_suite
from gconv_lab.cli import main as cli_main
from gconv_lab.layers import GConvParams
from gconv_lab.metrics import GaussianStats, frechet_distance, inception_score
from gconv_lab.train import AdamState, adam_step, loss_d, loss_g

sys.path.insert(0, str(Path(__file__).parent))
from oracles import HandAdam, jacobi_singular_values  # noqa: E402

SEED = 0
VERDICTS: list[str] = []


def verdict(n: int, title: str, ok: bool, detail: str, started: float, budget: str):
    line = (f"ACCEPTANCE {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail} "
            f"(runtime {time.perf_counter() - started:.1f}s, budget {budget})")
    VERDICTS.append(line)
    print(line)
    assert ok, line


def test_1_parameter_audit(capsys):
    t0 = time.perf_counter()
    code = cli_main(["param-audit", "--format", "json"])
    out = json.loads(capsys.readouterr().out)
    got = {r["conv_kind"]: r["conv_weights"] for r in out["reports"] if r["resolution"] == 32}
    rel = {k: abs(got[k] - t) / t for k, t in (("conv", 3.54e6), ("gconv", 4.37e6))}
    ok = code == 0 and got == {"conv": 3_545_856, "gconv": 4_381_440} and max(rel.values()) <= 0.01
    verdict(1, "parameter audit", ok,
            f"conv {got['conv']:,} ({rel['conv']:+.2%} of 3.54M), "
            f"gconv {got['gconv']:,} ({rel['gconv']:+.2%} of 4.37M)", t0, "5s")


def test_2_direct_fused_equivalence():
    t0 = time.perf_counter()
    results = equivalence_suite(seed=SEED, count=120)
    worst = max(r.deviation for r in results)
    batches = {int(r.shape.split()[0][1:]) for r in results}
    ok = len(results) >= 100 and batches == {1, 2, 4} and all(r.ok for r in results)
    verdict(2, "direct/fused equivalence", ok,
            f"{len(results)} cases, max relative deviation {worst:.2e} (< 1e-9)", t0, "30s")


def test_3_gradient_correctness():
    t0 = time.perf_counter()
    results = gradcheck_suite(seed=SEED, cases=20)
    bad = [r for r in results if not r.ok]
    per_layer = {k: max(r.error for r in results if r.layer == k) for k in GRADCHECK_LAYERS}
    detail = (f"{len(results) - len(bad)}/{len(results)} cases < {GRAD_TOL:g}; worst per layer "
              + ", ".join(f"{k} {v:.1e}" for k, v in per_layer.items()))
    if bad:
        # same cases at a coarser step separate float64 rounding from wrong gradients
        coarse = {(r.layer, r.case): r.error
                  for r in gradcheck_suite(seed=SEED, cases=20, step=1e-4,
                                           layers=tuple(dict.fromkeys(b.layer for b in bad)))}
        detail += "; over tolerance (error at step 1e-6 / at step 1e-4): " + ", ".join(
            f"{r.layer}#{r.case} {r.error:.1e}/{coarse[(r.layer, r.case)]:.1e}" for r in bad)
    verdict(3, "gradient correctness", not bad, detail, t0, "5 min")


@pytest.mark.slow
def test_4_toy_gmm_reproduction(tmp_path, capsys):
    t0 = time.perf_counter()
    code = cli_main(["toy-gan", "--seeds", "1,2,3,4,5", "--out", str(tmp_path)])
    capsys.readouterr()
    runs = json.loads((tmp_path / "summary.json").read_text())["runs"]
    by = {k: [r for r in runs if r["kind"] == k] for k in ("gconv", "conv")}
    wins = sum(r.get("covered_modes") == 8 and r.get("high_quality_ratio", 0) >= 0.8
               for r in by["gconv"])
    mean = {k: float(np.mean([r.get("covered_modes", 0) for r in v])) for k, v in by.items()}
    ok = code == 0 and wins >= 4 and mean["conv"] < mean["gconv"]
    runs_txt = "; ".join(f"{r['kind']} s{r['seed']}: "
                         + (f"{r['covered_modes']} modes hq {r['high_quality_ratio']:.3f}"
                            if "error" not in r else r["error"]) for r in runs)
    verdict(4, "toy GMM reproduction", ok,
            f"gconv full-coverage seeds with hq>=0.8: {wins}/5; mean modes gconv {mean['gconv']:.1f} "
            f"vs conv {mean['conv']:.1f} [{runs_txt}]", t0, "~20 min")


def test_5_metric_formulas():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    I2 = np.eye(2)
    f = [frechet_distance(GaussianStats(np.zeros(2), I2), GaussianStats(np.zeros(2), I2)),
         frechet_distance(GaussianStats(np.zeros(2), I2), GaussianStats(np.array([3.0, 4.0]), I2)),
         frechet_distance(GaussianStats(np.zeros(2), 4 * I2), GaussianStats(np.zeros(2), I2))]
    f_ok = all(abs(a - b) < 1e-9 for a, b in zip(f, (0.0, 25.0, 2.0)))
    L_ = 6
    hand = math.exp((math.log(4 / 3) + 0.5 * math.log(2 / 3) + 0.5 * math.log(2)) / 2)
    s = [inception_score(np.full((5, 4), 0.25)), inception_score(np.tile(np.eye(L_), (2, 1))),
         inception_score([[1.0, 0.0], [0.5, 0.5]])]
    s_ok = all(abs(a - b) < 1e-6 for a, b in zip(s, (1.0, L_, hand)))
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 9))
        lp, lq = rng.uniform(0, 5, d), rng.uniform(0, 5, d)
        dmu = rng.standard_normal(d)
        got = frechet_distance(GaussianStats(dmu, np.diag(lp)), GaussianStats(np.zeros(d), np.diag(lq)))
        want = float(((np.sqrt(lp) - np.sqrt(lq)) ** 2).sum() + dmu @ dmu)
        worst = max(worst, abs(got - want))
    ok = f_ok and s_ok and worst < 1e-10
    verdict(5, "metric formulas", ok,
            f"Frechet {f[0]:.1e}/{f[1]:.12g}/{f[2]:.12g}; IS {s[0]:.12g}/{s[1]:.12g}/{s[2]:.10f}; "
            f"diagonal identity max error {worst:.1e} over 100 cases", t0, "5s")


def test_6_degradation_and_sensitivity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    b, h, m, n, d_z = 4, 5, 3, 6, 8
    K = rng.standard_normal((9 * m, n))
    bias = rng.standard_normal(n)
    X = rng.standard_normal((b, h, h, m))
    z = rng.standard_normal((b, d_z))
    plain = T.add(T.conv2d(X, K.reshape(3, 3, m, n)), bias).data
    zero = GConvParams(K, rng.standard_normal((m + d_z, n)), np.zeros((n, n)), (3, 3), bias)
    exact = all(np.array_equal(fwd(X, z, zero).data, plain)
                for fwd in (L.gconv_forward_direct, L.gconv_forward_fused))
    # one input map repeated across the batch, a different latent per row
    Xs = np.repeat(rng.standard_normal((1, h, h, m)), b, axis=0)
    live = GConvParams(K, rng.standard_normal((m + d_z, n)), rng.standard_normal((n, n)), (3, 3), bias)
    Yg = L.gconv_forward_fused(Xs, z, live).data
    Yc = T.conv2d(Xs, K.reshape(3, 3, m, n)).data
    distinct = all(not np.array_equal(Yg[i], Yg[j]) for i in range(b) for j in range(i + 1, b))
    identical = all(np.array_equal(Yc[0], Yc[i]) for i in range(b))
    ok = exact and distinct and identical
    verdict(6, "degradation and sensitivity", ok,
            f"W_L=0 equals conv bit-for-bit: {exact}; gconv slices pairwise distinct: {distinct}; "
            f"conv slices identical: {identical}", t0, "5s")


def test_7_loss_and_optimizer():
    t0 = time.perf_counter()
    ones, zeros = np.ones(4), np.zeros(4)
    checks = {
        "hinge D (1,-1)": (float(loss_d(ones, -ones, "hinge").data), 0.0, 0.0),
        "hinge D (0,0)": (float(loss_d(zeros, zeros, "hinge").data), 2.0, 0.0),
        "ce D (0,0)": (float(loss_d(zeros, zeros, "cross_entropy").data), -2 * math.log(0.5), 1e-12),
        "hinge G c": (float(loss_g(np.full(4, 0.7), "hinge").data), -0.7, 0.0),
        "lsgan G 1": (float(loss_g(ones, "lsgan").data), 0.0, 0.0),
        "ce G 0": (float(loss_g(zeros, "cross_entropy").data), -math.log(0.5), 1e-12),
    }
    p, s = {"w": np.array([1.0, 2.0])}, AdamState(0.1)
    adam_step(p, {"w": np.zeros(2)}, s)
    checks["adam g=0"] = (float(np.abs(p["w"] - [1.0, 2.0]).max()) + (s.t != 1), 0.0, 0.0)
    p, s = {"w": np.array([0.0])}, AdamState(0.1)
    adam_step(p, {"w": np.array([4.0])}, s)
    checks["adam t=1 g=4"] = (float(p["w"][0]), -0.1 * 4 / (4 + 1e-8), 1e-15)
    a = np.array([2.0, -0.5, 1.5])
    p, s, oracle, ox = {"x": np.array([1.0, -3.0, 0.5])}, AdamState(0.05), HandAdam(0.05), [1.0, -3.0, 0.5]
    for _ in range(3):
        adam_step(p, {"x": a * p["x"]}, s)
        ox = oracle.step(ox, [ai * xi for ai, xi in zip(a, ox)])
    trace_err = float(np.abs(p["x"] - ox).max())
    bad = [k for k, (got, want, tol) in checks.items() if abs(got - want) > tol]
    ok = not bad and trace_err < 1e-12
    verdict(7, "loss and optimizer", ok,
            f"{len(checks) - len(bad)}/{len(checks)} examples exact"
            + (f" (failed: {', '.join(bad)})" if bad else "")
            + f"; 3-step Adam vs oracle max error {trace_err:.1e}", t0, "5s")


def test_8_spectral_normalization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    parts, ok = [], True
    for shape in ((4, 3), (64, 32)):
        W = rng.standard_normal(shape)
        state = L.PowerIterationState.init(*shape, rng)
        Wn = L.spectral_normalize(W, state, iters=50).data
        top = max(jacobi_singular_values(Wn))
        sv = sorted(jacobi_singular_values(W), reverse=True)
        ok &= abs(top - 1) <= 1e-6
        parts.append(f"{shape[0]}x{shape[1]}: sigma_max {top:.9f} (|err| {abs(top - 1):.1e}, "
                     f"sigma2/sigma1 {sv[1] / sv[0]:.3f})")
    verdict(8, "spectral normalization", ok, "; ".join(parts), t0, "5s")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
