"""Command-line entry point.

Subcommands: toy-gan, param-audit, gradcheck, equivalence, metrics.
Exit codes: 0 success, 1 threshold failure or divergence, 2 bad configuration.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import save_checkpoint
from .checks import GRADCHECK_LAYERS, equivalence_suite, gradcheck_suite
from .errors import GConvLabError, TrainingError
from .metrics import fit_gaussian_stats, frechet_distance, inception_score, mode_coverage
from .train import GmmSpec, TrainConfig, config_dict, train_gan
from .zoo import ArchSpec, build_model, count_weights

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
SAMPLE_COUNT = 10_000
AUDIT_TARGETS = {"conv": 3.54e6, "gconv": 4.37e6}
AUDIT_TOL = 0.01


class ConfigError(Exception):
    pass


def _meta() -> dict:
    return {"version": __version__, "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    return seeds


def _threads(jobs: int) -> int:
    raw = os.environ.get("GCONV_LAB_THREADS")
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"GCONV_LAB_THREADS must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ConfigError("GCONV_LAB_THREADS must be at least 1")
    return max(1, min(cap, jobs))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _emit(text: str, out: Path | None, name: str) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


# ---------------------------------------------------------------------------
# toy-gan

TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
GMM_KEYS = {f.name for f in fields(GmmSpec)}


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(data) - TRAIN_KEYS - {"gmm", "seeds", "kind"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if set(data.get("gmm", {})) - GMM_KEYS:
        raise ConfigError(f"unknown gmm keys: {sorted(set(data['gmm']) - GMM_KEYS)}")
    return data


def _toy_settings(args) -> tuple[TrainConfig, GmmSpec, list[int], list[str]]:
    """Defaults < config file < command-line flags."""
    file_cfg = _load_config(args.config)
    train_kw = {k: v for k, v in file_cfg.items() if k in TRAIN_KEYS}
    if args.loss is not None:
        train_kw["loss"] = args.loss
    if args.iterations is not None:
        train_kw["iterations"] = args.iterations
    seeds = _seeds(args.seeds) if args.seeds is not None else file_cfg.get("seeds", [1, 2, 3, 4, 5])
    kind = args.kind if args.kind is not None else file_cfg.get("kind")
    kinds = [kind] if kind else ["conv", "gconv"]
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    for k in kinds:
        if k not in ("conv", "gconv"):
            raise ConfigError(f"unknown kind {k!r}")
    try:
        config = TrainConfig(**train_kw).validate()
        gmm = GmmSpec(**file_cfg.get("gmm", {}))
    except (TypeError, GConvLabError) as exc:
        raise ConfigError(str(exc)) from None
    return config, gmm, seeds, kinds


def _run_one(config: TrainConfig, gmm: GmmSpec, kind: str, seed: int, out: Path) -> dict:
    cfg = config.replace(seed=seed, g_kind=kind)
    tag = f"{kind}_{seed}"
    try:
        history = train_gan(cfg, gmm)
    except TrainingError as exc:
        return {"seed": seed, "kind": kind, "error": str(exc)}
    (out / f"history_{tag}.csv").write_text(history.to_csv())
    samples = history.sample(SAMPLE_COUNT)
    (out / f"samples_{tag}.csv").write_text(
        _csv_text(("x", "y"), ((repr(float(a)), repr(float(b))) for a, b in samples)))
    save_checkpoint(out / f"checkpoint_{tag}", history.checkpoint(), {"seed": seed, "kind": kind})
    report = mode_coverage(samples, gmm)
    return {"seed": seed, "kind": kind, **report.to_dict()}


def cmd_toy_gan(args) -> int:
    config, gmm, seeds, kinds = _toy_settings(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(k, s) for s in seeds for k in kinds]
    with ThreadPoolExecutor(_threads(len(jobs))) as pool:
        runs = list(pool.map(lambda job: _run_one(config, gmm, *job, out), jobs))
    summary = {"runs": runs, "config": config_dict(config),
               "gmm": {"modes": gmm.modes, "radius": gmm.radius, "std": gmm.std},
               "meta": _meta()}
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    rows = [(r["kind"], r["seed"], r.get("covered_modes", ""), _fmt(r.get("high_quality_ratio", "")),
             r.get("error", "")) for r in runs]
    if args.format == "json":
        sys.stdout.write(json.dumps(runs, indent=1) + "\n")
    else:
        sys.stdout.write(_csv_text(("kind", "seed", "covered_modes", "high_quality_ratio", "error"), rows))
    return EXIT_FAIL if any("error" in r for r in runs) else EXIT_OK


# ---------------------------------------------------------------------------
# param-audit

def audit_reports(resolutions=(32, 128, 256)) -> list[dict]:
    reports = []
    for res in resolutions:
        for kind in ("conv", "gconv"):
            model = build_model(ArchSpec(res, "generator", kind), init="shape")
            reports.append(count_weights(model).to_dict())
    return reports


def cmd_param_audit(args) -> int:
    reports = audit_reports()
    failures = []
    for r in reports:
        if r["resolution"] == 32:
            target = AUDIT_TARGETS[r["conv_kind"]]
            rel = (r["conv_weights"] - target) / target
            if abs(rel) > AUDIT_TOL:
                failures.append(f"32/{r['conv_kind']}: {r['conv_weights']} vs {target:.0f} ({rel:+.2%})")
    for res in sorted({r["resolution"] for r in reports}):
        pair = {r["conv_kind"]: r for r in reports if r["resolution"] == res}
        if pair["gconv"]["conv_weights"] != pair["conv"]["conv_weights"] + pair["gconv"]["gconv_extra"]:
            failures.append(f"{res}: gconv count is not conv count plus gconv_extra")
    if args.format == "json":
        text = json.dumps({"reports": reports, "failures": failures}, indent=1) + "\n"
    else:
        text = _csv_text(("resolution", "conv_kind", "conv_weights", "gconv_extra", "total_weights"),
                         ((r["resolution"], r["conv_kind"], r["conv_weights"], r["gconv_extra"],
                           r["total_weights"]) for r in reports))
    _emit(text, Path(args.out) if args.out else None, f"param_audit.{args.format}")
    for f in failures:
        print(f"audit mismatch: {f}", file=sys.stderr)
    return EXIT_FAIL if failures else EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / equivalence

def cmd_gradcheck(args) -> int:
    seed = _seeds(args.seeds)[0] if args.seeds else 0
    if args.cases < 1:
        raise ConfigError("--cases must be positive")
    if args.inject_fault is not None and args.inject_fault not in GRADCHECK_LAYERS:
        raise ConfigError(f"unknown layer {args.inject_fault!r}")
    results = gradcheck_suite(seed, args.cases, fault=args.inject_fault)
    rows = [(r.layer, r.case, r.shape, f"{r.error:.3e}", "ok" if r.ok else "FAIL") for r in results]
    if args.format == "json":
        text = json.dumps([{"layer": r.layer, "case": r.case, "shape": r.shape, "error": r.error,
                            "ok": r.ok} for r in results], indent=1) + "\n"
    else:
        text = _csv_text(("layer", "case", "shape", "max_rel_error", "status"), rows)
    _emit(text, Path(args.out) if args.out else None, f"gradcheck.{args.format}")
    bad = [r for r in results if not r.ok]
    for r in bad:
        print(f"gradcheck failed: {r.layer} case {r.case} ({r.shape}) error {r.error:.3e}",
              file=sys.stderr)
    return EXIT_FAIL if bad else EXIT_OK


def cmd_equivalence(args) -> int:
    seed = _seeds(args.seeds)[0] if args.seeds else 0
    if args.count < 1:
        raise ConfigError("--count must be positive")
    results = equivalence_suite(seed, args.count)
    if args.format == "json":
        text = json.dumps({"max_deviation": max(r.deviation for r in results),
                           "cases": [{"case": r.case, "shape": r.shape, "deviation": r.deviation,
                                      "zero_mixing": r.zero_mixing, "ok": r.ok} for r in results]},
                          indent=1) + "\n"
    else:
        text = _csv_text(("case", "shape", "deviation", "zero_mixing", "status"),
                         ((r.case, r.shape, f"{r.deviation:.3e}", int(r.zero_mixing),
                           "ok" if r.ok else "FAIL") for r in results))
    _emit(text, Path(args.out) if args.out else None, f"equivalence.{args.format}")
    bad = [r for r in results if not r.ok]
    for r in bad:
        print(f"equivalence failed: case {r.case} ({r.shape}) deviation {r.deviation:.3e}",
              file=sys.stderr)
    return EXIT_FAIL if bad else EXIT_OK


# ---------------------------------------------------------------------------
# metrics

def read_csv_matrix(path: str) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if len(rows) < 2:
        raise ConfigError(f"{path}: expected a header row and at least one data row")
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[1] != len(rows[0]):
        raise ConfigError(f"{path}: ragged rows")
    return data


def cmd_metrics(args) -> int:
    if not (args.real or args.fake or args.probs or args.samples):
        raise ConfigError("metrics needs --real/--fake, --probs or --samples")
    result = {}
    if args.real or args.fake:
        if not (args.real and args.fake):
            raise ConfigError("--real and --fake go together")
        p = fit_gaussian_stats(read_csv_matrix(args.real))
        q = fit_gaussian_stats(read_csv_matrix(args.fake))
        result["frechet_distance"] = frechet_distance(p, q)
    if args.probs:
        result["inception_score"] = inception_score(read_csv_matrix(args.probs))
    if args.samples:
        report = mode_coverage(read_csv_matrix(args.samples), GmmSpec())
        result.update({"covered_modes": report.covered_modes,
                       "high_quality_ratio": report.high_quality_ratio})
    if args.format == "json":
        text = json.dumps(result, indent=1) + "\n"
    else:
        text = _csv_text(("metric", "value"), ((k, _fmt(v)) for k, v in result.items()))
    _emit(text, Path(args.out) if args.out else None, f"metrics.{args.format}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gconv-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fmt="csv"):
        p.add_argument("--seeds", help="comma-separated integer seeds")
        p.add_argument("--out", help="output directory (default: stdout for reports)")
        p.add_argument("--format", choices=("csv", "json"), default=fmt)

    p = sub.add_parser("toy-gan", help="train conv/gconv toy generators on the Gaussian ring")
    common(p)
    p.add_argument("--kind", choices=("conv", "gconv"), help="generator layer kind (default: both)")
    p.add_argument("--loss", choices=("ce", "hinge", "lsgan"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--config", help="JSON file with TrainConfig fields, 'gmm', 'seeds', 'kind'")
    p.set_defaults(func=cmd_toy_gan, out_default="toy_gan_out")

    p = sub.add_parser("param-audit", help="count generator convolution weights")
    common(p, "json")
    p.set_defaults(func=cmd_param_audit)

    p = sub.add_parser("gradcheck", help="finite-difference check every layer kind")
    common(p)
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("equivalence", help="compare direct and fused GConv paths")
    common(p)
    p.add_argument("--count", type=int, default=120)
    p.set_defaults(func=cmd_equivalence)

    p = sub.add_parser("metrics", help="Frechet distance / Inception score / mode coverage from CSV")
    common(p, "json")
    p.add_argument("--real", help="CSV of reference samples (header row, N x d)")
    p.add_argument("--fake", help="CSV of generated samples")
    p.add_argument("--probs", help="CSV probability matrix, one row per sample")
    p.add_argument("--samples", help="CSV of 2-D points scored against the default ring")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "out_default", None) and args.out is None:
        args.out = args.out_default
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"gconv-lab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GConvLabError as exc:
        print(f"gconv-lab: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
