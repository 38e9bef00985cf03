"""Command-line entry point.

Every subcommand writes its data (CSV/SVG), a ``summary.json`` and a
``manifest.json`` into ``--out`` and exits with status 0 only when all of
its checks pass. ``check-stationarity`` prints its JSON report to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from . import experiments as ex
from .losses import LatentConfiguration, SimilarityConfig
from .variations import stationarity_check

log = logging.getLogger("contrastive_dynamics")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    if ":" in text:
        lo, hi = (int(v) for v in text.split(":"))
        return list(range(lo, hi + 1))
    return [int(v) for v in text.split(",") if v.strip()]


def _take(options: dict, allowed: dict) -> dict:
    unknown = sorted(set(options) - set(allowed))
    if unknown:
        raise ValueError(f"unknown options: {unknown}")
    return {**allowed, **options}


def _sweep_clusters(options, seed):
    o = _take(options, {"K": list(range(1, 65)), "tau": [0.05, 0.1], "n": None})
    sweeps = ex.sweep_clusters(o["K"], o["tau"], o["n"])
    checks = {s.label: {"non_increasing": s.non_increasing(), "plateau": s.plateau} for s in sweeps}
    ok = all(c["non_increasing"] and c["plateau"] is not None for c in checks.values())
    return {"sweep_clusters": sweeps}, checks, ok


def _sweep_distance(options, seed):
    o = _take(options, {"K": 8, "tau": [0.05, 0.1, 0.2], "distances": None, "num": 101})
    distances = o["distances"] if o["distances"] is not None else ex.distance_grid(o["K"], o["num"])
    sweeps = ex.sweep_min_distance(o["K"], distances, o["tau"])
    checks = {s.label: {"non_increasing": s.non_increasing(), "threshold": s.plateau} for s in sweeps}
    ok = all(c["non_increasing"] and c["threshold"] is not None for c in checks.values())
    return {"sweep_distance": sweeps}, checks, ok


def _sweep_tau(options, seed):
    o = _take(options, {"K": 8, "tau": list(ex.TAU_GRID), "num": 101, "geometry": "arc", "min_r2": 0.95})
    result = ex.sweep_tau_threshold(o["tau"], o["K"], ex.distance_grid(o["K"], o["num"]), geometry=o["geometry"])
    summary = result.summary()
    summary["intercept_over_max"] = abs(result.intercept) / float(np.max(result.values))
    return {"sweep_tau": result}, summary, result.r2 >= o["min_r2"]


def _compare(options, seed):
    o = dict(options)
    runs = int(o.pop("runs", 1))
    min_pass = o.pop("min_pass", None)
    results, verdicts = {}, []
    for s in range(seed, seed + runs):
        report = ex.compare_dynamics(ex.CompareConfig(**{**o, "seed": s}))
        results[f"kernel_seed{s}"] = report.kernel
        results[f"vanilla_seed{s}"] = report.vanilla
        verdicts.append({**report.verdict, "passed": report.passed})
    passed = sum(v["passed"] for v in verdicts)
    need = math.ceil(0.8 * runs) if min_pass is None else int(min_pass)
    return results, {"runs": verdicts, "passed": passed, "required": need}, passed >= need


def _gradients(options, seed):
    o = _take(options, {"instances": 20, "tol": 1e-5})
    report = ex.gradient_suite(o["instances"], seed)
    return {}, report, report["max"] <= o["tol"]


def _kernel_converge(options, seed):
    o = _take(options, {"widths": [256, 4096], "seeds": 20, "d": 4, "ratio_range": [2.5, 6.5]})
    report = ex.kernel_convergence(o["widths"], seeds=o["seeds"], d=o["d"])
    lo, hi = o["ratio_range"]
    return {}, report, all(lo <= r <= hi for r in report["ratios"].values())


EXPERIMENTS: dict[str, Callable] = {
    "sweep-clusters": _sweep_clusters,
    "sweep-distance": _sweep_distance,
    "sweep-tau": _sweep_tau,
    "compare-dynamics": _compare,
    "check-gradients": _gradients,
    "kernel-converge": _kernel_converge,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def execute(name: str, options: dict, seed: int, out, fmt: str, config=None) -> int:
    results, summary, ok = EXPERIMENTS[name](options, seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = ex.emit_plots(results, out, fmt) if results else []
    summary = _jsonable({"experiment": name, "ok": bool(ok), "summary": summary})
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files.append(summary_path)
    manifest_config = config if config is not None else {"experiment": name, "options": options, "seed": seed}
    ex.write_manifest(out, manifest_config, seed, files)
    print(json.dumps(summary, sort_keys=True))
    if not ok:
        log.error("%s: checks failed", name)
    return 0 if ok else 1


def check_stationarity(path, tau: float, psi: str, tol: float, out=None) -> int:
    conf = LatentConfiguration.from_csv(path)
    stationary, report = stationarity_check(conf, SimilarityConfig(tau=tau, psi=psi), tol)
    payload = {"max_tangential_norm": report.max_tangential_norm,
               "lambda_spread": report.lambda_spread,
               "stationary": bool(stationary)}
    text = json.dumps(payload, sort_keys=True)
    print(text)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "stationarity.json").write_text(text + "\n")
    return 0 if stationary else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="results", help="output directory")
    common.add_argument("--format", choices=("csv", "svg", "both"), default="both")

    parser = argparse.ArgumentParser(prog="contrastive-dynamics", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep-clusters", parents=[common], help="loss against the number of clusters")
    p.add_argument("--k", type=_ints, default=list(range(1, 65)), help="K values, 'lo:hi' or comma list")
    p.add_argument("--tau", type=_floats, default=[0.05, 0.1])
    p.add_argument("--n", type=int, default=None, help="samples spread over the K locations")

    p = sub.add_parser("sweep-distance", parents=[common], help="loss against the minimum squared distance")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--tau", type=_floats, default=[0.05, 0.1, 0.2])
    p.add_argument("--num", type=int, default=101, help="number of distance grid points")

    p = sub.add_parser("sweep-tau", parents=[common], help="threshold distance against tau")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--tau", type=_floats, default=list(ex.TAU_GRID))
    p.add_argument("--num", type=int, default=101)
    p.add_argument("--geometry", choices=("arc", "even"), default="arc")
    p.add_argument("--min-r2", type=float, default=0.95)

    p = sub.add_parser("compare-dynamics", parents=[common], help="weight-space vs vanilla descent")
    p.add_argument("--runs", type=int, default=1, help="consecutive seeds starting at --seed")
    p.add_argument("--noise-bound", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--weight-steps", type=int, default=400)
    p.add_argument("--vanilla-steps", type=int, default=1000)

    p = sub.add_parser("check-gradients", parents=[common], help="first variations against finite differences")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-5)

    p = sub.add_parser("check-stationarity", help="tangential gradient of a latent configuration")
    p.add_argument("input", help="latent CSV with z_k columns and an optional weight column")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--psi", choices=("log1p", "log1p_half", "identity"), default="log1p")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out", default=None)

    p = sub.add_parser("kernel-converge", parents=[common], help="finite-width kernel against its limit")
    p.add_argument("--widths", type=_ints, default=[256, 4096])
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--d", type=int, default=4)

    p = sub.add_parser("run", parents=[common], help="run an experiment described by a JSON config")
    p.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "check-stationarity":
            return check_stationarity(args.input, args.tau, args.psi, args.tol, args.out)
        if args.command == "run":
            config = ex.ExperimentConfig.from_json(Path(args.config).read_text())
            options = {**config.sweep, **config.dataset, **config.network, **config.flow}
            if config.experiment == "compare-dynamics" and "tau" in config.similarity:
                options["tau"] = config.similarity["tau"]
            return execute(config.experiment, options, config.seed, config.out, args.format, config)
        options = {
            "sweep-clusters": lambda: {"K": args.k, "tau": args.tau, "n": args.n},
            "sweep-distance": lambda: {"K": args.k, "tau": args.tau, "num": args.num},
            "sweep-tau": lambda: {"K": args.k, "tau": args.tau, "num": args.num,
                                  "geometry": args.geometry, "min_r2": args.min_r2},
            "compare-dynamics": lambda: {"runs": args.runs, "noise_bound": args.noise_bound, "tau": args.tau,
                                         "width": args.width, "weight_steps": args.weight_steps,
                                         "vanilla_steps": args.vanilla_steps},
            "check-gradients": lambda: {"instances": args.instances, "tol": args.tol},
            "kernel-converge": lambda: {"widths": args.widths, "seeds": args.seeds, "d": args.d},
        }[args.command]()
        return execute(args.command, options, args.seed, args.out, args.format)
    except (ValueError, TypeError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
