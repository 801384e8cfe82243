"""Command-line entry point.

    roast train --config cfg.json --method roast --out runs/one
    roast benchmark --config cfg.json --out runs/grid
    roast verify-estimator --out estimator.json
    roast gradcheck
    roast report --from runs/grid/report.json --out runs/rerender

Exit codes: 0 success, 1 validation error, 2 divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("roast")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str], seed: int | None, out: str | None):
    from roast.bench.experiment import ExperimentConfig

    raw: dict = {}
    if path:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ValueError("config must be a JSON object")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _parse_value(value)
    if seed is not None:
        raw["seeds"] = [seed]
    if out is not None:
        raw["out"] = out
    return ExperimentConfig.from_dict(raw)


def cmd_train(args) -> int:
    from roast.bench.experiment import METHODS, evaluate, method_config, prepare_bundle
    from roast.models import Model
    from roast.trainer import DivergenceError, train

    cfg = load_config(args.config, args.set, args.seed, args.out)
    if args.method not in METHODS:
        raise ValueError(f"unknown method {args.method!r}; choose from {list(METHODS)}")
    seed = cfg.seeds[0]
    bundle = prepare_bundle(cfg)
    model = Model.create(cfg.model, seed)
    try:
        trainlog = train(model, bundle.train.tokens, bundle.train.labels,
                         method_config(cfg.training, args.method, seed))
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    vec, breakdown = evaluate(model, bundle)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    trainlog.write(out / "trainlog.jsonl")
    (out / "metrics.json").write_text(json.dumps(
        {"method": args.method, "seed": seed, "metrics": vec.as_dict(), "breakdown": breakdown},
        indent=2, sort_keys=True) + "\n")
    print(json.dumps(vec.as_dict()))
    return EXIT_OK


def cmd_benchmark(args) -> int:
    from roast.bench.experiment import run_experiment
    from roast.bench.report import write_report

    cfg = load_config(args.config, args.set, args.seed, args.out)
    if args.workers is not None:
        cfg.workers = args.workers
    t0 = time.perf_counter()
    results = run_experiment(cfg)
    config = cfg.to_dict()
    # neither the worker count nor the output location affects results
    config.pop("workers")
    config.pop("out")
    csv_path, json_path = write_report(results, cfg.out, config)
    timing = {f"{r.method}/seed{r.seed}": r.wall_time for r in results}
    timing["total"] = time.perf_counter() - t0
    (Path(cfg.out) / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    print(csv_path.read_text(), end="")
    if all(r.diverged for r in results):
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_report(args) -> int:
    from roast.bench.report import read_runs, write_report

    results, config = read_runs(args.source)
    csv_path, _ = write_report(results, args.out, config)
    print(csv_path.read_text(), end="")
    return EXIT_OK


def cmd_verify_estimator(args) -> int:
    from roast import estimator

    report = estimator.run_suite(args.seed or 0, args.mean_draws, args.var_draws)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        estimator.write_report(report, args.out)
    n = report["scenarios"]
    print(f"unbiased {report['unbiased_pass']}/{n}  variance {report['variance_pass']}/{n}  "
          f"bound {report['bound_pass']}/{n}  ({report['elapsed_s']:.1f}s)")
    ok = report["unbiased_pass"] >= n - 1 and report["variance_pass"] == n
    return EXIT_OK if ok else EXIT_INVALID


def cmd_gradcheck(args) -> int:
    from roast import gradcheck

    results = gradcheck.run_suite(args.instances, args.seed or 0)
    worst = max(r.max_rel_error for r in results)
    for kind in sorted({r.kind for r in results}):
        errs = [r.max_rel_error for r in results if r.kind == kind]
        print(f"{kind:17s} n={len(errs):3d} max_rel_error={max(errs):.3e}")
    print(f"overall max_rel_error={worst:.3e} (tolerance {gradcheck.REL_TOL:g})")
    return EXIT_OK if all(r.ok for r in results) else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roast", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="experiment config JSON")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override a config field, e.g. training.lr=0.05")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    p = sub.add_parser("train", help="train one method and evaluate it")
    common(p)
    p.add_argument("--method", default="roast")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("benchmark", help="run the full method grid and write reports")
    common(p)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("verify-estimator", help="Monte-Carlo check of the masked estimator")
    common(p, config=False)
    p.add_argument("--mean-draws", type=int, default=100_000)
    p.add_argument("--var-draws", type=int, default=1_000_000)
    p.set_defaults(func=cmd_verify_estimator)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p, config=False)
    p.add_argument("--instances", type=int, default=50)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="re-render reports from a stored report.json")
    p.add_argument("--from", dest="source", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from roast.bench.data import DatasetError
    from roast.trainer import DivergenceError

    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, TypeError, KeyError, DatasetError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
