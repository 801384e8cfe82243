"""CSV/JSON reports in the layout of a robustness comparison table."""

from __future__ import annotations

import csv
import json
import math
import warnings
from pathlib import Path

import numpy as np

from roast import metrics
from roast.bench.experiment import BASELINE, RunResult
from roast.metrics import METRICS, MetricVector

CSV_COLUMNS = ["method", "acc_in", "acc_shift", "acc_adv", "ece", "auroc_x100", "delta_avg", "rank_avg",
               "acc_in_std", "acc_shift_std", "acc_adv_std", "ece_std", "auroc_x100_std", "delta_avg_std",
               "n_runs", "n_diverged"]


def _display(vec: dict) -> dict:
    out = dict(vec)
    out["auroc_x100"] = 100.0 * out.pop("auroc")
    return out


def summarize(results: list[RunResult], baseline: str = BASELINE) -> dict:
    """Aggregate runs per method: mean/std metrics, mean relative improvement, average rank.

    Relative improvement is taken per seed against the baseline run of the
    same seed, then averaged.  Diverged runs are excluded and counted.
    """
    if not results:
        raise ValueError("no results to report")
    methods = list(dict.fromkeys(r.method for r in results))
    if baseline not in methods:
        baseline = methods[0]
    base_by_seed = {r.seed: r.metrics for r in results
                    if r.method == baseline and r.metrics is not None}

    rows = []
    mean_vectors = []
    for m in methods:
        runs = [r for r in results if r.method == m]
        ok = [r for r in runs if r.metrics is not None]
        row: dict = {"method": m, "n_runs": len(runs), "n_diverged": len(runs) - len(ok)}
        if not ok:
            rows.append(row)
            mean_vectors.append(None)
            continue
        stacked = np.stack([r.metrics.as_array() for r in ok])
        means = dict(zip(METRICS, stacked.mean(axis=0).tolist()))
        stds = dict(zip(METRICS, stacked.std(axis=0).tolist()))
        deltas = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for r in ok:
                if r.seed in base_by_seed:
                    deltas.append(metrics.relative_improvement(r.metrics, base_by_seed[r.seed]))
        d_mean, d_std = metrics.mean_std(deltas)
        row.update(_display(means))
        row.update({f"{k}_std": v for k, v in _display(stds).items()})
        row["delta_avg"], row["delta_avg_std"] = d_mean, d_std
        row["per_seed"] = [{"seed": r.seed, "metrics": r.metrics.as_dict(), "breakdown": r.breakdown}
                           for r in ok]
        rows.append(row)
        mean_vectors.append(MetricVector(**means))

    valid = [i for i, v in enumerate(mean_vectors) if v is not None]
    if len(valid) >= 2:
        ranks = metrics.average_rank([mean_vectors[i] for i in valid])
        for i, rk in zip(valid, ranks):
            rows[i]["rank_avg"] = float(rk)
    elif valid:
        rows[valid[0]]["rank_avg"] = 1.0
    return {"baseline": baseline, "rows": rows}


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_csv(summary: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in summary["rows"]:
            w.writerow([_fmt(row.get(c)) for c in CSV_COLUMNS])


def write_report(results: list[RunResult], path, config: dict | None = None) -> tuple[Path, Path]:
    """Write ``report.csv`` and ``report.json`` into directory ``path``.

    The JSON keeps every run (metrics, per-split breakdown, epoch log) so
    the report can be re-rendered later; wall-clock times are left out to
    keep reports byte-identical across reruns.
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary = summarize(results)
        csv_path, json_path = out / "report.csv", out / "report.json"
        write_csv(summary, csv_path)
        doc = {"config": config, "summary": summary, "runs": [r.to_dict() for r in results]}
        json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return csv_path, json_path


def read_runs(json_path) -> tuple[list[RunResult], dict | None]:
    doc = json.loads(Path(json_path).read_text())
    return [RunResult.from_dict(r) for r in doc["runs"]], doc.get("config")
