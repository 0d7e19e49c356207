"""Paired comparison of runs: per-seed deltas, CSV series and PNG figures."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .config import ConfigError
from .metrics import read_jsonl, write_csv

METRIC_FILES = ("rl_metrics.jsonl", "opd_metrics.jsonl", "sft_metrics.jsonl")


def _manifest(run: Path) -> dict:
    path = run / "manifest.json"
    if not path.exists():
        raise ConfigError(f"{run}: no manifest.json (not a completed run)")
    return json.loads(path.read_text())


def find_eval(run: Path, dataset: str, stage: str | None = None) -> Path:
    """The evaluation report for ``dataset``, from ``stage`` or else the last stage having one."""
    stages = _manifest(run)["stages"]
    candidates = [stage] if stage else list(reversed(stages))
    for st in candidates:
        p = run / "stages" / st / f"eval_{dataset}.json"
        if p.exists():
            return p
    raise ConfigError(f"{run}: no evaluation of {dataset!r}")


def recount(report: dict) -> float:
    """Accuracy recomputed from per-item verdicts (full score counts as correct)."""
    recs = report["records"]
    return sum(r["score"] == 2 for r in recs) / len(recs) if recs else 0.0


def _task_signature(report: dict) -> list:
    return [(r["item_id"], r["prompt"], r["reference"]) for r in report["records"]]


def load_series(run: Path, metric: str, stage: str | None = None) -> list[tuple[int, float]]:
    stages = _manifest(run)["stages"]
    for st in ([stage] if stage else list(reversed(stages))):
        for name in METRIC_FILES:
            p = run / "stages" / st / name
            if p.exists():
                rows = [r for r in read_jsonl(p) if metric in r and r[metric] is not None]
                if rows:
                    return [(int(r["step"]), float(r[metric])) for r in rows]
    return []


def compare_runs(runs_a: Sequence, runs_b: Sequence, dataset: str, metric: str = "accuracy",
                 series_metric: str | None = None, stage: str | None = None,
                 out_dir=None) -> dict:
    """Pair runs by seed and report ``a - b`` per seed and on average.

    Both sides must have been evaluated on the same task items and share
    their seeds; anything else is rejected.
    """
    runs_a, runs_b = [Path(r) for r in runs_a], [Path(r) for r in runs_b]
    if len(runs_a) != len(runs_b) or not runs_a:
        raise ConfigError("need the same nonzero number of runs on each side")
    by_seed_a = {_manifest(r)["seed"]: r for r in runs_a}
    by_seed_b = {_manifest(r)["seed"]: r for r in runs_b}
    if set(by_seed_a) != set(by_seed_b) or len(by_seed_a) != len(runs_a):
        raise ConfigError(f"seeds do not pair up: {sorted(by_seed_a)} vs {sorted(by_seed_b)}")
    rows, series_rows = [], []
    for seed in sorted(by_seed_a):
        ra, rb = by_seed_a[seed], by_seed_b[seed]
        rep_a = json.loads(find_eval(ra, dataset, stage).read_text())
        rep_b = json.loads(find_eval(rb, dataset, stage).read_text())
        if _task_signature(rep_a) != _task_signature(rep_b):
            raise ConfigError(f"seed {seed}: runs were evaluated on different task sets")
        va = recount(rep_a) if metric == "accuracy" else float(rep_a[metric])
        vb = recount(rep_b) if metric == "accuracy" else float(rep_b[metric])
        rows.append({"seed": seed, "run_a": str(ra), "run_b": str(rb), f"{metric}_a": va,
                     f"{metric}_b": vb, "delta": va - vb})
        if series_metric:
            for side, run in (("a", ra), ("b", rb)):
                for step, val in load_series(run, series_metric):
                    series_rows.append({"side": side, "seed": seed, "step": step,
                                        series_metric: val})
    result = {"metric": metric, "dataset": dataset, "per_seed": rows,
              "mean_delta": sum(r["delta"] for r in rows) / len(rows)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "deltas.csv", rows)
        (out / "compare.json").write_text(json.dumps(result, indent=1, sort_keys=True))
        if series_rows:
            write_csv(out / "series.csv", series_rows)
            plot_series(series_rows, series_metric, out / "series.png")
        plot_deltas(rows, metric, out / "deltas.png")
    return result


def plot_series(rows: Sequence[dict], metric: str, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    keys = sorted({(r["side"], r["seed"]) for r in rows})
    for side, seed in keys:
        pts = sorted((r["step"], r[metric]) for r in rows if r["side"] == side and r["seed"] == seed)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], color="C0" if side == "a" else "C1",
                alpha=0.8, lw=1, label=f"{side} seed {seed}")
    ax.set_xlabel("step")
    ax.set_ylabel(metric)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_deltas(rows: Sequence[dict], metric: str, path) -> None:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar([str(r["seed"]) for r in rows], [r["delta"] for r in rows], color="C2")
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xlabel("seed")
    ax.set_ylabel(f"{metric} delta (a - b)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
