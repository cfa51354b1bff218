"""CSV and SVG output for runs, comparisons and order checks.

Files are UTF-8 with LF line endings.  Every CSV starts with a
``# config_hash=...`` comment line; SVGs carry the hash in their metadata and
are rendered with a fixed id salt and no timestamp so reruns are
byte-identical.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .config import ExperimentConfig
from .experiments import RunRecord

CURVE_HEADER = ("step", "metric_mean", "metric_std")
METRIC_LABELS = {
    "mse": "query MSE",
    "accuracy": "query accuracy",
    "return": "average return",
    "local_error": "local error",
}


def _num(x) -> str:
    return repr(float(x))


def _open(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8", newline="")


def write_table(path, header, rows, config_hash: str) -> Path:
    """Delimited table with a leading hash comment; ``rows`` may be empty."""
    path = Path(path)
    with _open(path) as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def write_curve_csv(path, mean, std, config_hash: str) -> Path:
    rows = [(i, float(m), float(s)) for i, (m, s) in enumerate(zip(mean, std))]
    return write_table(path, CURVE_HEADER, rows, config_hash)


def read_curve_csv(path):
    """(config_hash, steps, mean, std) from a curve CSV."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    config_hash = lines[0].split("=", 1)[1]
    body = list(csv.reader(lines[2:]))
    steps = np.array([int(r[0]) for r in body], dtype=int)
    mean = np.array([float(r[1]) for r in body])
    std = np.array([float(r[2]) for r in body])
    return config_hash, steps, mean, std


def plot_curves(
    path,
    curves: dict,
    config_hash: str,
    xlabel: str = "adaptation step",
    ylabel: str = "metric",
    title: str | None = None,
    logscale: bool = False,
    x=None,
) -> Path:
    """Line chart with one labelled polyline (and ±std band) per entry of ``curves``.

    ``curves`` maps label -> (mean, std) or (mean, std, x); std may be None.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rc = {"svg.hashsalt": config_hash, "svg.fonttype": "none", "font.size": 9}
    with matplotlib.rc_context(rc):
        fig = Figure(figsize=(5.0, 3.5))
        ax = fig.add_subplot()
        for label, (mean, std, *own_x) in curves.items():
            mean = np.asarray(mean, dtype=np.float64)
            xs = own_x[0] if own_x else x
            xs = np.arange(mean.size) if xs is None else np.asarray(xs)
            (line,) = ax.plot(xs, mean, marker="o", markersize=3, label=label)
            if std is not None and mean.size and not logscale:
                std = np.asarray(std, dtype=np.float64)
                ax.fill_between(xs, mean - std, mean + std, color=line.get_color(), alpha=0.15)
        if logscale:
            ax.set_xscale("log")
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if curves:
            ax.legend(frameon=False)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(
            path, format="svg", metadata={"Date": None, "Description": f"config_hash={config_hash}"}
        )
    return path


def _title(cfg: ExperimentConfig) -> str:
    return f"{cfg.experiment}, {cfg.tableau}, seed {cfg.seed}"


def emit_results(record: RunRecord, out_dir=None) -> dict[str, Path]:
    """Write curve/train CSVs, the curve SVG, the resolved config and a JSON summary."""
    cfg = record.config
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    h = cfg.hash()
    paths = {}
    paths["config"] = cfg.save(out / "config.ini")
    paths["curve_csv"] = write_curve_csv(out / "curve.csv", record.curve_mean, record.curve_std, h)
    paths["train_csv"] = write_curve_csv(out / "train.csv", record.train_mean, record.train_std, h)
    if record.metric == "local_error":
        x = record.extra.get("steps")
        paths["svg"] = plot_curves(
            out / "curve.svg", {cfg.tableau: (record.curve_mean, None)}, h,
            xlabel="step size h", ylabel="local error", title=_title(cfg), logscale=True, x=x,
        )
    else:
        paths["svg"] = plot_curves(
            out / "curve.svg", {cfg.tableau: (record.curve_mean, record.curve_std)}, h,
            ylabel=METRIC_LABELS.get(record.metric, record.metric), title=_title(cfg),
        )
    summary = {
        "config_hash": h,
        "metric": record.metric,
        "final": record.final,
        "wall_clock_s": record.wall_clock,
        **{k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in record.extra.items()},
    }
    with _open(out / "summary.json") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["summary"] = out / "summary.json"
    return paths


def comparison_hash(records: list[RunRecord]) -> str:
    joined = "\n".join(r.config.to_text() for r in records)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()[:12]


def emit_comparison(records: list[RunRecord], out_dir) -> dict[str, Path]:
    """Joint long-format table and one chart with a polyline per tableau."""
    out = Path(out_dir)
    h = comparison_hash(records)
    rows = []
    for r in records:
        for i, (m, s) in enumerate(zip(r.curve_mean, r.curve_std)):
            rows.append((r.config.tableau, i, float(m), float(s)))
    paths = {
        "csv": write_table(out / "compare.csv", ("tableau",) + CURVE_HEADER, rows, h),
    }
    metric = records[0].metric if records else "metric"
    curves = {r.config.tableau: (r.curve_mean, r.curve_std) for r in records}
    title = f"{records[0].config.experiment}, seed {records[0].config.seed}" if records else None
    paths["svg"] = plot_curves(
        out / "compare.svg", curves, h, ylabel=METRIC_LABELS.get(metric, metric), title=title
    )
    return paths


def emit_order_check(results: dict, out_dir, config_hash: str, field_name: str) -> dict[str, Path]:
    """Fitted orders, per-step errors and a log-log chart of error against h."""
    out = Path(out_dir)
    summary = [(name, float(res.order)) for name, res in results.items()]
    errors = [
        (name, float(hh), float(e)) for name, res in results.items() for hh, e in zip(res.steps, res.errors)
    ]
    paths = {
        "orders": write_table(out / "order_check.csv", ("tableau", "fitted_order"), summary, config_hash),
        "errors": write_table(out / "order_errors.csv", ("tableau", "h", "local_error"), errors, config_hash),
    }
    curves = {
        f"{name} ({res.order:.2f})": (res.errors, None, res.steps) for name, res in results.items()
    }
    paths["svg"] = plot_curves(
        out / "order_check.svg",
        curves,
        config_hash,
        xlabel="step size h",
        ylabel="local error",
        title=f"one-step error, {field_name} field",
        logscale=True,
    )
    return paths
