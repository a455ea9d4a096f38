"""Reporting: aggregate metrics CSVs into a summary table and render the
standard figures (accuracy vs round, final accuracy vs heterogeneity,
matching-loss traces) as PNG files next to the delimited output.

The CSV stays the contract; everything here is derived from it plus the
manifest sitting beside each file.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .federation import read_metrics_csv  # noqa: E402

SUMMARY_COLUMNS = ("method", "alpha", "architecture", "seeds",
                   "mean_final_acc", "std_final_acc")


def _architecture_label(csv_path: Path) -> str:
    manifest = Path(csv_path).parent / "manifest.json"
    if manifest.exists():
        try:
            resolved = json.loads(manifest.read_text())["resolved"]
            block = resolved.get("global_model") or resolved.get("surrogate")
            if resolved.get("global_model") is None and block:
                # default companion model: double width, one extra layer
                return f"{block['family']}-d{block['depth'] + 1}w{block['width'] * 2}"
            if block:
                return f"{block['family']}-d{block['depth']}w{block['width']}"
        except (KeyError, json.JSONDecodeError):
            pass
    return "unknown"


def _series_by_cell(csv_paths):
    """(method, alpha, arch) -> seed -> [(round, global_acc)] from GLOBAL rows."""
    cells = defaultdict(lambda: defaultdict(list))
    for path in csv_paths:
        arch = _architecture_label(Path(path))
        for row in read_metrics_csv(path):
            if row["client_id_or_GLOBAL"] != "GLOBAL" or row["global_acc"] == "":
                continue
            key = (row["method"], row["alpha"], arch)
            cells[key][int(row["seed"])].append(
                (int(row["round"]), float(row["global_acc"])))
    for per_seed in cells.values():
        for seq in per_seed.values():
            seq.sort()
    return cells


def _mean_std(values):
    n = len(values)
    mean = sum(values) / n
    if n < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, var ** 0.5


def summarize(csv_paths) -> list[dict]:
    """Per (method, alpha, architecture): mean and sample std of the
    final-round global accuracy over seeds."""
    cells = _series_by_cell(csv_paths)
    if not cells:
        raise ValueError("no GLOBAL accuracy rows found in the given CSVs")
    table = []
    for (method, alpha, arch), per_seed in sorted(cells.items()):
        finals = [seq[-1][1] for seq in per_seed.values()]
        mean, std = _mean_std(finals)
        table.append({"method": method, "alpha": alpha, "architecture": arch,
                      "seeds": len(finals), "mean_final_acc": mean,
                      "std_final_acc": std})
    return table


def write_summary_csv(path, table) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_COLUMNS)
        for row in table:
            w.writerow([row["method"], row["alpha"], row["architecture"],
                        row["seeds"], f"{row['mean_final_acc']:.10g}",
                        f"{row['std_final_acc']:.10g}"])


def _plot_accuracy_vs_round(cells, out_path):
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for (method, alpha, arch), per_seed in sorted(cells.items()):
        rounds = sorted({r for seq in per_seed.values() for r, _ in seq})
        means, lows, highs = [], [], []
        for r in rounds:
            vals = [dict(seq).get(r) for seq in per_seed.values()]
            vals = [v for v in vals if v is not None]
            m, s = _mean_std(vals)
            means.append(m)
            lows.append(m - s)
            highs.append(m + s)
        label = f"{method} (alpha={alpha})"
        ax.plot(rounds, means, marker="o", markersize=3, label=label)
        ax.fill_between(rounds, lows, highs, alpha=0.15)
    ax.set_xlabel("communication round")
    ax.set_ylabel("global test accuracy")
    ax.set_title("Accuracy vs communication rounds")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def _plot_final_vs_alpha(table, out_path):
    by_method = defaultdict(list)
    for row in table:
        try:
            alpha = float(row["alpha"])
        except ValueError:
            continue
        by_method[row["method"]].append(
            (alpha, row["mean_final_acc"], row["std_final_acc"]))
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for method, pts in sorted(by_method.items()):
        pts.sort()
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        es = [p[2] for p in pts]
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=method)
    ax.set_xscale("log")
    ax.set_xlabel("Dirichlet concentration (alpha)")
    ax.set_ylabel("final global accuracy")
    ax.set_title("Final accuracy vs heterogeneity")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def _plot_traces(trace_paths, out_path):
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    plotted = 0
    for path in trace_paths:
        per_round = defaultdict(lambda: defaultdict(list))
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                per_round[int(row["round"])][int(row["iteration"])].append(
                    float(row["mtt_loss"]))
        for rnd in sorted(per_round):
            iters = sorted(per_round[rnd])
            med = [sorted(per_round[rnd][i])[len(per_round[rnd][i]) // 2]
                   for i in iters]
            ax.plot(iters, med, label=f"round {rnd}", alpha=0.8)
            plotted += 1
        break  # one traces file is enough for the standard figure
    if not plotted:
        plt.close(fig)
        return False
    ax.set_xlabel("latent iteration")
    ax.set_ylabel("median matching loss across clients")
    ax.set_title("Matching-loss traces")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return True


def render_report(csv_paths, out_dir: Path) -> list[Path]:
    """Summary CSV plus figures, all under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = summarize(csv_paths)
    outputs = []
    summary_path = out_dir / "summary.csv"
    write_summary_csv(summary_path, table)
    outputs.append(summary_path)

    cells = _series_by_cell(csv_paths)
    curves_path = out_dir / "accuracy_vs_round.png"
    _plot_accuracy_vs_round(cells, curves_path)
    outputs.append(curves_path)

    alphas = {row["alpha"] for row in table}
    if len(alphas) > 1:
        alpha_path = out_dir / "final_accuracy_vs_alpha.png"
        _plot_final_vs_alpha(table, alpha_path)
        outputs.append(alpha_path)

    trace_paths = [p for p in (Path(c).parent / "traces.csv" for c in csv_paths)
                   if p.exists()]
    if trace_paths:
        traces_path = out_dir / "mtt_traces.png"
        if _plot_traces(trace_paths, traces_path):
            outputs.append(traces_path)
    return outputs
