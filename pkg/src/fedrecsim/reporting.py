"""Artifact writing: JSON reports, delimited tables, and rendered figures.

All JSON/CSV artifacts are byte-deterministic for a fixed experiment
(sorted keys, exact float repr, no timestamps). Figures are rendered
alongside the delimited output and are presentational only.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402

from .serialize import canonical_json, fmt_float  # noqa: E402


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    return path


def write_jsonl(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        for row in rows:
            fh.write(canonical_json(row) + b"\n")
    return path


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_metrics_csv(path, reports) -> Path:
    """system,metric,k,value rows for every report."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["system", "metric", "k", "value"])
        for rep in reports:
            for k in rep.k_values:
                w.writerow([rep.system_label, "precision", k, fmt_float(rep.precision[k])])
                w.writerow([rep.system_label, "recall", k, fmt_float(rep.recall[k])])
                w.writerow([rep.system_label, "ndcg", k, fmt_float(rep.ndcg[k])])
            w.writerow([rep.system_label, "log_loss", "", fmt_float(rep.log_loss)])
    return path


def write_rounds_csv(path, round_dicts) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["round", "participants", "void", "messages", "bytes_up", "bytes_down",
             "theta_l2", "theta_linf", "audit_passed", "audit_total"]
        )
        for rd in round_dicts:
            verdicts = rd.get("audit", [])
            w.writerow(
                [
                    rd["round_index"],
                    len(rd["participants"]),
                    int(rd["void"]),
                    rd["n_messages"],
                    rd["bytes_up"],
                    rd["bytes_down"],
                    fmt_float(rd["theta_l2"]),
                    fmt_float(rd["theta_linf"]),
                    sum(1 for v in verdicts if v["passed"]),
                    len(verdicts),
                ]
            )
    return path


# -- figures -------------------------------------------------------------------


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_round_convergence(round_dicts, path) -> Path:
    rounds = [rd["round_index"] for rd in round_dicts]
    l2 = [rd["theta_l2"] for rd in round_dicts]
    thetas = [np.asarray(rd["theta"]) for rd in round_dicts]
    deltas = [np.nan]
    for prev, cur in zip(thetas, thetas[1:]):
        deltas.append(float(np.max(np.abs(cur - prev))))

    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(rounds, l2, marker="o", color="tab:blue", label="global params L2 norm")
    ax1.set_xlabel("round")
    ax1.set_ylabel("L2 norm", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(rounds, deltas, marker="s", color="tab:red", label="round-to-round max change")
    ax2.set_yscale("log")
    ax2.set_ylabel("max |change| (log)", color="tab:red")
    ax1.set_title("Global ranking parameters per round")
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_communication(round_dicts, path) -> Path:
    rounds = [rd["round_index"] for rd in round_dicts]
    up = [rd["bytes_up"] for rd in round_dicts]
    down = [rd["bytes_down"] for rd in round_dicts]
    x = np.arange(len(rounds))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(x - 0.2, down, width=0.4, label="server -> clients", color="tab:blue")
    ax.bar(x + 0.2, up, width=0.4, label="clients -> server", color="tab:orange")
    ax.set_xticks(x)
    ax.set_xticklabels(rounds)
    ax.set_xlabel("round")
    ax.set_ylabel("bytes")
    ax.set_title("Per-round message volume")
    ax.legend()
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_metric_comparison(reports, primary_k: int, delta_threshold: float, path) -> Path:
    labels = [rep.system_label for rep in reports]
    k_values = reports[0].k_values
    x = np.arange(len(labels))
    width = 0.8 / len(k_values)
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, k in enumerate(k_values):
        vals = [rep.ndcg[k] for rep in reports]
        ax.bar(x + (i - (len(k_values) - 1) / 2) * width, vals, width=width,
               label=f"NDCG@{k}")
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylabel("NDCG")
    ax.set_ylim(0, 1)
    ax.set_title(f"Ranking quality by system (threshold band = {delta_threshold})")
    by_label = {rep.system_label: rep for rep in reports}
    if "Sum" in by_label:
        ref = by_label["Sum"].ndcg[primary_k]
        ax.axhspan(ref - delta_threshold, ref + delta_threshold, color="tab:green",
                   alpha=0.12, label="allowed gap around Sum")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(path))


def render_figures(outdir, round_dicts, reports, primary_k, delta_threshold) -> list[Path]:
    outdir = Path(outdir)
    paths = []
    if round_dicts:
        paths.append(plot_round_convergence(round_dicts, outdir / "round_convergence.png"))
        paths.append(plot_communication(round_dicts, outdir / "communication_bytes.png"))
    if reports:
        paths.append(
            plot_metric_comparison(
                reports, primary_k, delta_threshold, outdir / "metric_comparison.png"
            )
        )
    return paths
