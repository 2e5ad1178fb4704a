"""Reporting over results files: the per-session comparison table
(median over seeds, with the all-session average and the performance
drop), curve data as CSV, and rendered accuracy-curve figures saved
next to the delimited output.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from .errors import DataFormatError
from .protocol import metric_avg, metric_pd, read_results_csv


def _sibling_summary_dim(results_path) -> int | None:
    summary_path = os.path.join(os.path.dirname(os.path.abspath(results_path)), "summary.json")
    if not os.path.exists(summary_path):
        return None
    try:
        with open(summary_path, encoding="utf-8") as fh:
            summary = json.load(fh)
        return int(summary["benchmark"]["dim"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError):
        return None


def load_results(paths) -> list[dict]:
    """Read and concatenate results files, refusing inputs whose sibling
    summaries disagree on the feature dimension."""
    if not paths:
        raise ValueError("need at least one results file")
    dims: dict[str, int] = {}
    rows: list[dict] = []
    for path in paths:
        rows.extend(read_results_csv(path))
        dim = _sibling_summary_dim(path)
        if dim is not None:
            dims[str(path)] = dim
    if len(set(dims.values())) > 1:
        detail = ", ".join(f"{p} (dim {d})" for p, d in sorted(dims.items()))
        raise DataFormatError(f"results files come from different feature dimensions: {detail}")
    return rows


def median_curves(rows: list[dict]) -> dict[tuple[str, int], dict]:
    """Per (method, K): the median-over-seeds accuracy per session, the
    seed count, and Avg/PD of the median curve."""
    grouped: dict[tuple[str, int], dict[int, dict[int, float]]] = {}
    for r in rows:
        key = (r["method"], r["K"])
        grouped.setdefault(key, {}).setdefault(r["seed"], {})[r["session"]] = r["accuracy"]
    out: dict[tuple[str, int], dict] = {}
    for key in sorted(grouped):
        per_seed = grouped[key]
        session_sets = {tuple(sorted(c)) for c in per_seed.values()}
        if len(session_sets) != 1:
            raise DataFormatError(
                f"method {key[0]} K={key[1]}: seeds disagree on the session list"
            )
        sessions = sorted(next(iter(session_sets)))
        medians = [
            float(np.median([per_seed[s][t] for s in sorted(per_seed)])) for t in sessions
        ]
        out[key] = {
            "sessions": sessions,
            "median_accuracy": medians,
            "n_seeds": len(per_seed),
            "avg": metric_avg(medians),
            "pd": metric_pd(medians),
        }
    return out


def render_table(curves: dict[tuple[str, int], dict]) -> str:
    """Fixed-width comparison table, accuracies to two decimals."""
    if not curves:
        return "(no results)\n"
    all_sessions = sorted({t for c in curves.values() for t in c["sessions"]})
    headers = ["method", "K", "seeds"] + [str(t) for t in all_sessions] + ["Avg", "PD"]
    rows = []
    for (method, k), c in curves.items():
        by_session = dict(zip(c["sessions"], c["median_accuracy"]))
        cells = [method, str(k), str(c["n_seeds"])]
        cells += [
            f"{by_session[t]:.2f}" if t in by_session else "-" for t in all_sessions
        ]
        cells += [f"{c['avg']:.2f}", f"{c['pd']:.2f}"]
        rows.append(cells)
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(len(headers))
    ]
    lines = [
        "  ".join(h.rjust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for r in rows:
        lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def write_curves_csv(path, curves: dict[tuple[str, int], dict]) -> None:
    """Session-by-session median accuracy per (method, K), for external
    plotting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "K", "session", "median_accuracy"])
        for (method, k), c in curves.items():
            for t, acc in zip(c["sessions"], c["median_accuracy"]):
                writer.writerow([method, k, t, f"{acc:.6f}"])


def render_figures(curves: dict[tuple[str, int], dict], out_dir) -> list[str]:
    """One accuracy-per-session figure per K, a line per method, written
    as PNG files. Returns the paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    by_k: dict[int, list[tuple[str, dict]]] = {}
    for (method, k), c in curves.items():
        by_k.setdefault(k, []).append((method, c))
    paths = []
    for k in sorted(by_k):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for method, c in by_k[k]:
            ax.plot(c["sessions"], c["median_accuracy"], marker="o", label=method)
        ax.set_xlabel("session")
        ax.set_ylabel("accuracy (%)")
        ax.set_title(f"cumulative test accuracy per session (K={k})")
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, f"accuracy_K{k}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def render_histogram_figure(edges, counts, title: str, path) -> str:
    """Bar rendering of a dimension histogram, written as PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    widths = np.diff(edges)
    ax.bar(edges[:-1], counts, width=widths, align="edge", edgecolor="black", alpha=0.75)
    ax.set_xlabel("feature value")
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
