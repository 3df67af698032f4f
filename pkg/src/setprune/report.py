"""Plot-ready tables and figures from selection and benchmark outputs.

The select and bench commands write long-format CSV summaries; this module
merges those files, re-emits them as single tables, and renders the two
standard figures (accuracy against removals, accuracy against time).
Rendering uses the Agg backend so it works headless, and figure metadata is
pinned so identical inputs produce identical PNG bytes.
"""

import csv
import os

import numpy as np

from .errors import DataError, FormatError

ACCURACY_COLUMNS = (
    "strategy",
    "removed",
    "accuracy",
    "mean_ms_cum",
    "mean_forwards_cum",
    "mean_backwards_cum",
)

TRADEOFF_COLUMNS = (
    "strategy",
    "k",
    "n_samples",
    "reps",
    "accuracy",
    "ms_per_sample",
    "forwards_per_sample",
    "backwards_per_sample",
)

_INT_FIELDS = {"removed", "k", "n_samples", "reps"}


def _typed(row, columns):
    out = {}
    for col in columns:
        raw = row[col]
        if col == "strategy":
            out[col] = raw
        elif col in _INT_FIELDS:
            out[col] = int(raw)
        else:
            out[col] = float(raw)
    return out


def read_rows(path, columns):
    """Read one long-format CSV, checking its header against `columns`."""
    if not os.path.isfile(path):
        raise DataError(f"no such table: {path}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        header = tuple(reader.fieldnames or ())
        if header != tuple(columns):
            raise FormatError(
                f"{path}: expected columns {','.join(columns)}, got "
                f"{','.join(header)}"
            )
        try:
            return [_typed(row, columns) for row in reader]
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed row ({exc})") from None


def merge_tables(paths, columns):
    """Concatenate several long-format CSVs that share one schema.

    Row order follows the input path order, so merging is deterministic.
    """
    rows = []
    for path in paths:
        rows.extend(read_rows(path, columns))
    if not rows:
        raise DataError("no rows found in any input table")
    return rows


def write_rows(path, rows, columns):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({col: row[col] for col in columns})


def _pyplot():
    # Backend must be forced before pyplot is first imported; Agg keeps the
    # render path identical with or without a display.
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


_PNG_METADATA = {"Software": "setprune"}


def _strategies(rows):
    seen = []
    for row in rows:
        if row["strategy"] not in seen:
            seen.append(row["strategy"])
    return seen


def render_accuracy_curve(rows, path):
    """Line chart of post-attack accuracy against number of removals."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for strategy in _strategies(rows):
        sub = sorted(
            (r for r in rows if r["strategy"] == strategy),
            key=lambda r: r["removed"],
        )
        ax.plot(
            [r["removed"] for r in sub],
            [r["accuracy"] for r in sub],
            marker="o",
            markersize=3.5,
            linewidth=1.4,
            label=strategy,
        )
    ax.set_xlabel("points removed")
    ax.set_ylabel("accuracy on pruned sets")
    ax.set_ylim(-0.03, 1.03)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def render_tradeoff(rows, path):
    """Scatter of post-attack accuracy against per-sample wall time."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for row in rows:
        ax.scatter([row["ms_per_sample"]], [row["accuracy"]], s=28, zorder=3)
        ax.annotate(
            row["strategy"],
            (row["ms_per_sample"], row["accuracy"]),
            textcoords="offset points",
            xytext=(5, 4),
            fontsize=8,
        )
    ax.set_xscale("log")
    ax.set_xlabel("selection time per sample (ms)")
    ax.set_ylabel("accuracy on pruned sets")
    ax.set_ylim(-0.03, 1.03)
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def emit(outdir, select_summaries=(), bench_tables=()):
    """Merge summaries into plot-ready tables and render their figures.

    Returns the list of files written (paths relative to `outdir`).
    """
    if not select_summaries and not bench_tables:
        raise DataError("nothing to report: no select summaries or bench tables")
    os.makedirs(outdir, exist_ok=True)
    written = []
    if select_summaries:
        rows = merge_tables(select_summaries, ACCURACY_COLUMNS)
        write_rows(os.path.join(outdir, "accuracy_vs_k.csv"), rows, ACCURACY_COLUMNS)
        render_accuracy_curve(rows, os.path.join(outdir, "accuracy_vs_k.png"))
        written += ["accuracy_vs_k.csv", "accuracy_vs_k.png"]
    if bench_tables:
        rows = merge_tables(bench_tables, TRADEOFF_COLUMNS)
        write_rows(os.path.join(outdir, "tradeoff.csv"), rows, TRADEOFF_COLUMNS)
        render_tradeoff(rows, os.path.join(outdir, "tradeoff.png"))
        written += ["tradeoff.csv", "tradeoff.png"]
    return written
