"""Ablation report: delimited results table plus a grouped-bar figure.

The figure mirrors the experiment readout: per combo one striped validation
bar (cross-validation mean, population-SD error bar) and one dotted test bar
(majority-vote score). Rendering is headless and byte-deterministic: fixed
SVG hash salt, no timestamp metadata. Every bar and error bar carries an SVG
group id (``bar-val-N``, ``bar-test-N``, ``errbar-N``) so reports are
machine-checkable.
"""

from __future__ import annotations

import csv
import os
from typing import Optional

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

import numpy as np

from .ablation import ExperimentResult

# Published reference scores for the clinical study this pipeline mirrors
# (validation macro F1 per combo; test value is the ensemble score, which the
# source reports without naming its combo - treated here as the all-input
# ensemble and marked as such in the legend).
REFERENCE_VAL_F1 = {1: 0.70, 2: 0.58, 3: 0.78, 4: None, 5: 0.828, 6: 0.83, 7: 0.804}
REFERENCE_TEST_F1 = {7: 0.916}

CSV_COLUMNS = ["combo_index", "combo", "fold_0", "fold_1", "fold_2", "fold_3", "fold_4",
               "val_mean", "val_sd", "test_macro_f1"]


def write_results_csv(results: list[ExperimentResult], path: str | os.PathLike,
                      paper_reference: bool = False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in results:
            # repr round-trips float64 exactly: mean/sd stay recomputable
            # from the fold columns without precision loss
            writer.writerow([r.combo_index, r.combo_name]
                            + [repr(float(v)) for v in r.fold_val_f1]
                            + [repr(float(r.val_mean)), repr(float(r.val_sd)),
                               repr(float(r.test_f1_vote))])
        if paper_reference:
            for r in results:
                ref_val = REFERENCE_VAL_F1.get(r.combo_index)
                ref_test = REFERENCE_TEST_F1.get(r.combo_index)
                writer.writerow([r.combo_index, f"ref:{r.combo_name}", "", "", "", "", "",
                                 "" if ref_val is None else f"{ref_val:.3f}", "",
                                 "" if ref_test is None else f"{ref_test:.3f}"])


def render_figure(results: list[ExperimentResult], path: str | os.PathLike,
                  paper_reference: bool = False) -> None:
    plt.rcParams["svg.hashsalt"] = "ricekit-report"
    fig, ax = plt.subplots(figsize=(max(6.0, 1.6 * len(results)), 4.5))
    width = 0.38
    xs = np.arange(len(results), dtype=float)
    for i, r in enumerate(results):
        bar_val = ax.bar(xs[i] - width / 2, r.val_mean, width, color="#4878a8",
                         edgecolor="black", hatch="//")
        bar_val[0].set_gid(f"bar-val-{r.combo_index}")
        err = ax.errorbar(xs[i] - width / 2, r.val_mean, yerr=r.val_sd, fmt="none",
                          ecolor="black", capsize=4)
        for part in err[2]:
            part.set_gid(f"errbar-{r.combo_index}")
        bar_test = ax.bar(xs[i] + width / 2, r.test_f1_vote, width, color="#d9822b",
                          edgecolor="black", hatch="..")
        bar_test[0].set_gid(f"bar-test-{r.combo_index}")
    if paper_reference:
        for i, r in enumerate(results):
            ref_val = REFERENCE_VAL_F1.get(r.combo_index)
            if ref_val is not None:
                ax.plot([xs[i] - width], [ref_val], marker="_", markersize=14,
                        color="#2a2a2a", linestyle="none")
            ref_test = REFERENCE_TEST_F1.get(r.combo_index)
            if ref_test is not None:
                ax.plot([xs[i] + width], [ref_test], marker="_", markersize=14,
                        color="#8b0000", linestyle="none")
    ax.set_xticks(xs)
    ax.set_xticklabels([r.combo_name for r in results], rotation=20, ha="right")
    ax.set_ylabel("macro F1")
    ax.set_ylim(0.0, 1.05)
    ax.yaxis.grid(True, linestyle=":", alpha=0.6)
    ax.set_axisbelow(True)
    handles = [
        plt.Rectangle((0, 0), 1, 1, facecolor="#4878a8", edgecolor="black", hatch="//"),
        plt.Rectangle((0, 0), 1, 1, facecolor="#d9822b", edgecolor="black", hatch=".."),
    ]
    labels = ["validation (CV mean ± SD)", "test (majority vote)"]
    if paper_reference:
        handles.append(plt.Line2D([], [], marker="_", markersize=12, color="#2a2a2a",
                                  linestyle="none"))
        labels.append("published reference (test ref: all-input ensemble)")
    ax.legend(handles, labels, loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(results: list[ExperimentResult], csv_path: str | os.PathLike,
                svg_path: str | os.PathLike, paper_reference: bool = False
                ) -> tuple[str, str]:
    """Write the delimited table and the figure; returns both paths."""
    if not results:
        raise ValueError("need at least one experiment result")
    ordered = sorted(results, key=lambda r: r.combo_index)
    write_results_csv(ordered, csv_path, paper_reference=paper_reference)
    render_figure(ordered, svg_path, paper_reference=paper_reference)
    return str(csv_path), str(svg_path)
