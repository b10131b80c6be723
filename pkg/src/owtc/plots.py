"""Static SVG figures for a finished run: score distributions, BIC curve, confusion grids.

Rendering is deterministic: fixed SVG hash salt and no creation date, so the
same report always produces the same bytes.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

log = logging.getLogger(__name__)

SVG_METADATA = {"Date": None, "Creator": "owtc"}


def _save(fig, path: Path) -> None:
    with matplotlib.rc_context({"svg.hashsalt": "owtc", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


def empirical_cdf(values) -> tuple[np.ndarray, np.ndarray]:
    x = np.sort(np.asarray(values, dtype=np.float64))
    return x, np.arange(1, len(x) + 1) / len(x)


def plot_scores(known, unknown, path) -> Path:
    """pdf and CDF of the confidence scores of known versus unknown packets."""
    path = Path(path)
    fig, (ax_pdf, ax_cdf) = plt.subplots(1, 2, figsize=(9, 3.5))
    bins = np.linspace(0.0, 1.0, 41)
    series = [("known", known, "tab:blue"), ("unknown", unknown, "tab:red")]
    for name, values, color in series:
        if values is None or len(values) == 0:
            continue
        ax_pdf.hist(values, bins=bins, density=True, histtype="step", color=color, label=name)
        x, y = empirical_cdf(values)
        ax_cdf.step(x, y, where="post", color=color, label=name)
    ax_pdf.set_xlabel("confidence score")
    ax_pdf.set_ylabel("density")
    ax_cdf.set_xlabel("confidence score")
    ax_cdf.set_ylabel("CDF")
    ax_cdf.set_xlim(0, 1.01)
    ax_cdf.legend(loc="upper left")
    fig.tight_layout()
    _save(fig, path)
    return path


def plot_bic(bic_table: list, chosen_k: int, path) -> Path:
    path = Path(path)
    ks = [row["k"] for row in bic_table]
    values = [row["bic"] for row in bic_table]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ks, values, marker="o", color="tab:blue")
    ax.axvline(chosen_k, color="tab:gray", linestyle="--", label=f"chosen K = {chosen_k}")
    ax.set_xlabel("k")
    ax.set_ylabel("BIC")
    ax.set_xticks(ks)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    return path


def plot_confusion(counts, class_names: Optional[list], path, title: str = "") -> Path:
    """Heat grid of a confusion matrix with per-class recall and precision in the labels."""
    path = Path(path)
    counts = np.asarray(counts, dtype=np.int64)
    m = len(counts)
    names = class_names or [str(i) for i in range(m)]
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    recall = np.divide(np.diag(counts), rows, out=np.zeros(m), where=rows > 0)
    precision = np.divide(np.diag(counts), cols, out=np.zeros(m), where=cols > 0)
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * m, 1.0 + 0.7 * m))
    ax.imshow(counts, cmap="Blues")
    top = counts.max() if counts.size else 0
    for i in range(m):
        for j in range(m):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center", fontsize=8,
                    color="white" if top and counts[i, j] > top / 2 else "black")
    ax.set_xticks(range(m), [f"{n}\nP={p:.2f}" for n, p in zip(names, precision)], fontsize=7, rotation=45)
    ax.set_yticks(range(m), [f"{n} R={r:.2f}" for n, r in zip(names, recall)], fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("truth")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    return path


def emit_plots(report: dict, run_dir, out_dir=None) -> dict:
    """Write every figure the run supports; returns {"files": [...], "notes": [...]}."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)
    files, notes = [], []

    scores_path = run_dir / "scores.json"
    if scores_path.exists():
        scores = json.loads(scores_path.read_text())
        files.append(plot_scores(scores["known"], scores.get("unknown"), out / "scores.svg").name)
    else:
        notes.append("scores.json missing; score distribution plot omitted")

    clustering = report.get("clustering")
    if clustering:
        files.append(plot_bic(clustering["bic_table"], clustering["chosen_k"], out / "bic.svg").name)
    else:
        notes.append("no discovered packets; BIC plot omitted")

    for key, matrix in sorted((report.get("confusion") or {}).items()):
        if isinstance(matrix, dict) and "counts" in matrix:
            name = f"confusion_{key}.svg"
            plot_confusion(matrix["counts"], matrix.get("class_names"), out / name, title=key)
            files.append(name)
    for note in notes:
        log.info(note)
    return {"files": files, "notes": notes}
