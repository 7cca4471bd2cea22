"""CSV tables, ROC plots and diagnosis overlays. Every file is written atomically."""

from __future__ import annotations

import csv
import io
import math
import os
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import ndimage  # noqa: E402

from .autodiff.serialize import atomic_write_bytes  # noqa: E402
from .metrics import RocCurve  # noqa: E402
from .superpixels import PatchSpec  # noqa: E402

FLOAT_FORMAT = "{:.6f}"


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return FLOAT_FORMAT.format(v)
    return str(value)


def csv_bytes(header: Sequence[str], rows: Iterable[Sequence]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue().encode("utf-8")


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write_bytes(path, csv_bytes(header, rows))


def write_dict_rows(path, rows: Sequence[Mapping], header: Sequence[str] | None = None) -> None:
    header = list(header or (rows[0].keys() if rows else []))
    write_csv(path, header, ([r.get(h, "") for h in header] for r in rows))


def with_mean_row(rows: Sequence[Mapping], key: str, label: str = "mean") -> list[dict]:
    """Append a row averaging every numeric column; ``key`` column gets ``label``."""
    out = [dict(r) for r in rows]
    if not rows:
        return out
    mean = {key: label}
    for col in rows[0]:
        if col == key:
            continue
        values = [r[col] for r in rows]
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)
               for v in values):
            mean[col] = float(np.mean(np.asarray(values, dtype=np.float64)))
        else:
            mean[col] = ""
    out.append(mean)
    return out


def roc_rows(rocs: Mapping[int, RocCurve]) -> list[tuple]:
    rows = []
    for k in sorted(rocs):
        for thr, tpr, fpr in rocs[k].points():
            rows.append((k, thr, tpr, fpr))
    return rows


def _save_figure(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_roc(path, rocs: Mapping[int, RocCurve], title: str = "") -> None:
    """FPR/TPR axes, one curve per K with its AUC in the legend."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for k in sorted(rocs):
        r = rocs[k]
        ax.plot(r.fpr, r.tpr, label=f"K={k} (AUC {r.auc:.3f})", linewidth=1.5)
    ax.plot([0, 1], [0, 1], color="0.7", linestyle="--", linewidth=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save_figure(fig, path)


def _draw_box(canvas: np.ndarray, window, color, width: int = 2) -> None:
    left, top, w, h = window
    H, W = canvas.shape[:2]
    r0, r1 = max(top, 0), min(top + h, H)
    c0, c1 = max(left, 0), min(left + w, W)
    canvas[r0:min(r0 + width, r1), c0:c1] = color
    canvas[max(r1 - width, r0):r1, c0:c1] = color
    canvas[r0:r1, c0:min(c0 + width, c1)] = color
    canvas[r0:r1, max(c1 - width, c0):c1] = color


def overlay(image: np.ndarray, sc_mask: np.ndarray, patches: Sequence[PatchSpec],
            probabilities: Sequence[float], cutoff: float) -> np.ndarray:
    """SC boundary in green, positive patch windows in red, patch centres as dots."""
    canvas = np.array(image, dtype=np.uint8, copy=True)
    mask = np.asarray(sc_mask).astype(bool)
    boundary = mask & ~ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool), border_value=0)
    boundary = ndimage.binary_dilation(boundary, iterations=1)
    canvas[boundary] = (0, 200, 0)
    for spec, prob in zip(patches, probabilities):
        x, y = spec.center
        canvas[max(y - 2, 0):y + 3, max(x - 2, 0):x + 3] = (255, 200, 0)
        if prob >= cutoff:
            _draw_box(canvas, spec.window, (220, 0, 0))
    return canvas


def ensure_out_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def write_crossval_report(out_dir, results, plots: bool = True) -> list[str]:
    """Write every cross-validation table; returns the file names written."""
    ensure_out_dir(out_dir)
    written = []

    def put(name, rows, header=None):
        write_dict_rows(os.path.join(out_dir, name), rows, header)
        written.append(name)

    patch_rows = []
    for r in results:
        m = r.patch_metrics
        patch_rows.append({"fold": r.fold, "K": r.selected_k, "cutoff": r.cutoff,
                           "patches": m["patches"], "positives": m["positives"],
                           "precision": m["precision"], "recall": m["recall"], "f1": m["f1"],
                           "accuracy": m["accuracy"], "auc": m["auc"]})
    put("patch_metrics.csv", with_mean_row(patch_rows, "fold"))

    seg_rows = [{"fold": r.fold, **r.seg_metrics} for r in results]
    put("seg_metrics.csv", with_mean_row(seg_rows, "fold"))

    summary = []
    superpixels = sorted(results[0].wsi_metrics) if results else []
    for n_sp in superpixels:
        rows = [{"fold": r.fold, "superpixels": n_sp, **r.wsi_metrics[n_sp]} for r in results]
        table = with_mean_row(rows, "fold")
        put(f"wsi_metrics_sp{n_sp}.csv", table)
        mean = dict(table[-1])
        mean.pop("fold")
        mean["superpixels"] = n_sp
        summary.append(mean)
        diag_rows = []
        for r in results:
            for d in r.diagnoses.get(n_sp, []):
                diag_rows.append({"fold": r.fold, "id": d.image_id, "count": d.positive_patch_count,
                                  "patches": len(d.patches), "T": d.threshold,
                                  "decision": d.decision, "empty_sc": d.empty_sc})
        put(f"diagnoses_sp{n_sp}.csv", diag_rows,
            ["fold", "id", "count", "patches", "T", "decision", "empty_sc"])
    put("wsi_summary.csv", summary)

    for r in results:
        name = f"roc_fold{r.fold}.csv"
        write_csv(os.path.join(out_dir, name), ["K", "threshold", "tpr", "fpr"], roc_rows(r.rocs))
        written.append(name)
        if plots:
            png = f"roc_fold{r.fold}.png"
            plot_roc(os.path.join(out_dir, png), r.rocs, f"Fold {r.fold} validation ROC")
            written.append(png)
        put(f"seg_history_fold{r.fold}.csv", r.seg_history)
        for k, hist in sorted(r.caps_histories.items()):
            put(f"caps_history_fold{r.fold}_K{k}.csv", hist)
    return written
