"""Confusion matrices, IoU and report tables."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import IGNORE


def new_confusion(num_labels: int) -> np.ndarray:
    """(C+1) x (C+1) counts; rows are ground truth, columns predictions."""
    return np.zeros((num_labels, num_labels), dtype=np.int64)


def accumulate(cm: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    n = cm.shape[0]
    valid = gt != IGNORE
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    for name, arr, full in (("ground truth", g, gt), ("prediction", p, pred)):
        bad = (arr < 0) | (arr >= n)
        if bad.any():
            where = np.argwhere(valid & ((full.astype(np.int64) < 0) | (full.astype(np.int64) >= n)))[0]
            raise ValueError(f"{name} label {int(full[tuple(where)])} out of range [0, {n}) at pixel {tuple(int(v) for v in where)}")
    return cm + np.bincount(g * n + p, minlength=n * n).reshape(n, n)


def miou(cm: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean IoU over classes with a non-empty union; per-class IoU is NaN for the rest."""
    if cm.sum() == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(cm.shape[0], np.nan)
    nz = union > 0
    iou[nz] = tp[nz] / union[nz]
    return float(np.mean(iou[nz])), iou


def format_table(header: Sequence[str], rows: Iterable[Sequence], floatfmt: str = "{:.2f}") -> str:
    cells = [list(header)] + [[floatfmt.format(v) if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_tsv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    out = ["\t".join(header)]
    for r in rows:
        out.append("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))
    path.write_text("\n".join(out) + "\n")
    return path


def per_class_metrics(name: str, cm: np.ndarray, class_names: Sequence[str]) -> dict[str, float]:
    mean, iou = miou(cm)
    out = {f"{name}.miou": 100 * mean}
    for label, v in zip(["background", *class_names], iou):
        out[f"{name}.iou.{label}"] = float("nan") if np.isnan(v) else 100 * float(v)
    return out


def write_metrics(path: str | Path, metrics: Mapping[str, float]) -> Path:
    """Key-value metrics file (one ``key<TAB>value`` per line) plus a JSON twin."""
    path = Path(path)
    path.write_text("".join(f"{k}\t{v:.4f}\n" for k, v in metrics.items()))
    path.with_suffix(".json").write_text(json.dumps(dict(metrics), indent=2, sort_keys=True))
    return path


def read_metrics(path: str | Path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("\t")
            out[k] = float(v)
    return out
