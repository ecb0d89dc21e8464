"""Sequence comparison metrics in raw scene units."""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .ik import chamfer_distance


def _check(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise UsageError(f"sequence shapes differ or are not (F, N, 3): {pred.shape} vs {gt.shape}")
    return pred, gt


def per_frame_rmse(pred, gt):
    """(F,) root mean squared vertex distance of every frame."""
    pred, gt = _check(pred, gt)
    return np.sqrt(np.mean(np.sum((pred - gt) ** 2, axis=-1), axis=-1))


def rmse(pred, gt):
    """Root mean squared vertex distance over all frames and vertices."""
    pred, gt = _check(pred, gt)
    return float(np.sqrt(np.mean(np.sum((pred - gt) ** 2, axis=-1))))


def mean_chamfer(pred, gt):
    """Per-frame Chamfer distance averaged over frames."""
    pred, gt = _check(pred, gt)
    return float(np.mean([chamfer_distance(a, b) for a, b in zip(pred, gt)]))


def evaluate(pred, gt, unit="unspecified"):
    """Metrics report as a plain dict. ``unit`` names the scene unit; values are never converted."""
    frames = per_frame_rmse(pred, gt)
    return {
        "unit": unit,
        "frame_count": int(len(frames)),
        "rmse": rmse(pred, gt),
        "chamfer": mean_chamfer(pred, gt),
        "per_frame_rmse": [float(v) for v in frames],
    }


def format_report(report):
    unit = report.get("unit", "unspecified")
    unit = "scene units, unit unspecified" if unit == "unspecified" else unit
    lines = [f"frames          {report['frame_count']}",
             f"rmse            {report['rmse']:.6g} ({unit})",
             f"chamfer         {report['chamfer']:.6g} (squared; {unit})",
             "per-frame rmse  min {:.6g}  max {:.6g}".format(min(report["per_frame_rmse"]),
                                                              max(report["per_frame_rmse"]))]
    return "\n".join(lines)
