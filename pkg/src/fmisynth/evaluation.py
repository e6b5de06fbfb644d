"""PSNR / SSIM over the brain and the tumor bounding box, plus reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from pathlib import Path
from typing import Iterable, Union

import numpy as np
from scipy import ndimage

from .prep import dilate
from .volgrid import BinaryMask, Volume, bbox_of_mask

__all__ = [
    "MetricsReport",
    "MetricsRow",
    "PSNR_IDENTICAL",
    "aggregate",
    "aggregate_and_emit",
    "evaluate_case",
    "psnr",
    "read_rows",
    "ssim",
    "ssim_map",
    "tumor_bbox_region",
]

#: PSNR returned for identical images (zero error).
PSNR_IDENTICAL = math.inf

DATA_RANGE = 1.0
SSIM_SIDE = 7
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
TUMOR_DILATION = 3
TUMOR_MARGIN = 2
REGIONS = ("brain", "tumor_bbox")
METRICS = ("psnr_db", "ssim")


def _check(pred: Volume, truth: Volume, mask: BinaryMask) -> np.ndarray:
    if pred.shape != truth.shape or pred.shape != mask.shape:
        raise ValueError(f"metric inputs on different grids: {pred.shape}, {truth.shape}, {mask.shape}")
    m = np.asarray(mask.data)
    if not m.any():
        raise ValueError("metric mask is empty")
    return m


def psnr(pred: Volume, truth: Volume, mask: BinaryMask) -> float:
    """``10 log10(R^2 / MSE)`` over the mask with ``R = 1``; ``inf`` when equal."""
    m = _check(pred, truth, mask)
    d = pred.data[m] - truth.data[m]
    mse = float(np.mean(d * d))
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(DATA_RANGE**2 / mse)


def _window() -> np.ndarray:
    r = SSIM_SIDE // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _local_mean(a: np.ndarray) -> np.ndarray:
    k = _window()
    for axis in range(a.ndim):
        a = ndimage.correlate1d(a, k, axis=axis, mode="reflect")
    return a


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Local SSIM with a separable 7-tap Gaussian window (sigma 1.5).

    Window statistics are weighted population moments; borders are
    half-sample reflected.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c1, c2 = (K1 * DATA_RANGE) ** 2, (K2 * DATA_RANGE) ** 2
    mx, my = _local_mean(x), _local_mean(y)
    vx = _local_mean(x * x) - mx * mx
    vy = _local_mean(y * y) - my * my
    cxy = _local_mean(x * y) - mx * my
    num = (2 * (mx * my) + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def ssim(pred: Volume, truth: Volume, mask: BinaryMask) -> float:
    """Mean local SSIM over the voxels of ``mask``."""
    m = _check(pred, truth, mask)
    if np.array_equal(pred.data, truth.data):
        return 1.0
    return float(np.clip(ssim_map(pred.data, truth.data)[m].mean(), -1.0, 1.0))


@dataclasses.dataclass(frozen=True)
class MetricsRow:
    case_id: str
    region: str
    psnr_db: float
    ssim: float


def tumor_bbox_region(tumor_mask: BinaryMask, brain_mask: BinaryMask) -> BinaryMask:
    """Bounding box of the dilated tumor (plus margin), restricted to the brain."""
    box = bbox_of_mask(dilate(tumor_mask, TUMOR_DILATION), TUMOR_MARGIN)
    inside = np.zeros(tumor_mask.shape, bool)
    inside[box.slices] = True
    return brain_mask.with_data(inside & np.asarray(brain_mask.data))


def evaluate_case(pred: Volume, truth: Volume, brain_mask: BinaryMask, tumor_mask: BinaryMask, case_id: str = "") -> list:
    """Brain row, plus a tumor-box row when the tumor mask is non-empty."""
    if not brain_mask.data.any():
        raise ValueError("brain mask is empty")
    rows = [MetricsRow(case_id, "brain", psnr(pred, truth, brain_mask), ssim(pred, truth, brain_mask))]
    if tumor_mask.data.any():
        region = tumor_bbox_region(tumor_mask, brain_mask)
        rows.append(MetricsRow(case_id, "tumor_bbox", psnr(pred, truth, region), ssim(pred, truth, region)))
    return rows


@dataclasses.dataclass(frozen=True)
class MetricsReport:
    rows: tuple
    aggregates: dict


def aggregate(rows: Iterable[MetricsRow], model_tag: str) -> dict:
    """Mean / population std per region and metric; infinite values are counted aside."""
    rows = list(rows)
    out = {}
    for region in REGIONS:
        sel = [r for r in rows if r.region == region]
        if not sel:
            continue
        for metric in METRICS:
            vals = np.array([getattr(r, metric) for r in sel], dtype=np.float64)
            finite = vals[np.isfinite(vals)]
            key = f"{model_tag}.{region}.{metric}"
            out[f"{key}.mean"] = float(finite.mean()) if finite.size else None
            out[f"{key}.std"] = float(finite.std()) if finite.size else None
            out[f"{key}.n"] = int(finite.size)
            out[f"{key}.n_inf"] = int(vals.size - finite.size)
    return out


def read_rows(path: Union[str, os.PathLike]) -> list:
    with open(path, newline="") as f:
        return [MetricsRow(r["case_id"], r["region"], float(r["psnr_db"]), float(r["ssim"])) for r in csv.DictReader(f)]


def aggregate_and_emit(rows: Iterable[MetricsRow], model_tag: str, out: Union[str, os.PathLike]) -> MetricsReport:
    """Write ``metrics.csv`` (one row per case and region) and ``metrics.json`` into ``out``."""
    rows = tuple(rows)
    if not rows:
        raise ValueError("no metric rows to aggregate")
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["case_id", "region", "psnr_db", "ssim"])
        for r in rows:
            w.writerow([r.case_id, r.region, repr(float(r.psnr_db)), repr(float(r.ssim))])
    agg = aggregate(rows, model_tag)
    (root / "metrics.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    return MetricsReport(rows, agg)
