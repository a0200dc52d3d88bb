"""Depth and surface-normal error metrics.

Depth errors follow the standard protocol (abs rel, sq rel, RMSE, log
RMSE, and the 1.25^k inlier ratios); normal errors are per-pixel angles
in degrees with mean/median and sub-threshold fractions.  No median
scaling is applied by default: stereo supervision is metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask, NonPositiveDepth, NotUnit
from .grids import ImageGrid, NormalMap


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    FIELDS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2",
              "delta3")

    def as_tuple(self):
        return (self.abs_rel, self.sq_rel, self.rmse, self.rmse_log,
                self.delta1, self.delta2, self.delta3)


@dataclass(frozen=True)
class NormalMetrics:
    mean_deg: float
    median_deg: float
    pct_11_25: float
    pct_22_5: float
    pct_30: float

    FIELDS = ("mean_deg", "median_deg", "pct_11_25", "pct_22_5", "pct_30")

    def as_tuple(self):
        return (self.mean_deg, self.median_deg, self.pct_11_25,
                self.pct_22_5, self.pct_30)


@dataclass(frozen=True)
class EvalMask:
    """Pixels eligible for evaluation: ground truth exists, lies in
    (0, cap], and falls inside the crop rectangle."""

    mask: np.ndarray

    @property
    def count(self):
        return int(self.mask.sum())


def build_mask(gt_depth, cap=80.0, crop=(0.0, 0.0, 1.0, 1.0)) -> EvalMask:
    """Evaluation mask from a ground-truth depth map.

    ``crop`` is (x0, y0, x1, y1) in fractions of width/height; the default
    evaluates the full frame.
    """
    if cap <= 0.0:
        raise ValueError("depth cap must be positive")
    gt = _as_plane(gt_depth)
    x0, y0, x1, y1 = crop
    if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
        raise ValueError("crop fractions must satisfy 0 <= lo <= hi <= 1")
    height, width = gt.shape
    mask = (gt > 0.0) & (gt <= cap)
    cols = np.arange(width)
    rows = np.arange(height)
    in_x = (cols >= int(round(x0 * width))) & (cols < int(round(x1 * width)))
    in_y = (rows >= int(round(y0 * height))) & (rows < int(round(y1 * height)))
    mask &= in_x[None, :] & in_y[:, None]
    return EvalMask(mask)


def _as_plane(depth):
    if isinstance(depth, ImageGrid):
        return depth.plane
    depth = np.asarray(depth, dtype=float)
    if depth.ndim == 3:
        depth = depth[:, :, 0]
    return depth


def depth_metrics(pred, gt, mask: EvalMask, median_scale=False) -> DepthMetrics:
    """Standard depth error/accuracy metrics over the masked pixels.

    ``median_scale`` rescales predictions by median(gt)/median(pred) for
    comparison against scale-ambiguous monocular baselines; off by
    default because stereo-supervised depth is metric.
    """
    pred = _as_plane(pred)
    gt = _as_plane(gt)
    if mask.count == 0:
        raise EmptyMask("no pixels selected for depth evaluation")
    p = pred[mask.mask]
    g = gt[mask.mask]
    if np.any(p <= 0.0) or np.any(g <= 0.0):
        raise NonPositiveDepth("depth metrics need positive depths on mask")
    if median_scale:
        p = p * (np.median(g) / np.median(p))

    err = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err * err / g)),
        rmse=float(np.sqrt(np.mean(err * err))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


def angular_error_deg(pred: NormalMap, gt: NormalMap):
    """Per-pixel angle between two unit normal fields, in degrees."""
    dots = np.einsum("hwk,hwk->hw", pred.vectors, gt.vectors)
    return np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))


def normal_metrics(pred: NormalMap, gt: NormalMap, mask: EvalMask) -> NormalMetrics:
    """Angular error statistics over the masked pixels."""
    if mask.count == 0:
        raise EmptyMask("no pixels selected for normal evaluation")
    for name, field in (("pred", pred), ("gt", gt)):
        norms = np.linalg.norm(field.vectors[mask.mask], axis=-1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise NotUnit(f"{name} normals are not unit on the mask")
    angles = angular_error_deg(pred, gt)[mask.mask]
    return NormalMetrics(
        mean_deg=float(angles.mean()),
        median_deg=float(np.median(angles)),
        pct_11_25=float(np.mean(angles < 11.25)),
        pct_22_5=float(np.mean(angles < 22.5)),
        pct_30=float(np.mean(angles < 30.0)),
    )


def format_depth_row(m: DepthMetrics):
    head = " ".join(f"{f:>9}" for f in DepthMetrics.FIELDS)
    row = " ".join(f"{v:9.4f}" for v in m.as_tuple())
    return head + "\n" + row


def format_normal_row(m: NormalMetrics):
    head = " ".join(f"{f:>10}" for f in NormalMetrics.FIELDS)
    row = " ".join(f"{v:10.4f}" for v in m.as_tuple())
    return head + "\n" + row
