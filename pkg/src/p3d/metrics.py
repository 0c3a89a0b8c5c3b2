"""Dense-prediction quality metrics.

Depth maps are scored by threshold recalls (the fraction of pixels whose
symmetric prediction/truth ratio stays under 1.25^i) and RMSE; surface
normals by angular-error recalls at 11.25/22.5/30 degrees and angular RMSE.
Object-centric depth can be normalized to [0, 1] before scoring so that
scale-free predictions remain comparable.

Conventions fixed here:

* Threshold comparisons are strict (<) and therefore deterministic.
* Both depths are clamped to >= 1e-6 before forming ratios, so probe
  underflow or an exactly-zero normalized ground-truth endpoint cannot
  produce infinities; RMSE uses the raw values.
* All means run over the valid mask only; an empty mask is an error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateInputError, ShapeError

__all__ = [
    "DepthMetrics",
    "NormalMetrics",
    "depth_metrics",
    "normal_metrics",
    "normalize_object_depth",
    "DEPTH_RATIO_BASE",
    "NORMAL_THRESHOLDS_DEG",
    "RATIO_CLAMP",
]

DEPTH_RATIO_BASE = 1.25
NORMAL_THRESHOLDS_DEG = (11.25, 22.5, 30.0)
RATIO_CLAMP = 1e-6


@dataclass(frozen=True)
class DepthMetrics:
    """Depth recall percentages at ratio thresholds 1.25^1..3, plus RMSE in
    the depth map's own units."""

    delta1: float
    delta2: float
    delta3: float
    rmse: float

    def as_dict(self) -> dict[str, float]:
        return {
            "delta1": self.delta1,
            "delta2": self.delta2,
            "delta3": self.delta3,
            "rmse": self.rmse,
        }


@dataclass(frozen=True)
class NormalMetrics:
    """Angular recall percentages at 11.25/22.5/30 degrees, plus RMSE in
    degrees."""

    recall_11: float
    recall_22: float
    recall_30: float
    rmse_deg: float

    def as_dict(self) -> dict[str, float]:
        return {
            "recall_11.25": self.recall_11,
            "recall_22.5": self.recall_22,
            "recall_30": self.recall_30,
            "rmse_deg": self.rmse_deg,
        }


def _checked_mask(mask: np.ndarray, shape: tuple[int, int], what: str) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if mask.shape != shape:
        raise ShapeError(f"{what} mask shape {mask.shape} does not match map {shape}")
    if not mask.any():
        raise DegenerateInputError(f"{what}: no valid pixels to score")
    return mask


def depth_metrics(pred: np.ndarray, gt: np.ndarray, valid_mask: np.ndarray) -> DepthMetrics:
    """Score a predicted depth map against ground truth over valid pixels.

    delta_i is the percentage of pixels with max(pred/gt, gt/pred) < 1.25^i
    (both sides clamped to >= 1e-6 first); RMSE is root-mean-square error of
    the raw values.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim != 2 or pred.shape != gt.shape:
        raise ShapeError(
            f"depth maps must be equal-shape 2D arrays, got {pred.shape} and {gt.shape}"
        )
    mask = _checked_mask(valid_mask, pred.shape, "depth_metrics")
    p = pred[mask]
    g = gt[mask]
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(g))):
        raise DataError("depth maps contain non-finite values on valid pixels")
    if np.any(g < 0.0) or np.any(p < 0.0):
        raise DataError("depth values must be nonnegative on valid pixels")

    pc = np.maximum(p, RATIO_CLAMP)
    gc = np.maximum(g, RATIO_CLAMP)
    ratio = np.maximum(pc / gc, gc / pc)
    deltas = [
        100.0 * float(np.mean(ratio < DEPTH_RATIO_BASE ** i)) for i in (1, 2, 3)
    ]
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    return DepthMetrics(delta1=deltas[0], delta2=deltas[1], delta3=deltas[2], rmse=rmse)


def _as_normal_array(pred) -> np.ndarray:
    """Accept a (3, H, W) array or a probe NormalPrediction."""
    normal = getattr(pred, "normal", None)
    if normal is not None:
        values = getattr(normal, "values", None)
        arr = values if values is not None else np.asarray(normal)
        if arr.ndim == 4:
            if arr.shape[0] != 1:
                raise ShapeError(
                    f"batched normal predictions must have batch 1, got {arr.shape}"
                )
            arr = arr[0]
        return np.asarray(arr, dtype=np.float64)
    return np.asarray(pred, dtype=np.float64)


def normal_metrics(pred, gt: np.ndarray, valid_mask: np.ndarray) -> NormalMetrics:
    """Score predicted unit normals (3, H, W) against ground-truth unit
    normals via the per-pixel angle in degrees."""
    pred_arr = _as_normal_array(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred_arr.ndim != 3 or pred_arr.shape[0] != 3 or pred_arr.shape != gt.shape:
        raise ShapeError(
            f"normal maps must be equal-shape (3, H, W) arrays, got "
            f"{pred_arr.shape} and {gt.shape}"
        )
    mask = _checked_mask(valid_mask, pred_arr.shape[1:], "normal_metrics")

    p = pred_arr[:, mask]
    g = gt[:, mask]
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(g))):
        raise DataError("normal maps contain non-finite values on valid pixels")
    g_norm = np.linalg.norm(g, axis=0)
    if np.any(np.abs(g_norm - 1.0) > 1e-4):
        raise DataError("ground-truth normals must be unit length on valid pixels")
    p_norm = np.linalg.norm(p, axis=0)
    if np.any(np.abs(p_norm - 1.0) > 1e-4):
        raise DataError("predicted normals must be unit length on valid pixels")

    cos = np.clip((p * g).sum(axis=0), -1.0, 1.0)
    angles = np.degrees(np.arccos(cos))
    recalls = [100.0 * float(np.mean(angles < t)) for t in NORMAL_THRESHOLDS_DEG]
    rmse = float(np.sqrt(np.mean(angles ** 2)))
    return NormalMetrics(
        recall_11=recalls[0], recall_22=recalls[1], recall_30=recalls[2], rmse_deg=rmse
    )


def normalize_object_depth(
    gt: np.ndarray, object_mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Rescale masked depths to [0, 1] with 0 at the closest pixel.

    Returns (normalized map, valid mask); the map is 0 outside the mask and
    the returned mask is the authoritative validity indicator.  Constant
    depth inside the mask is a degenerate input.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim != 2:
        raise ShapeError(f"depth map must be 2D, got shape {gt.shape}")
    mask = _checked_mask(object_mask, gt.shape, "normalize_object_depth")
    values = gt[mask]
    if not np.all(np.isfinite(values)):
        raise DataError("depth map contains non-finite values inside the mask")
    d_min = float(values.min())
    d_max = float(values.max())
    if d_max == d_min:
        raise DegenerateInputError(
            f"constant depth {d_min} inside the object mask cannot be normalized"
        )
    out = np.zeros_like(gt)
    out[mask] = (gt[mask] - d_min) / (d_max - d_min)
    return out, mask.copy()
