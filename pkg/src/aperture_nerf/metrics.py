"""Depth and image comparison metrics."""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from ._validation import check_depth_pair


def side(pred, gt, mask=None) -> float:
    """Scale-invariant depth error: standard deviation of ``log pred - log gt`` over the mask."""
    pred, gt, mask = check_depth_pair(pred, gt, mask)
    p, g = pred[mask], gt[mask]
    if np.any(p <= 0) or np.any(g <= 0):
        raise ValueError("depths must be strictly positive inside the mask")
    e = np.log(p) - np.log(g)
    centered = e - e.mean()
    return float(math.sqrt(np.mean(centered * centered)))


def grad_diff(pred, gt, mask=None) -> float:
    """Mean absolute forward-difference gradient of the depth difference map.

    ``pred`` is first shifted so its median over the mask matches ``gt``'s.
    Returns ``mean |dx d| + mean |dy d|`` over pixel pairs that are both
    inside the mask (a direction with no valid pair contributes 0).
    """
    pred, gt, mask = check_depth_pair(pred, gt, mask)
    pred = pred - np.median(pred[mask]) + np.median(gt[mask])
    d = np.where(mask, pred - gt, 0.0)
    if d.ndim == 1:
        d, mask = d[None, :], mask[None, :]
    total = 0.0
    for axis in (1, 0):
        valid = np.logical_and(np.take(mask, range(1, mask.shape[axis]), axis=axis),
                               np.take(mask, range(0, mask.shape[axis] - 1), axis=axis))
        if valid.any():
            total += float(np.mean(np.abs(np.diff(d, axis=axis))[valid]))
    return total


def psnr(image, reference) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; ``inf`` when identical."""
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch: {image.shape} vs {reference.shape}")
    mse = float(np.mean((image - reference) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def laplacian_variance(image, region=None) -> float:
    """Sharpness score: variance of the Laplacian of the grayscale image over ``region``.

    ``region`` is a tuple of slices (rows, cols) or a boolean mask.
    """
    image = np.asarray(image, dtype=np.float64)
    gray = image.mean(axis=-1) if image.ndim == 3 else image
    lap = ndimage.laplace(gray, mode="nearest")
    if region is not None:
        lap = lap[region]
    return float(np.var(lap))


def opacity_mask(opacity, threshold=0.5):
    return np.asarray(opacity) >= threshold


def depth_metrics(pred, gt, mask=None, image=None, reference=None) -> dict:
    """Metrics record ``{side, grad_diff, psnr, mask_fraction}``."""
    pred_a = np.asarray(pred, dtype=np.float64)
    full = np.ones(pred_a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    record = {
        "side": side(pred, gt, full),
        "grad_diff": grad_diff(pred, gt, full),
        "grad_diff_alignment": "median offset",
        "psnr": None if image is None else psnr(image, reference),
        "mask_fraction": float(full.mean()),
    }
    return record
