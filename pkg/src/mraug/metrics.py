"""Volume-level lesion segmentation metrics and the coefficient of variation."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ShapeError, Undefined


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}", dim="shape")
    return pred, gt


def dice(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / total)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one fully-connected neighbour outside the mask."""
    structure = ndimage.generate_binary_structure(mask.ndim, mask.ndim)
    return mask & ~ndimage.binary_erosion(mask, structure, border_value=0)


def _directed(src_edge, dst_edge, spacing):
    dist = ndimage.distance_transform_edt(~dst_edge, sampling=spacing)
    return dist[src_edge]


def hausdorff(pred, gt, spacing=None, percentile: float = 95) -> float:
    """Symmetric percentile Hausdorff distance between mask boundaries, in mm.

    ``percentile=100`` gives the classical maximum.
    """
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        raise Undefined("Hausdorff distance needs two non-empty masks")
    spacing = tuple(float(s) for s in (spacing or (1.0,) * pred.ndim))
    pe, ge = boundary(pred), boundary(gt)
    d_pg = _directed(pe, ge, spacing)
    d_gp = _directed(ge, pe, spacing)
    return float(max(np.percentile(d_pg, percentile), np.percentile(d_gp, percentile)))


def avd(pred, gt) -> float:
    """Absolute volume difference as a percentage of the true volume."""
    pred, gt = _pair(pred, gt)
    vg = gt.sum()
    if vg == 0:
        raise Undefined("volume difference is undefined for an empty ground truth")
    return float(abs(int(pred.sum()) - int(vg)) / vg * 100.0)


def lesion_components(mask, connectivity: int | None = None):
    """Connected components; default connectivity is the full neighbourhood (8 in 2-D, 26 in 3-D).

    Returns ``(labels, count)``.
    """
    mask = np.asarray(mask, dtype=bool)
    rank = mask.ndim if connectivity is None else connectivity
    structure = ndimage.generate_binary_structure(mask.ndim, rank)
    labels, n = ndimage.label(mask, structure)
    return labels, int(n)


def _touched(labels, n, other):
    if n == 0:
        return 0
    hit = np.unique(labels[other & (labels > 0)])
    return len(hit)


def lesion_recall(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    labels, n = lesion_components(gt)
    if n == 0:
        raise Undefined("lesion recall is undefined without ground-truth lesions")
    return _touched(labels, n, pred) / n


def lesion_f1(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    recall = lesion_recall(pred, gt)
    plabels, pn = lesion_components(pred)
    precision = _touched(plabels, pn, gt) / pn if pn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def fpr(pred, gt, brain_mask) -> float:
    """False positives as a percentage of the brain's true-negative pixels."""
    pred, gt = _pair(pred, gt)
    brain = np.asarray(brain_mask, dtype=bool)
    if brain.shape != gt.shape:
        raise ShapeError("brain mask is not aligned with the masks", dim="shape")
    negatives = (brain & ~gt).sum()
    if negatives == 0:
        raise Undefined("false positive rate needs non-lesion brain pixels")
    return float((pred & ~gt).sum() / negatives * 100.0)


def cov_ratio(values) -> float:
    """Sample standard deviation over the mean."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size < 2:
        raise Undefined("coefficient of variation needs at least two values")
    mean = values.mean()
    if mean == 0:
        raise Undefined("coefficient of variation is undefined for a zero mean")
    return float(values.std(ddof=1) / mean)
