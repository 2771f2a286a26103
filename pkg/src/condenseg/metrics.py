"""Segmentation and agreement metrics: Dice, Hausdorff (mm), Pearson."""

import numpy as np

from .volume import LabelMask


def _as_array(mask):
    return mask.data if isinstance(mask, LabelMask) else np.asarray(mask)


def dice_score(a, b, label: int) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both sets are empty."""
    a = _as_array(a)
    b = _as_array(b)
    if a.shape != b.shape:
        raise ValueError("mask shapes differ: %s vs %s" % (a.shape, b.shape))
    sa = a == label
    sb = b == label
    denom = int(sa.sum()) + int(sb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((sa & sb).sum()) / denom


def boundary_points(binary: np.ndarray) -> np.ndarray:
    """(N,2) row/col coordinates of set pixels with a 4-neighbor outside the
    set (image borders count as outside)."""
    padded = np.pad(binary, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(binary & ~interior)


def _directed_hausdorff(pts_a, pts_b, spacing):
    # max over a of min over b; brute force in chunks
    worst = 0.0
    scale = np.asarray(spacing, dtype=np.float64)
    b_scaled = pts_b * scale
    for start in range(0, len(pts_a), 512):
        chunk = pts_a[start:start + 512] * scale
        d2 = ((chunk[:, None, :] - b_scaled[None, :, :]) ** 2).sum(axis=2)
        worst = max(worst, float(np.sqrt(d2.min(axis=1).max())))
    return worst


def hausdorff(a, b, label: int, spacing_mm=(1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance between boundary point sets, in mm.

    2-D masks are compared in-plane; (Z,H,W) stacks take the worst slice
    (in-plane distances only, matching per-slice annotation practice).
    """
    a = _as_array(a)
    b = _as_array(b)
    if a.shape != b.shape:
        raise ValueError("mask shapes differ: %s vs %s" % (a.shape, b.shape))
    if np.isscalar(spacing_mm):
        spacing_mm = (float(spacing_mm), float(spacing_mm))
    sy, sx = spacing_mm[1], spacing_mm[0]
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    worst = 0.0
    seen = False
    for za, zb in zip(a, b):
        pa = boundary_points(za == label)
        pb = boundary_points(zb == label)
        if len(pa) == 0 and len(pb) == 0:
            continue
        if len(pa) == 0 or len(pb) == 0:
            raise ValueError("hausdorff undefined: label %d empty in one mask"
                             % label)
        seen = True
        worst = max(worst,
                    _directed_hausdorff(pa, pb, (sy, sx)),
                    _directed_hausdorff(pb, pa, (sy, sx)))
    if not seen:
        raise ValueError("hausdorff undefined: label %d empty in both masks" % label)
    return worst


def pearson(x, y) -> float:
    """Sample correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two equal-length 1-D series")
    if len(x) < 2:
        raise ValueError("pearson needs at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float((xc * xc).sum())
    vy = float((yc * yc).sum())
    if vx == 0 or vy == 0:
        raise ValueError("pearson undefined for zero-variance series")
    return float((xc * yc).sum() / np.sqrt(vx * vy))
