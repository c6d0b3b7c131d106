"""Overlap and boundary-distance metrics between two segmentations."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ShapeError

# in-plane 4-neighbourhood; no coupling across slices
_CROSS = np.zeros((3, 3, 3), dtype=bool)
_CROSS[1] = [[0, 1, 0], [1, 1, 1], [0, 1, 0]]


def _as3d(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        return mask[None]
    if mask.ndim != 3:
        raise ShapeError(f"binary mask must be 2-D or 3-D (Z, H, W), got {mask.shape}")
    return mask


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A & B| / (|A| + |B|) over the full voxel grid; 1.0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"dice: mask shapes differ {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def contour_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices (z, y, x) of foreground voxels with a background 4-neighbour in their slice.

    The region outside the grid counts as background.
    """
    m = _as3d(mask)
    interior = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    return np.argwhere(m & ~interior)


def extract_contour(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Boundary points in mm, one row (x, y, z) per voxel centre."""
    idx = contour_voxels(mask)
    dx, dy, dz = spacing
    return np.column_stack([idx[:, 2] * dx, idx[:, 1] * dy, idx[:, 0] * dz]).astype(np.float64)


def _directed(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Distance from every point of ``p`` to its nearest neighbour in ``q``."""
    dist, _ = cKDTree(q).query(p, k=1)
    return np.asarray(dist, dtype=np.float64)


def _distance_pairs(a, b, spacing, per_slice):
    """Yield (d(p, dB) for p in dA, d(q, dA) for q in dB) groups; None if undefined."""
    ca, cb = extract_contour(a, spacing), extract_contour(b, spacing)
    if len(ca) == 0 or len(cb) == 0:
        return None
    if not per_slice:
        return [(_directed(ca, cb), _directed(cb, ca))]
    groups = []
    za, zb = ca[:, 2], cb[:, 2]
    for z in np.unique(np.concatenate([za, zb])):
        pa, pb = ca[za == z], cb[zb == z]
        if len(pa) and len(pb):
            groups.append((_directed(pa, pb), _directed(pb, pa)))
    return groups or None


def mean_contour_distance(a, b, spacing=(1.0, 1.0, 1.0), per_slice=False) -> float | None:
    """Symmetrised mean point-to-contour distance in mm; ``None`` if either contour is empty.

    With ``per_slice`` the formula is applied within each slice holding both
    contours and the slice values are averaged.
    """
    groups = _distance_pairs(a, b, spacing, per_slice)
    if groups is None:
        return None
    vals = [0.5 * dab.mean() + 0.5 * dba.mean() for dab, dba in groups]
    return float(np.mean(vals))


def hausdorff(a, b, spacing=(1.0, 1.0, 1.0), per_slice=False) -> float | None:
    """Symmetric Hausdorff distance in mm; ``None`` if either contour is empty.

    With ``per_slice`` the per-slice distances are reduced by their maximum.
    """
    groups = _distance_pairs(a, b, spacing, per_slice)
    if groups is None:
        return None
    return float(max(max(dab.max(), dba.max()) for dab, dba in groups))


@dataclass
class ClassMetrics:
    dice: float
    mcd: float | None
    hd: float | None


@dataclass
class MetricReport:
    per_class: dict = field(default_factory=dict)  # class id -> ClassMetrics

    def __getitem__(self, class_id) -> ClassMetrics:
        return self.per_class[class_id]


def evaluate_pair(auto: np.ndarray, manual: np.ndarray, classes, spacing=(1.0, 1.0, 1.0),
                  per_slice=False) -> MetricReport:
    """Dice, MCD and HD for each listed class of two label arrays on one grid."""
    auto = np.asarray(auto)
    manual = np.asarray(manual)
    if auto.shape != manual.shape:
        raise ShapeError(f"label maps differ in shape: {auto.shape} vs {manual.shape}")
    report = MetricReport()
    for c in classes:
        a, m = auto == c, manual == c
        report.per_class[c] = ClassMetrics(dice(a, m),
                                           mean_contour_distance(a, m, spacing, per_slice),
                                           hausdorff(a, m, spacing, per_slice))
    return report


METRIC_COLUMNS = ("subject_id", "class", "dice", "mcd_mm", "hd_mm")


def _cell(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_metric_csv(path, rows) -> None:
    """``rows``: iterable of (subject_id, class_name, ClassMetrics)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for sid, cls, m in rows:
            w.writerow([sid, cls, _cell(m.dice), _cell(m.mcd), _cell(m.hd)])
