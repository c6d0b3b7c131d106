"""Ventricular volumes, LV mass and the stroke-volume family from label maps."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from decimal import Decimal

import numpy as np

from .data import LV_CAVITY, LV_MYO, RV_CAVITY, LabelMap
from .errors import UndefinedMeasureError

MYOCARDIAL_DENSITY = 1.05  # g/mL


def _dec(v: float) -> Decimal:
    # spacings are decimal millimetre values; work from their shortest repr
    return Decimal(repr(float(v)))


def chamber_volume(labels: LabelMap, class_id: int, frame: int | None = None) -> float:
    """Voxel count of ``class_id`` times the voxel volume, in mL.

    ``frame`` indexes the leading time axis of a (T, Z, H, W) map; leave it
    ``None`` for a single-frame (Z, H, W) map.
    """
    if class_id not in labels.classes:
        raise ValueError(f"unknown class id {class_id}; known {sorted(labels.classes)}")
    data = labels.data if frame is None else labels.data[frame]
    dx, dy, dz = (_dec(s) for s in labels.spacing)
    # exact decimal product, rounded once: 1000 voxels of 1.8 x 1.8 x 10 mm give 32.4, not 32.400000000000006
    return float(int(np.count_nonzero(data == class_id)) * dx * dy * dz / 1000)


def lv_mass(labels: LabelMap, frame: int | None = None, myo_class: int = LV_MYO,
            density: float = MYOCARDIAL_DENSITY) -> float:
    """Myocardial volume times density, in grams."""
    if myo_class not in labels.classes:
        raise ValueError("label dictionary has no LV myocardium class")
    return float(_dec(chamber_volume(labels, myo_class, frame)) * _dec(density))


def select_ed_es(volumes) -> tuple[int, int]:
    """ED is frame 0; ES is the first frame of minimal LV cavity volume."""
    v = np.asarray(volumes, dtype=np.float64)
    if v.ndim != 1 or len(v) < 2:
        raise ValueError("need a volume trace of at least two frames")
    if not np.any(v > 0):
        raise ValueError("no cavity detected in any frame")
    return 0, int(np.argmin(v))


@dataclass
class Derived:
    sv: float
    ef: float | None
    co: float | None


def derived_measures(edv: float, esv: float, heart_rate: float | None = None, *,
                     require_ef: bool = True) -> Derived:
    """Stroke volume (mL), ejection fraction (%) and cardiac output (L/min).

    CO is ``None`` without a heart rate. EF with EDV = 0 raises unless
    ``require_ef`` is false, in which case it is reported as ``None``.
    """
    sv = edv - esv
    if edv > 0:
        ef = 100.0 * sv / edv
    elif require_ef:
        raise UndefinedMeasureError("ejection fraction is undefined for EDV = 0")
    else:
        ef = None
    co = sv * heart_rate / 1000.0 if heart_rate else None
    return Derived(sv, ef, co)


def heart_rate_from_timing(n_frames: int, frame_interval: float) -> float | None:
    """Beats per minute when one cine loop covers one cardiac cycle."""
    if frame_interval <= 0 or n_frames <= 0:
        return None
    return 60.0 / (n_frames * frame_interval)


@dataclass
class ClinicalMeasures:
    LVEDV_ml: float
    LVESV_ml: float
    LVM_g: float
    RVEDV_ml: float
    RVESV_ml: float
    LVSV_ml: float
    LVEF_pct: float | None
    LVCO_lpm: float | None
    RVSV_ml: float
    RVEF_pct: float | None
    RVCO_lpm: float | None
    ed_frame: int
    es_frame: int
    heart_rate: float | None = None


def subject_measures(labels: LabelMap, heart_rate: float | None = None,
                     es_override: int | None = None, rv_es_frame: int | None = None) -> ClinicalMeasures:
    """All measures for a (T, Z, H, W) label map.

    ED/ES come from the LV cavity trace; the RV uses the same ES frame unless
    ``rv_es_frame`` is given. LV mass is measured at ED.
    """
    t = labels.data.shape[0]
    trace = [chamber_volume(labels, LV_CAVITY, f) for f in range(t)]
    ed, es = select_ed_es(trace)
    if es_override is not None:
        es = es_override
    rv_es = es if rv_es_frame is None else rv_es_frame
    if heart_rate is None:
        heart_rate = heart_rate_from_timing(t, labels.frame_interval)
    lvedv, lvesv = trace[ed], trace[es]
    rvedv = chamber_volume(labels, RV_CAVITY, ed)
    rvesv = chamber_volume(labels, RV_CAVITY, rv_es)
    lv = derived_measures(lvedv, lvesv, heart_rate, require_ef=False)
    rv = derived_measures(rvedv, rvesv, heart_rate, require_ef=False)
    return ClinicalMeasures(lvedv, lvesv, lv_mass(labels, ed), rvedv, rvesv,
                            lv.sv, lv.ef, lv.co, rv.sv, rv.ef, rv.co, ed, es, heart_rate)


MEASURE_COLUMNS = ("subject_id", "LVEDV_ml", "LVESV_ml", "LVM_g", "RVEDV_ml", "RVESV_ml",
                   "LVSV_ml", "LVEF_pct", "LVCO_lpm", "RVSV_ml", "RVEF_pct", "RVCO_lpm",
                   "ed_frame", "es_frame")


def write_measures_csv(path, rows) -> None:
    """``rows``: iterable of (subject_id, ClinicalMeasures)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEASURE_COLUMNS)
        for sid, m in rows:
            d = asdict(m)
            cells = [sid]
            for col in MEASURE_COLUMNS[1:]:
                v = d[col]
                cells.append("" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(v))
            w.writerow(cells)


def read_measures_csv(path) -> dict[str, dict[str, float | None]]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row.pop("subject_id")
            out[sid] = {k: (float(v) if v != "" else None) for k, v in row.items()}
    return out
