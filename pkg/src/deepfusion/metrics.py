"""Segmentation evaluation: Dice, Hausdorff (mm), average perpendicular distance, "good" contours."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

GOOD_APD_MM = 5.0


class UndefinedDistanceError(ValueError):
    """A distance between point sets was requested but one of them is empty."""


@dataclass
class BinaryMask:
    mask: np.ndarray
    spacing_mm: tuple[float, ...] = (1.0, 1.0)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != self.mask.ndim or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing {self.spacing_mm} invalid for a {self.mask.ndim}D mask")


def _as_mask(m, spacing=None) -> BinaryMask:
    if isinstance(m, BinaryMask):
        return m
    m = np.asarray(m, dtype=bool)
    return BinaryMask(m, spacing if spacing is not None else (1.0,) * m.ndim)


def _pair(a, b):
    a, b = _as_mask(a), _as_mask(b)
    if a.mask.shape != b.mask.shape:
        raise ValueError(f"masks differ in shape: {a.mask.shape} vs {b.mask.shape}")
    return a, b


def dice(a, b) -> float:
    a, b = _pair(a, b)
    total = a.mask.sum() + b.mask.sum()
    if total == 0:
        return 1.0
    return float(2 * np.logical_and(a.mask, b.mask).sum() / total)


def _points(mask: BinaryMask) -> np.ndarray:
    return np.argwhere(mask.mask) * np.asarray(mask.spacing_mm)


def _nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return cKDTree(dst).query(src, k=1)[0]


def hausdorff_mm(a, b) -> float:
    a, b = _pair(a, b)
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise UndefinedDistanceError("Hausdorff distance undefined for an empty mask")
    return float(max(_nearest(pa, pb).max(), _nearest(pb, pa).max()))


def contour(mask) -> BinaryMask:
    """Boundary pixels: foreground pixels with a background 8-neighbor or on the image edge."""
    m = _as_mask(mask)
    structure = np.ones((3,) * m.mask.ndim, dtype=bool)
    inner = ndimage.binary_erosion(m.mask, structure=structure, border_value=0)
    return BinaryMask(m.mask & ~inner, m.spacing_mm)


def apd_mm(contour_a, contour_b) -> float:
    """Mean nearest-point distance pooled over the points of both contours."""
    a, b = _pair(contour_a, contour_b)
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise UndefinedDistanceError("contour distance undefined for an empty contour")
    d = np.concatenate([_nearest(pa, pb), _nearest(pb, pa)])
    return float(d.mean())


def good_percentage(apds, threshold_mm: float = GOOD_APD_MM) -> float:
    apds = np.asarray(list(apds), dtype=float)
    if apds.size == 0:
        return float("nan")
    return float(100.0 * (apds < threshold_mm).mean())


@dataclass
class SubjectReport:
    subject: str
    dice: float
    hd_mm: float
    apd_mm: float
    good: float
    slices: list[dict] = field(default_factory=list)


@dataclass
class RunReport:
    subjects: list[SubjectReport]

    def summary(self) -> dict:
        out = {}
        for key in ("dice", "hd_mm", "apd_mm", "good"):
            col = np.array([getattr(s, key) for s in self.subjects], dtype=float)
            col = col[~np.isnan(col)]
            out[key] = (float(col.mean()), float(col.std())) if col.size else (float("nan"), float("nan"))
        return out

    def to_csv(self, per_slice: bool = False) -> str:
        lines = ["subject,dice,hd_mm,apd_mm,good"]
        for s in self.subjects:
            lines.append(f"{s.subject},{s.dice:.6f},{s.hd_mm:.6f},{s.apd_mm:.6f},{s.good:.2f}")
            if per_slice:
                for row in s.slices:
                    lines.append(f"{s.subject}/slice{row['slice']},{row['dice']:.6f},{row['hd_mm']:.6f},"
                                 f"{row['apd_mm']:.6f},{100.0 * row['good']:.2f}")
        summ = self.summary()
        lines.append("mean," + ",".join(f"{summ[k][0]:.6f}" for k in ("dice", "hd_mm", "apd_mm", "good")))
        lines.append("std," + ",".join(f"{summ[k][1]:.6f}" for k in ("dice", "hd_mm", "apd_mm", "good")))
        return "\n".join(lines) + "\n"


def _safe(fn, *args) -> float:
    try:
        return fn(*args)
    except UndefinedDistanceError:
        return float("nan")


def evaluate_subject(subject: str, pred, truth, spacing_mm, slice_mm: float = 1.0) -> SubjectReport:
    """Score one subject; ``pred``/``truth`` are (M, N) or a (S, M, N) slice stack.

    Dice and Hausdorff treat the stack as one voxel set; APD and the "good"
    flag are computed per slice and averaged.
    """
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"{subject}: prediction {pred.shape} and truth {truth.shape} differ")
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    spacing3 = (float(slice_mm), *spacing_mm)
    vol_p, vol_t = BinaryMask(pred, spacing3), BinaryMask(truth, spacing3)
    rows = []
    for i in range(pred.shape[0]):
        p2, t2 = BinaryMask(pred[i], spacing_mm), BinaryMask(truth[i], spacing_mm)
        apd = _safe(apd_mm, contour(p2), contour(t2))
        rows.append({"slice": i, "dice": dice(p2, t2), "hd_mm": _safe(hausdorff_mm, p2, t2),
                     "apd_mm": apd, "good": bool(apd < GOOD_APD_MM)})
    apds = [r["apd_mm"] for r in rows]
    return SubjectReport(subject, dice(vol_p, vol_t), _safe(hausdorff_mm, vol_p, vol_t),
                         float(np.nanmean(apds)) if not np.all(np.isnan(apds)) else float("nan"),
                         good_percentage(apds), rows)


def evaluate_run(predictions: dict, truths: dict, spacing_mm, slice_mm: float = 1.0) -> RunReport:
    missing = set(predictions) ^ set(truths)
    if missing:
        raise ValueError(f"unmatched subject ids: {sorted(missing)}")
    spacing = spacing_mm
    reports = []
    for sid in sorted(predictions):
        sp = spacing[sid] if isinstance(spacing, dict) else spacing
        reports.append(evaluate_subject(sid, predictions[sid], truths[sid], sp, slice_mm))
    return RunReport(reports)
