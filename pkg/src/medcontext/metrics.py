"""Segmentation metrics: Dice similarity and 95th-percentile Hausdorff distance.

HD95 is computed between mask boundaries (voxels with a 6-neighbour outside
the mask or on the array border). For each boundary voxel of one mask the
distance to the nearest boundary voxel of the other is taken in millimetres;
the 95th percentile of each directed set (linear interpolation between
closest ranks) is computed and the larger of the two is returned. When either
boundary is empty the distance is undefined and ``None`` is returned.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class LabelMask:
    mask: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.spacing) != self.mask.ndim or min(self.spacing) <= 0:
            raise ContractError(f"spacing {self.spacing} invalid for a {self.mask.ndim}-D mask")


def _pair(Y, F) -> tuple[LabelMask, LabelMask]:
    Y = Y if isinstance(Y, LabelMask) else LabelMask(Y)
    F = F if isinstance(F, LabelMask) else LabelMask(F)
    if Y.mask.shape != F.mask.shape:
        raise ShapeError(f"mask extents differ: {Y.mask.shape} vs {F.mask.shape}")
    return Y, F


def dsc(Y, F) -> float:
    """2|Y & F| / (|Y| + |F|); 1.0 when both masks are empty."""
    Y, F = _pair(Y, F)
    total = int(Y.mask.sum()) + int(F.mask.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(Y.mask, F.mask).sum()) / total


def boundary(mask) -> LabelMask:
    m = mask if isinstance(mask, LabelMask) else LabelMask(mask)
    padded = np.pad(m.mask, 1, constant_values=False)
    interior = padded.copy()
    for axis in range(padded.ndim):
        interior &= np.roll(padded, 1, axis=axis) & np.roll(padded, -1, axis=axis)
    inner = tuple(slice(1, -1) for _ in range(padded.ndim))
    return LabelMask(m.mask & ~interior[inner], m.spacing)


def percentile(values: np.ndarray, q: float) -> float:
    """Linear interpolation between closest ranks on the sorted values."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of an empty set")
    rank = q / 100.0 * (v.size - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, v.size - 1)
    frac = rank - lo
    return float(v[lo] + frac * (v[hi] - v[lo]))


def _points(m: LabelMask) -> np.ndarray:
    return np.argwhere(m.mask).astype(np.float64) * np.asarray(m.spacing)


def directed_distances(src: np.ndarray, dst: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Distance from every point in ``src`` to its nearest point in ``dst``."""
    out = np.empty(len(src), dtype=np.float64)
    for start in range(0, len(src), chunk):
        block = src[start:start + chunk]
        d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=-1)
        out[start:start + chunk] = np.sqrt(d2.min(axis=1))
    return out


def hd95(Y, F, q: float = 95.0) -> Optional[float]:
    """Symmetric percentile Hausdorff distance in mm, or ``None`` if undefined."""
    Y, F = _pair(Y, F)
    if Y.spacing != F.spacing:
        raise ShapeError(f"spacing differs: {Y.spacing} vs {F.spacing}")
    by, bf = _points(boundary(Y)), _points(boundary(F))
    if len(by) == 0 or len(bf) == 0:
        return None
    d_yf = percentile(directed_distances(bf, by), q)
    d_fy = percentile(directed_distances(by, bf), q)
    return max(d_yf, d_fy)


def hausdorff(Y, F) -> Optional[float]:
    return hd95(Y, F, q=100.0)


@dataclass
class ClassReport:
    label: int
    dsc: float
    hd95: Optional[float]
    present: bool

    @property
    def hd95_defined(self) -> bool:
        return self.hd95 is not None


@dataclass
class VolumeReport:
    classes: list[ClassReport] = field(default_factory=list)

    @property
    def mean_dsc(self) -> Optional[float]:
        vals = [c.dsc for c in self.classes if c.present]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_hd95(self) -> Optional[float]:
        vals = [c.hd95 for c in self.classes if c.present and c.hd95 is not None]
        return float(np.mean(vals)) if vals else None


def evaluate_volume(Y_labels: np.ndarray, F_labels: np.ndarray, num_classes: int,
                    spacing: Sequence[float] = (1.0, 1.0, 1.0), q: float = 95.0) -> VolumeReport:
    """Per-foreground-class DSC and HD95.

    Classes absent from the ground truth are reported with ``present=False``
    and excluded from the means; a class present but missed by the prediction
    scores DSC 0 and an undefined HD95.
    """
    Y_labels = np.asarray(Y_labels)
    F_labels = np.asarray(F_labels)
    if Y_labels.shape != F_labels.shape:
        raise ShapeError(f"label volumes differ: {Y_labels.shape} vs {F_labels.shape}")
    for arr in (Y_labels, F_labels):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ContractError(f"labels must lie in [0, {num_classes})")
    report = VolumeReport()
    for c in range(1, num_classes):
        y = LabelMask(Y_labels == c, spacing)
        f = LabelMask(F_labels == c, spacing)
        report.classes.append(ClassReport(c, dsc(y, f), hd95(y, f, q), bool(y.mask.any())))
    return report


def aggregate(reports: Sequence[VolumeReport], num_classes: int) -> list[ClassReport]:
    """Average each class over the volumes where it is present."""
    out = []
    for c in range(1, num_classes):
        rows = [r.classes[c - 1] for r in reports if r.classes[c - 1].present]
        dscs = [r.dsc for r in rows]
        hds = [r.hd95 for r in rows if r.hd95 is not None]
        out.append(ClassReport(
            c,
            float(np.mean(dscs)) if dscs else float("nan"),
            float(np.mean(hds)) if hds else None,
            bool(rows),
        ))
    return out


def write_report(rows: Sequence[ClassReport], csv_path, json_path, extra: dict | None = None) -> dict:
    """Emit ``class,dsc,hd95,defined`` rows and a JSON summary of the means."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "dsc", "hd95", "defined"])
        for r in rows:
            w.writerow([r.label, repr(r.dsc), "" if r.hd95 is None else repr(r.hd95), int(r.hd95_defined)])
    present = [r for r in rows if r.present]
    hds = [r.hd95 for r in present if r.hd95 is not None]
    summary = {
        "mean_dsc": float(np.mean([r.dsc for r in present])) if present else None,
        "mean_hd95": float(np.mean(hds)) if hds else None,
        "per_class": {str(r.label): {"dsc": r.dsc, "hd95": r.hd95, "present": r.present} for r in rows},
    }
    if extra:
        summary.update(extra)
    Path(json_path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
