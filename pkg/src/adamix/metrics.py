"""Segmentation evaluation: overlap and boundary-distance metrics.

Overlap: Dice 2|P∩G|/(|P|+|G|) and Jaccard |P∩G|/|P∪G|, with the convention
that two empty masks score 1.0 (flagged as trivial).

Boundary distances: a mask's boundary is every mask pixel 4-adjacent to
background (image borders count as background).  The directed distances from
each boundary to the other are pooled into one symmetric set; the average
surface distance is that set's mean and the 95% Hausdorff distance its 95th
percentile with linear interpolation.  Pixel spacing is 1.  Either mask being
empty makes the surface metrics undefined (flagged, excluded from averages).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt


def _as_bool(mask: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2D mask, got shape {arr.shape}")
    return arr.astype(bool)


def _check_shapes(pred: np.ndarray, gt: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray]:
    p = _as_bool(pred, "pred")
    g = _as_bool(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); both masks empty -> 1.0 by convention."""
    p, g = _check_shapes(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """|P∩G| / |P∪G|; both masks empty -> 1.0 by convention."""
    p, g = _check_shapes(pred, gt)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Mask pixels 4-adjacent to background; the outside counts as background."""
    m = _as_bool(mask, "mask")
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def surface_distances(pred: np.ndarray, gt: np.ndarray
                      ) -> tuple[float, float]:
    """(hd95, asd) over the pooled directed boundary distances.

    Returns (nan, nan) when either mask is empty -- the undefined case that
    callers must flag and exclude from averages.
    """
    p, g = _check_shapes(pred, gt)
    if not p.any() or not g.any():
        return math.nan, math.nan
    bp = boundary_pixels(p)
    bg = boundary_pixels(g)
    # Distance fields to the nearest boundary pixel of each mask.
    dist_to_g = distance_transform_edt(~bg)
    dist_to_p = distance_transform_edt(~bp)
    pooled = np.concatenate([dist_to_g[bp], dist_to_p[bg]])
    hd95 = float(np.percentile(pooled, 95))
    asd = float(pooled.mean())
    return hd95, asd


@dataclass(frozen=True)
class ClassMetrics:
    """Metrics of one foreground class on one sample."""

    class_index: int
    dsc: float
    jaccard: float
    hd95: float        # nan when surface_undefined
    asd: float         # nan when surface_undefined
    overlap_trivial: bool     # both masks empty; dsc/jaccard are 1.0 by convention
    surface_undefined: bool   # either mask empty; hd95/asd are nan

    def flags(self) -> str:
        names = []
        if self.overlap_trivial:
            names.append("overlap_trivial")
        if self.surface_undefined:
            names.append("surface_undefined")
        return ";".join(names)


@dataclass(frozen=True)
class MetricReport:
    """Per-class metrics of one sample plus macro averages.

    Macro DSC/Jaccard average every evaluated class; macro hd95/asd average
    only the defined ones (nan if none are).
    """

    sample_id: str
    per_class: tuple[ClassMetrics, ...]

    def _macro(self, values: list[float]) -> float:
        defined = [v for v in values if not math.isnan(v)]
        return sum(defined) / len(defined) if defined else math.nan

    @property
    def macro_dsc(self) -> float:
        return self._macro([c.dsc for c in self.per_class])

    @property
    def macro_jaccard(self) -> float:
        return self._macro([c.jaccard for c in self.per_class])

    @property
    def macro_hd95(self) -> float:
        return self._macro([c.hd95 for c in self.per_class])

    @property
    def macro_asd(self) -> float:
        return self._macro([c.asd for c in self.per_class])


EVAL_CSV_COLUMNS = ("sample_id", "class", "dsc", "jaccard", "hd95", "asd",
                    "undefined_flags")


def evaluate_sample(sample_id: str, pred_labels: np.ndarray,
                    gt_labels: np.ndarray, n_classes: int) -> MetricReport:
    """Per-foreground-class metrics of one predicted label map."""
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(
            f"label map shapes differ: {pred_labels.shape} vs "
            f"{gt_labels.shape}")
    rows = []
    for c in range(1, n_classes):
        p = pred_labels == c
        g = gt_labels == c
        trivial = not p.any() and not g.any()
        hd95, asd = surface_distances(p, g)
        rows.append(ClassMetrics(
            class_index=c,
            dsc=dice(p, g),
            jaccard=jaccard(p, g),
            hd95=hd95,
            asd=asd,
            overlap_trivial=trivial,
            surface_undefined=math.isnan(asd),
        ))
    return MetricReport(sample_id=sample_id, per_class=tuple(rows))


def report_csv_rows(report: MetricReport) -> list[list[str]]:
    def fmt(value: float) -> str:
        return "" if math.isnan(value) else repr(float(value))

    return [
        [report.sample_id, str(c.class_index), fmt(c.dsc), fmt(c.jaccard),
         fmt(c.hd95), fmt(c.asd), c.flags()]
        for c in report.per_class
    ]
