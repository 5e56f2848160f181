"""Segmentation metrics: Dice coefficient and 95th-percentile Hausdorff.

HD95 follows the max-of-directed convention with nearest-rank percentiles.
Distances are Euclidean between boundary pixels, scaled per-axis by the
pixel spacing. Empty-mask conventions: Dice of two empty masks is 1.0;
HD95 with exactly one empty mask is the image diagonal, with both empty it
is NaN (callers exclude NaNs from averages and count them).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError


def dsc(pred, truth) -> float:
    pred = np.asarray(pred) > 0
    truth = np.asarray(truth) > 0
    if pred.shape != truth.shape:
        raise UsageError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    p = int(pred.sum())
    t = int(truth.sum())
    if p + t == 0:
        return 1.0
    inter = int(np.logical_and(pred, truth).sum())
    return 2.0 * inter / (p + t)


def boundary_pixels(mask) -> np.ndarray:
    """Coordinates of foreground pixels with a background 4-neighbor.

    The image border counts as background, so edge foreground pixels are
    boundary pixels.
    """
    m = np.asarray(mask) > 0
    padded = np.pad(m, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def _nearest_rank_percentile(sorted_vals: np.ndarray, q: float) -> float:
    n = sorted_vals.size
    rank = max(1, int(math.ceil(q * n)))
    return float(sorted_vals[rank - 1])


def _directed_hd95(src: np.ndarray, dst: np.ndarray) -> float:
    diff = src[:, None, :] - dst[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    nearest = d.min(axis=1)
    nearest.sort()
    return _nearest_rank_percentile(nearest, 0.95)


def hd95(pred, truth, spacing=(1.0, 1.0)) -> float:
    pred = np.asarray(pred) > 0
    truth = np.asarray(truth) > 0
    if pred.shape != truth.shape:
        raise UsageError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    p_empty = not pred.any()
    t_empty = not truth.any()
    if p_empty and t_empty:
        return float("nan")
    sy, sx = float(spacing[0]), float(spacing[1])
    if p_empty or t_empty:
        h, w = pred.shape
        return math.hypot(h * sy, w * sx)
    scale = np.array([sy, sx])
    bp = boundary_pixels(pred) * scale
    bt = boundary_pixels(truth) * scale
    return max(_directed_hd95(bp, bt), _directed_hd95(bt, bp))


@dataclass
class MetricsReport:
    """Per-(arm, center) evaluation summary."""

    hd95_units: str = "mm"
    rows: dict = field(default_factory=dict)  # (arm, center) -> row dict

    def add(self, arm: str, center: int, dice_scores, hd_scores):
        dice_scores = [float(v) for v in dice_scores]
        hd_defined = [float(v) for v in hd_scores if not math.isnan(v)]
        self.rows[(arm, int(center))] = {
            "dsc": sum(dice_scores) / len(dice_scores),
            "hd95": (sum(hd_defined) / len(hd_defined)
                     if hd_defined else float("nan")),
            "hd95_undefined": len(hd_scores) - len(hd_defined),
            "n_eval": len(dice_scores),
        }

    def arm_mean_dsc(self, arm: str) -> float:
        vals = [r["dsc"] for (a, _), r in self.rows.items() if a == arm]
        if not vals:
            raise UsageError(f"no rows for arm {arm!r}")
        return sum(vals) / len(vals)

    def get(self, arm: str, center: int):
        return self.rows[(arm, int(center))]

    def arms(self):
        return sorted({a for a, _ in self.rows})

    def centers(self):
        return sorted({c for _, c in self.rows})

    def to_dict(self):
        table = []
        for (arm, center) in sorted(self.rows):
            row = dict(self.rows[(arm, center)])
            row["arm"] = arm
            row["center"] = center
            if math.isnan(row["hd95"]):
                row["hd95"] = None
            table.append(row)
        # Best privacy-preserving method per center (bolding stand-in).
        best = {}
        for center in self.centers():
            fed = [(self.rows[(a, center)]["dsc"], a)
                   for a, c in self.rows if c == center
                   and a in ("ffe", "asym")]
            if fed:
                best[str(center)] = max(fed)[1]
        return {"hd95_units": self.hd95_units, "rows": table,
                "best_federated_by_center": best}

    @classmethod
    def from_dict(cls, d):
        rep = cls(hd95_units=d.get("hd95_units", "mm"))
        for row in d["rows"]:
            rep.rows[(row["arm"], int(row["center"]))] = {
                "dsc": float(row["dsc"]),
                "hd95": (float("nan") if row["hd95"] is None
                         else float(row["hd95"])),
                "hd95_undefined": int(row.get("hd95_undefined", 0)),
                "n_eval": int(row["n_eval"]),
            }
        return rep
