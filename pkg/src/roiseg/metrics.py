"""Whole-volume evaluation: Dice coefficient, voxel recall, average surface
distance in millimeters, and mean ± std aggregation.

Surfaces are foreground voxels with at least one 6-connected background
neighbor, with the volume border counting as background.  A prediction that
misses the target entirely (zero recall) scores a fixed 50 mm surface
distance instead of an undefined one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .volume import ShapeError, Volume

FAILED_ASD_MM = 50.0
BINARIZE_AT = 0.5


@dataclass
class SurfaceSet:
    points_mm: np.ndarray     # (n, 3) float64, index * spacing
    voxels: np.ndarray        # (n, 3) int64

    def __len__(self):
        return len(self.points_mm)


@dataclass
class CaseScores:
    case: str
    dsc: float
    recall: float
    asd: float
    failed: bool

    def to_json(self):
        return {"case": self.case, "dsc": float(self.dsc), "recall": float(self.recall),
                "asd": float(self.asd), "failed": bool(self.failed)}


def _binary(v) -> np.ndarray:
    arr = v.arr3() if isinstance(v, Volume) else np.asarray(v)
    return arr > BINARIZE_AT


def dsc(p, g) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both are empty."""
    pb, gb = _binary(p), _binary(g)
    if pb.shape != gb.shape:
        raise ShapeError(f"dsc needs identical shapes, got {pb.shape} and {gb.shape}")
    denom = int(pb.sum()) + int(gb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pb, gb).sum()) / denom


def recall(p, g) -> float:
    """|P∩G| / |G|."""
    pb, gb = _binary(p), _binary(g)
    if pb.shape != gb.shape:
        raise ShapeError(f"recall needs identical shapes, got {pb.shape} and {gb.shape}")
    n_g = int(gb.sum())
    if n_g == 0:
        raise ValueError("recall undefined for an empty reference mask")
    return int(np.logical_and(pb, gb).sum()) / n_g


def extract_surface(v, spacing) -> SurfaceSet:
    """Foreground voxels with a 6-connected background neighbor (border = background)."""
    vb = _binary(v)
    padded = np.pad(vb, 1)
    core = (padded[2:, 1:-1, 1:-1] & padded[:-2, 1:-1, 1:-1]
            & padded[1:-1, 2:, 1:-1] & padded[1:-1, :-2, 1:-1]
            & padded[1:-1, 1:-1, 2:] & padded[1:-1, 1:-1, :-2])
    surf = vb & ~core
    voxels = np.argwhere(surf).astype(np.int64)
    points = voxels.astype(np.float64) * np.asarray(spacing, np.float64)
    return SurfaceSet(points, voxels)


def asd(p, g, spacing) -> float:
    """Symmetric average nearest-surface distance in mm; 50.0 on zero recall."""
    if recall(p, g) == 0.0:
        return FAILED_ASD_MM
    sp = extract_surface(p, spacing)
    sg = extract_surface(g, spacing)
    d_pg = cKDTree(sg.points_mm).query(sp.points_mm)[0]
    d_gp = cKDTree(sp.points_mm).query(sg.points_mm)[0]
    return float((d_pg.sum() + d_gp.sum()) / (len(sp) + len(sg)))


def score_case(name, pred, gt, spacing) -> CaseScores:
    """All three metrics for one case; `failed` marks zero-recall predictions."""
    r = recall(pred, gt)
    return CaseScores(name, dsc(pred, gt), r, asd(pred, gt, spacing), failed=(r == 0.0))


def aggregate(cases) -> dict:
    """Mean ± population std per metric, plus the failure count."""
    if not cases:
        raise ValueError("cannot aggregate an empty case list")
    out = {"n_cases": len(cases), "n_failed": sum(1 for c in cases if c.failed)}
    for key in ("dsc", "recall", "asd"):
        vals = np.array([getattr(c, key) for c in cases], np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def summary_table(cases, agg) -> str:
    """Plain-text per-case table with the aggregate footer."""
    lines = [f"{'case':<20} {'DSC':>7} {'recall':>7} {'ASD mm':>8} {'failed':>6}"]
    for c in cases:
        lines.append(f"{c.case:<20} {c.dsc:>7.4f} {c.recall:>7.4f} {c.asd:>8.3f} "
                     f"{str(c.failed):>6}")
    lines.append(f"{'mean ± std':<20} {agg['dsc']['mean']:>7.4f} {agg['recall']['mean']:>7.4f} "
                 f"{agg['asd']['mean']:>8.3f} {agg['n_failed']:>6}")
    lines.append(f"{'':<20} ±{agg['dsc']['std']:>6.4f} ±{agg['recall']['std']:>6.4f} "
                 f"±{agg['asd']['std']:>7.3f}")
    return "\n".join(lines) + "\n"
