"""Segmentation metrics: Dice, IoU/mIoU, Hausdorff distance, ellipse fit, HC.

Conventions:

* Dice and IoU of two empty masks are 1.0; one empty mask gives 0.0.
* The boundary of a mask is the set of foreground pixels with at least one
  4-neighbour in the background; pixels outside the image count as
  background.
* ``hausdorff(..., variant="max")`` is the classical symmetric Hausdorff
  distance. ``variant="modified"`` is the Dubuisson-Jain modified distance
  (the larger of the two mean directed distances).
* Aggregate standard deviations are population (ddof=0) values.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import Ellipse

METRIC_COLUMNS = ("dice", "iou", "miou", "hausdorff_mm", "hc_mm", "entropy")
CSV_COLUMNS = ("id",) + METRIC_COLUMNS


class MetricError(ValueError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def iou(a, b) -> float:
    a, b = _pair(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def binary_miou(a, b) -> float:
    """Mean of foreground and background IoU for one pair."""
    a, b = _pair(a, b)
    return 0.5 * (iou(a, b) + iou(~a, ~b))


def miou(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise MetricError("miou of an empty list")
    return float(np.mean([binary_miou(a, b) for a, b in pairs]))


def boundary_pixels(mask) -> np.ndarray:
    """(K, 2) array of (row, col) boundary coordinates."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def hausdorff(a, b, pixel_size_mm: float = 1.0, variant: str = "max") -> float:
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise MetricError("undefined Hausdorff distance: empty mask")
    pa, pb = boundary_pixels(a), boundary_pixels(b)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    if variant == "max":
        d = max(d_ab.max(), d_ba.max())
    elif variant == "modified":
        d = max(d_ab.mean(), d_ba.mean())
    else:
        raise ValueError(f"unknown Hausdorff variant {variant!r}")
    return float(d) * pixel_size_mm


# ---------------------------------------------------------------------------
# ellipse fitting

def largest_component(mask) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(m)
    if n <= 1:
        return m
    sizes = ndimage.sum(m, labels, index=range(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def edge_points(mask) -> np.ndarray:
    """(x, y) points halfway between each boundary pixel and its background neighbours."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1)
    pts = []
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = padded[1 + dy:1 + dy + m.shape[0], 1 + dx:1 + dx + m.shape[1]]
        ys, xs = np.nonzero(m & ~nb)
        pts.append(np.column_stack([xs + 0.5 * dx, ys + 0.5 * dy]))
    return np.concatenate(pts).astype(np.float64)


def fit_conic(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Direct least-squares ellipse-specific conic fit (Halir-Flusser form).

    Returns ``(A, B, C, D, E, F)`` of ``A x^2 + B xy + C y^2 + D x + E y + F = 0``.
    """
    D1 = np.column_stack([x * x, x * y, y * y])
    D2 = np.column_stack([x, y, np.ones_like(x)])
    S1, S2, S3 = D1.T @ D1, D1.T @ D2, D2.T @ D2
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError as exc:
        raise MetricError("degenerate point set for conic fit") from exc
    M = S1 + S2 @ T
    M = np.array([M[2] / 2, -M[1], M[0] / 2])
    vals, vecs = np.linalg.eig(M)
    vecs = np.real(vecs)
    cond = 4 * vecs[0] * vecs[2] - vecs[1] ** 2
    ok = np.nonzero(cond > 0)[0]
    if ok.size == 0:
        raise MetricError("no ellipse-consistent solution in conic fit")
    a1 = vecs[:, ok[0]]
    return np.concatenate([a1, T @ a1])


def conic_to_ellipse(conic) -> Ellipse:
    A, B, C, D, E, F = conic
    disc = B * B - 4 * A * C
    if disc >= 0:
        raise MetricError("conic is not an ellipse")
    cx, cy = np.linalg.solve([[2 * A, B], [B, 2 * C]], [-D, -E])
    f0 = A * cx * cx + B * cx * cy + C * cy * cy + D * cx + E * cy + F
    vals, vecs = np.linalg.eigh([[A, B / 2], [B / 2, C]])
    axes2 = -f0 / vals
    if np.any(axes2 <= 0):
        raise MetricError("conic is an imaginary ellipse")
    axes = np.sqrt(axes2)
    major = int(np.argmax(axes))
    vx, vy = vecs[:, major]
    return Ellipse(float(cx), float(cy), float(axes[major]), float(axes[1 - major]),
                   math.atan2(vy, vx)).canonical()


def fit_ellipse(mask) -> Ellipse:
    """Fit an ellipse to the boundary of the largest connected component."""
    comp = largest_component(mask)
    if len(boundary_pixels(comp)) < 5:
        raise MetricError("need at least 5 boundary pixels to fit an ellipse")
    return fit_ellipse_points(edge_points(comp))


def fit_ellipse_points(pts) -> Ellipse:
    """Least-squares ellipse through an (K, 2) array of (x, y) points."""
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) < 5:
        raise MetricError("need at least 5 points to fit an ellipse")
    # normalise for conditioning, then map the conic back
    mx, my = pts.mean(axis=0)
    s = max(pts[:, 0].std(), pts[:, 1].std(), 1e-12)
    e = conic_to_ellipse(fit_conic((pts[:, 0] - mx) / s, (pts[:, 1] - my) / s))
    return Ellipse(e.cx * s + mx, e.cy * s + my, e.a * s, e.b * s, e.theta)


def head_circumference(e: Ellipse, pixel_size_mm: float) -> float:
    """Ramanujan's perimeter approximation, converted to mm."""
    if pixel_size_mm <= 0:
        raise ValueError("pixel size must be positive")
    a, b = e.a, e.b
    return math.pi * (3 * (a + b) - math.sqrt((3 * a + b) * (a + 3 * b))) * pixel_size_mm


def mean_entropy(prob) -> float:
    """Mean per-pixel binary entropy in bits; low values mean a sharp map."""
    p = np.clip(np.asarray(prob, dtype=np.float64), 1e-12, 1 - 1e-12)
    return float(np.mean(-(p * np.log2(p) + (1 - p) * np.log2(1 - p))))


# ---------------------------------------------------------------------------
# reports

@dataclass
class SampleMetrics:
    id: str
    dice: float = math.nan
    iou: float = math.nan
    miou: float = math.nan
    hausdorff_mm: float = math.nan
    hc_mm: float = math.nan
    entropy: float = math.nan


@dataclass
class MetricsReport:
    per_sample: list[SampleMetrics]
    aggregate: dict[str, dict[str, float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = aggregate(self.per_sample)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in sorted(self.meta.items()):
            buf.write(f"# {k}={v}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in self.per_sample:
            writer.writerow([s.id] + [_fmt(getattr(s, c)) for c in METRIC_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        meta, rows = {}, []
        lines = text.splitlines()
        body = []
        for line in lines:
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            else:
                body.append(line)
        for rec in csv.DictReader(body):
            rows.append(SampleMetrics(rec["id"], *[_parse(rec[c]) for c in METRIC_COLUMNS]))
        return cls(rows, meta=meta)

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "aggregate": self.aggregate,
                           "per_sample": [_json_row(s) for s in self.per_sample]},
                          indent=2, sort_keys=True, allow_nan=False)

    def save(self, csv_path, json_path=None) -> None:
        Path(csv_path).write_text(self.to_csv())
        if json_path is not None:
            Path(json_path).write_text(self.to_json())


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _parse(s: str) -> float:
    return math.nan if s == "" else float(s)


def _json_row(s: SampleMetrics) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(s).items()}


def aggregate(rows: list[SampleMetrics]) -> dict[str, dict[str, float]]:
    """Mean, population std and count per metric over finite values."""
    out = {}
    for col in METRIC_COLUMNS:
        vals = np.array([getattr(r, col) for r in rows], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        if vals.size:
            out[col] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}
    return out


def evaluate_sample(sample_id: str, pred, gt, pixel_size_mm: float | None = None, prob=None,
                    hausdorff_variant: str = "max", fit_hc: bool = False) -> SampleMetrics:
    """Metrics for one prediction. Undefined quantities are left as NaN."""
    pred, gt = _pair(pred, gt)
    row = SampleMetrics(sample_id, dice(pred, gt), iou(pred, gt), binary_miou(pred, gt))
    px = 1.0 if pixel_size_mm is None else pixel_size_mm
    if pred.any() and gt.any():
        row.hausdorff_mm = hausdorff(pred, gt, px, hausdorff_variant)
    else:
        warnings.warn(f"{sample_id}: Hausdorff undefined (empty mask)", stacklevel=2)
    if fit_hc and pixel_size_mm is not None:
        try:
            row.hc_mm = head_circumference(fit_ellipse(pred), pixel_size_mm)
        except MetricError as exc:
            warnings.warn(f"{sample_id}: no HC ({exc})", stacklevel=2)
    if prob is not None:
        row.entropy = mean_entropy(prob)
    return row


def report(ids, predictions, ground_truth, pixel_sizes=None, probs=None,
           hausdorff_variant: str = "max", fit_hc: bool = False, meta=None) -> MetricsReport:
    ids = list(ids)
    predictions = list(predictions)
    ground_truth = list(ground_truth)
    n = len(ids)
    pixel_sizes = [None] * n if pixel_sizes is None else list(pixel_sizes)
    probs = [None] * n if probs is None else list(probs)
    if not (len(predictions) == len(ground_truth) == len(pixel_sizes) == len(probs) == n):
        raise MetricError("report inputs have different lengths")
    rows = []
    for sid, p, g, px, pr in zip(ids, predictions, ground_truth, pixel_sizes, probs):
        if g is None:
            warnings.warn(f"{sid}: no ground truth; metrics left blank", stacklevel=2)
            rows.append(SampleMetrics(sid, entropy=mean_entropy(pr) if pr is not None else math.nan))
            continue
        rows.append(evaluate_sample(sid, p, g, px, pr, hausdorff_variant, fit_hc))
    return MetricsReport(rows, meta=dict(meta or {}))
