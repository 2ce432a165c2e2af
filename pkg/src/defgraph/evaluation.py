"""Registration metrics and method comparison tables."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import InvalidArgument

THRESHOLDS = (0.01, 0.05)
COLUMNS = ("method", "ATE_3D", "delta_0.01", "delta_0.05", "T_avg")


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 3 or p.shape[-1] != 3:
        raise InvalidArgument(f"pred and gt must be matching (T, N, 3) arrays, got {p.shape} and {g.shape}")
    return p, g


def per_frame_ate(pred, gt):
    p, g = _pair(pred, gt)
    return np.abs(p - g).sum(axis=-1).mean(axis=1)


def ate3d(pred, gt):
    """Mean over frames and points of the L1 distance to ground truth."""
    p, g = _pair(pred, gt)
    return float(np.abs(p - g).sum(axis=-1).mean())


def delta_inlier(pred, gt, threshold):
    """Fraction of (frame, point) pairs whose Euclidean error is strictly below ``threshold``."""
    if threshold <= 0:
        raise InvalidArgument("threshold must be positive")
    p, g = _pair(pred, gt)
    return float((np.linalg.norm(p - g, axis=-1) < threshold).mean())


@dataclass
class MetricsReport:
    ate3d: float
    delta_001: float
    delta_005: float
    t_avg: float | None = None
    per_frame_ate: list = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.delta_001 <= self.delta_005 <= 1.0):
            raise InvalidArgument("inlier fractions must satisfy 0 <= delta_0.01 <= delta_0.05 <= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        missing = {"ate3d", "delta_001", "delta_005"} - set(d)
        if missing:
            raise InvalidArgument(f"report is missing fields {sorted(missing)}")
        return cls(float(d["ate3d"]), float(d["delta_001"]), float(d["delta_005"]),
                   None if d.get("t_avg") is None else float(d["t_avg"]),
                   [float(x) for x in d.get("per_frame_ate", [])])


def evaluate(pred, gt, per_frame_seconds=None) -> MetricsReport:
    t_avg = None if per_frame_seconds is None else float(np.mean(per_frame_seconds))
    return MetricsReport(
        ate3d=ate3d(pred, gt),
        delta_001=delta_inlier(pred, gt, THRESHOLDS[0]),
        delta_005=delta_inlier(pred, gt, THRESHOLDS[1]),
        t_avg=t_avg,
        per_frame_ate=per_frame_ate(pred, gt).tolist(),
    )


def _rows(reports):
    if not reports:
        raise InvalidArgument("need at least one report")
    items = sorted(reports.items(), key=lambda kv: (kv[1].ate3d, kv[0]))
    return [(name, r.ate3d, r.delta_001, r.delta_005, r.t_avg) for name, r in items]


def compare(reports: dict):
    """Return ``(text_table, csv_text)`` with one row per method, best ATE first."""
    rows = _rows(reports)
    header = ("Method", "ATE_3D↓", "δ_0.01↑", "δ_0.05↑", "T_avg↓")
    cells = [header] + [
        (name, f"{a:.4f}", f"{d1:.3f}", f"{d5:.3f}", "-" if t is None else f"{t:.3f}")
        for name, a, d1, d5, t in rows
    ]
    widths = [max(len(r[c]) for r in cells) for c in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in cells]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for name, a, d1, d5, t in rows:
        writer.writerow([name, repr(a), repr(d1), repr(d5), "" if t is None else repr(t)])
    return "\n".join(lines), buf.getvalue()


def parse_table(csv_text):
    """Inverse of the CSV half of :func:`compare`: ``{method: MetricsReport}``."""
    reader = csv.reader(io.StringIO(csv_text))
    header = next(reader, None)
    if header is None or tuple(header) != COLUMNS:
        raise InvalidArgument(f"table header must be {COLUMNS}")
    out = {}
    for row in reader:
        if len(row) != len(COLUMNS):
            raise InvalidArgument(f"malformed table row {row!r}")
        name, a, d1, d5, t = row
        out[name] = MetricsReport(float(a), float(d1), float(d5), float(t) if t else None)
    return out


def final_frame_ate(pred, gt):
    return float(per_frame_ate(pred, gt)[-1])
