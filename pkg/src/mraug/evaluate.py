"""Per-volume evaluation and vendor-level aggregation of segmentation quality."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .errors import Undefined
from .imaging import Volume

METRICS = ("dice", "hd", "avd", "l_recall", "l_f1", "fpr")
HEADERS = {"dice": "Dice", "hd": "HD", "avd": "AVD", "l_recall": "L-Recall", "l_f1": "L-F1", "fpr": "FPR"}


@dataclass
class MetricsRecord:
    subject: str
    vendor: str
    dice: float
    hd: float
    avd: float
    l_recall: float
    l_f1: float
    fpr: float

    def __post_init__(self):
        for name in ("dice", "l_recall", "l_f1"):
            v = getattr(self, name)
            if not math.isnan(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("hd", "avd", "fpr"):
            v = getattr(self, name)
            if not math.isnan(v) and v < 0:
                raise ValueError(f"{name}={v} is negative")

    def values(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


def _safe(fn, *args) -> float:
    try:
        return float(fn(*args))
    except Undefined:
        return math.nan


def score_volume(pred, gt, brain, spacing, subject="", vendor="") -> MetricsRecord:
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    return MetricsRecord(
        subject=subject, vendor=vendor,
        dice=metrics.dice(pred, gt),
        hd=_safe(metrics.hausdorff, pred, gt, spacing),
        avd=_safe(metrics.avd, pred, gt),
        l_recall=_safe(metrics.lesion_recall, pred, gt),
        l_f1=_safe(metrics.lesion_f1, pred, gt),
        fpr=_safe(metrics.fpr, pred, gt, brain),
    )


@dataclass
class Aggregate:
    mean: float
    std: float
    n: int
    excluded: int


@dataclass
class MetricsReport:
    records: list[MetricsRecord] = field(default_factory=list)
    name: str = ""

    def vendors(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.vendor not in seen:
                seen.append(r.vendor)
        return seen

    def aggregate(self, vendor: str | None = None) -> dict[str, Aggregate]:
        """Mean and sample std per metric; undefined values are excluded and counted."""
        rows = [r for r in self.records if vendor is None or r.vendor == vendor]
        out = {}
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in rows], dtype=np.float64)
            ok = vals[~np.isnan(vals)]
            mean = float(ok.mean()) if ok.size else math.nan
            std = float(ok.std(ddof=1)) if ok.size > 1 else (0.0 if ok.size == 1 else math.nan)
            out[m] = Aggregate(mean, std, int(ok.size), int(vals.size - ok.size))
        return out

    def vendor_means(self, metric: str = "dice") -> dict[str, float]:
        return {v: self.aggregate(v)[metric].mean for v in self.vendors()}

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["subject", "vendor", *[HEADERS[m] for m in METRICS]])
            for r in self.records:
                w.writerow([r.subject, r.vendor, *[_fmt(getattr(r, m)) for m in METRICS]])
        return path

    def to_text(self) -> str:
        lines = [f"# {self.name}" if self.name else "# evaluation",
                 "subject\tvendor\t" + "\t".join(HEADERS[m] for m in METRICS)]
        for r in self.records:
            lines.append(f"{r.subject}\t{r.vendor}\t" + "\t".join(_fmt(getattr(r, m)) for m in METRICS))
        for vendor in self.vendors() + [None]:
            agg = self.aggregate(vendor)
            lines.append(f"[{vendor or 'all'}]")
            for m in METRICS:
                a = agg[m]
                lines.append(f"  {HEADERS[m]}: {_fmt(a.mean)} ± {_fmt(a.std)} (n={a.n}, excluded={a.excluded})")
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.4f}"


def evaluate_model(predict: Callable[[Volume], np.ndarray], volumes: Sequence[Volume], name: str = "") -> MetricsReport:
    """Score ``predict(volume)`` against each labeled volume's lesion mask.

    ``predict`` is typically ``functools.partial(predict_volume, params)``.
    """
    records = []
    for v in volumes:
        if v.lesion_mask is None or v.brain_mask is None:
            raise ValueError(f"volume {v.meta.get('subject', '?')} lacks ground-truth masks")
        pred = predict(v)
        records.append(score_volume(pred, v.lesion_mask, v.brain_mask, v.spacing,
                                    str(v.meta.get("subject", "")), str(v.meta.get("vendor", ""))))
    return MetricsReport(records, name)
