"""Confusion-matrix metrics for binary and semantic change detection.

All metrics accumulate one global confusion matrix over the evaluation
set. Pixels whose reference is background (``y_bcd == 255``) are ignored
everywhere. Ratios with a zero denominator are reported as 0 and the
metric name is added to ``flags``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .net.complexity import complexity_table, model_macs

BACKGROUND = 255


@dataclass
class ConfusionMatrix:
    """``counts[ref, pred]``."""

    counts: np.ndarray
    names: Optional[Sequence[str]] = None
    ignored: int = 0

    @classmethod
    def zeros(cls, k: int, names=None) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64), names)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred: np.ndarray, ref: np.ndarray, valid: Optional[np.ndarray] = None) -> "ConfusionMatrix":
        pred, ref = np.asarray(pred), np.asarray(ref)
        if pred.shape != ref.shape:
            raise ValueError(f"prediction {pred.shape} and reference {ref.shape} differ in shape")
        if valid is None:
            valid = np.ones(ref.shape, dtype=bool)
        p, r = pred[valid].astype(np.int64), ref[valid].astype(np.int64)
        if p.size and (min(p.min(), r.min()) < 0 or max(p.max(), r.max()) >= self.k):
            raise ValueError(f"labels outside [0, {self.k})")
        self.counts += np.bincount(r * self.k + p, minlength=self.k * self.k).reshape(self.k, self.k)
        self.ignored += int(valid.size - valid.sum())
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.names, self.ignored + other.ignored)


def _div(num: float, den: float, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return float(num / den)


def overall_accuracy(cm: ConfusionMatrix, flags: Optional[list] = None) -> float:
    return _div(np.trace(cm.counts), cm.total, "oa", flags if flags is not None else [])


def kappa(cm: ConfusionMatrix, flags: Optional[list] = None) -> float:
    """Cohen's kappa ``(p_o - p_e) / (1 - p_e)``; 0 (flagged) when ``p_e == 1``
    or the matrix is empty."""
    flags = flags if flags is not None else []
    n = cm.total
    if n == 0:
        flags.append("kc")
        return 0.0
    c = cm.counts.astype(np.float64)
    p_o = np.trace(c) / n
    p_e = float(np.dot(c.sum(axis=0), c.sum(axis=1))) / (n * n)
    return _div(p_o - p_e, 1.0 - p_e, "kc", flags)


@dataclass
class MetricsReport:
    rec: Optional[float] = None
    pre: Optional[float] = None
    f1: Optional[float] = None
    oa: Optional[float] = None
    kc: Optional[float] = None
    clf_oa: Optional[float] = None
    clf_kc: Optional[float] = None
    cd_kc: Optional[float] = None
    tr_oa: Optional[float] = None
    tr_kc: Optional[float] = None
    params: Optional[int] = None
    macs: Optional[int] = None
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_text(self) -> str:
        rows = [(k, v) for k, v in self.to_dict().items() if k != "flags"]
        width = max(len(k) for k, _ in rows) if rows else 0
        lines = [f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}" for k, v in rows]
        if self.flags:
            lines.append(f"{'flags':<{width}}  {','.join(self.flags)}")
        return "\n".join(lines)


def binary_from_cm(cm: ConfusionMatrix, report: Optional[MetricsReport] = None) -> MetricsReport:
    r = report or MetricsReport()
    (tn, fp), (fn, tp) = cm.counts
    fl = r.flags
    r.rec = _div(tp, tp + fn, "rec", fl)
    r.pre = _div(tp, tp + fp, "pre", fl)
    r.f1 = _div(2 * r.rec * r.pre, r.rec + r.pre, "f1", fl)
    r.oa = overall_accuracy(cm, fl)
    r.kc = kappa(cm, fl)
    return r


def binary_confusion(pred_bcd: np.ndarray, y_bcd: np.ndarray) -> ConfusionMatrix:
    y = np.asarray(y_bcd)
    return ConfusionMatrix.zeros(2, ("unchanged", "changed")).update(pred_bcd, y, y != BACKGROUND)


def binary_metrics(pred_bcd: np.ndarray, y_bcd: np.ndarray) -> MetricsReport:
    """Rec/Pre/F1/OA/KC with "changed" as the positive class."""
    return binary_from_cm(binary_confusion(pred_bcd, y_bcd))


def transition_labels(bcd: np.ndarray, y_osm: np.ndarray, lcm_opt: np.ndarray, n_classes: int) -> np.ndarray:
    """0 for unchanged, else ``1 + (from - 1) * C + (to - 1)`` with
    ``from = y_osm`` and ``to`` the optical class."""
    bcd, y_osm, lcm_opt = (np.asarray(a).astype(np.int64) for a in (bcd, y_osm, lcm_opt))
    pair = 1 + (np.clip(y_osm, 1, None) - 1) * n_classes + (np.clip(lcm_opt, 1, None) - 1)
    return np.where(bcd == 1, pair, 0)


@dataclass
class SCDAccumulator:
    """Global confusion matrices for the semantic-change metrics."""

    n_classes: int
    clf: ConfusionMatrix = None
    cd: ConfusionMatrix = None
    tr: ConfusionMatrix = None

    def __post_init__(self):
        c = self.n_classes
        self.clf = self.clf or ConfusionMatrix.zeros(c)
        self.cd = self.cd or ConfusionMatrix.zeros(2)
        self.tr = self.tr or ConfusionMatrix.zeros(1 + c * c)

    def update(self, pred_lcm_opt, y_opt_full, pred_bcd, y_bcd, y_osm) -> "SCDAccumulator":
        y_bcd = np.asarray(y_bcd)
        valid = y_bcd != BACKGROUND
        # classes 1..C map to rows 0..C-1
        self.clf.update(np.asarray(pred_lcm_opt) - 1, np.asarray(y_opt_full) - 1, valid)
        self.cd.update(pred_bcd, y_bcd, valid)
        c = self.n_classes
        self.tr.update(transition_labels(pred_bcd, y_osm, pred_lcm_opt, c),
                       transition_labels(np.where(valid, y_bcd, 0), y_osm, y_opt_full, c), valid)
        return self

    def merge(self, other: "SCDAccumulator") -> "SCDAccumulator":
        return SCDAccumulator(self.n_classes, self.clf + other.clf, self.cd + other.cd, self.tr + other.tr)

    def report(self, r: Optional[MetricsReport] = None) -> MetricsReport:
        r = r or MetricsReport()
        fl = r.flags
        r.clf_oa = overall_accuracy(self.clf, fl)
        r.clf_kc = kappa(self.clf, fl)
        r.cd_kc = kappa(self.cd, fl)
        r.tr_oa = overall_accuracy(self.tr, fl)
        r.tr_kc = kappa(self.tr, fl)
        return r


def scd_metrics(pred_lcm_opt, y_opt_full, pred_bcd, y_bcd, y_osm, n_classes: int = 7) -> MetricsReport:
    """clfOA/clfKC on optical mapping, cdKC on the binary map and
    trOA/trKC on the transition labels."""
    return SCDAccumulator(n_classes).update(pred_lcm_opt, y_opt_full, pred_bcd, y_bcd, y_osm).report()


def format_table(rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> str:
    """Aligned plain-text table of dict rows."""
    if not rows:
        return ""
    cols = list(columns or rows[0].keys())

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def complexity_report(model, h: int, w: int, n_obj=None, n_ins=None) -> tuple[MetricsReport, list[dict]]:
    """Params/MACs of ``model`` plus the attention-variant comparison table."""
    rep = MetricsReport(params=model.param_count(), macs=model_macs(model, h, w, n_obj, n_ins))
    return rep, complexity_table(model, h, w, n_obj, n_ins)
