"""Semantic change detection metrics on transition confusion matrices.

Category 0 is "no change"; categories 1..K(K-1) enumerate ordered (from, to)
class pairs with from != to. OA and Kappa use the full transition matrix,
IoU/F1 the binary (no-change vs change) collapse, and SeK follows the
separated-kappa convention: zero the no-change/no-change cell, take kappa of
the remainder and scale by exp(IoU - 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NO_CHANGE = 0


@dataclass(frozen=True)
class TransitionScheme:
    num_classes: int

    @property
    def size(self) -> int:
        return 1 + self.num_classes * (self.num_classes - 1)

    def encode(self, src, dst):
        """Category id of (src -> dst); 0 where src == dst. Works on scalars and arrays."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        k = self.num_classes
        cat = 1 + src * (k - 1) + np.where(dst < src, dst, dst - 1)
        return np.where(src == dst, NO_CHANGE, cat)

    def decode(self, category: int) -> tuple[int, int] | None:
        """(src, dst) for a change category, None for no-change."""
        if not 0 <= category < self.size:
            raise ValueError(f"category {category} outside [0, {self.size})")
        if category == NO_CHANGE:
            return None
        src, rest = divmod(category - 1, self.num_classes - 1)
        return src, rest if rest < src else rest + 1


class ConfusionMatrix:
    """Integer counts, rows = ground truth, columns = prediction."""

    def __init__(self, size: int, counts: np.ndarray | None = None):
        self.size = size
        if counts is None:
            counts = np.zeros((size, size), dtype=np.int64)
        counts = np.asarray(counts)
        if counts.shape != (size, size) or (counts < 0).any():
            raise ValueError(f"counts must be a non-negative {size}x{size} matrix")
        self.counts = counts.astype(np.int64)

    def update(self, gt: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        gt = np.asarray(gt, dtype=np.int64).ravel()
        pred = np.asarray(pred, dtype=np.int64).ravel()
        if gt.shape != pred.shape:
            raise ValueError(f"shape mismatch gt {gt.shape} vs pred {pred.shape}")
        if gt.size and (min(gt.min(), pred.min()) < 0 or max(gt.max(), pred.max()) >= self.size):
            raise ValueError(f"category outside [0, {self.size})")
        self.counts += np.bincount(gt * self.size + pred, minlength=self.size**2).reshape(self.size, self.size)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.size != self.size:
            raise ValueError(f"cannot merge {self.size}x{self.size} with {other.size}x{other.size}")
        return ConfusionMatrix(self.size, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _counts(cm) -> np.ndarray:
    return cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm, dtype=np.int64)


def transitions_from_maps(gt_t1, gt_t2, pred_t1, pred_t2, change_pred, num_classes: int) -> ConfusionMatrix:
    """Accumulate the transition confusion matrix for one or more aligned map stacks.

    The predicted category is no-change wherever ``change_pred`` is 0, and also
    where it is 1 but the predicted pair has equal classes.
    """
    scheme = TransitionScheme(num_classes)
    maps = [np.asarray(m) for m in (gt_t1, gt_t2, pred_t1, pred_t2, change_pred)]
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ValueError(f"map shape mismatch {shape} vs {m.shape}")
    for m in maps[:4]:
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise ValueError(f"class id {m.max()} outside [0, {num_classes})")
    gt = scheme.encode(maps[0], maps[1])
    pred = np.where(maps[4] != 0, scheme.encode(maps[2], maps[3]), NO_CHANGE)
    return ConfusionMatrix(scheme.size).update(gt, pred)


def _require_mass(q: np.ndarray) -> int:
    total = int(q.sum())
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    return total


def oa(cm) -> float:
    q = _counts(cm)
    return float(np.trace(q)) / _require_mass(q)


def binary_counts(cm) -> tuple[int, int, int, int]:
    """(TN, FP, FN, TP) of the change class after collapsing to no-change vs change."""
    q = _counts(cm)
    tn = int(q[0, 0])
    fp = int(q[0, 1:].sum())
    fn = int(q[1:, 0].sum())
    tp = int(q[1:, 1:].sum())
    return tn, fp, fn, tp


def binary_iou_f1(cm) -> tuple[float, float]:
    _require_mass(_counts(cm))
    _, fp, fn, tp = binary_counts(cm)
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return tp / (tp + fp + fn), 2 * tp / (2 * tp + fp + fn)


def kappa(cm) -> float:
    q = _counts(cm).astype(np.float64)
    total = _require_mass(q)
    p_o = np.trace(q) / total
    p_e = float(q.sum(axis=1) @ q.sum(axis=0)) / total**2
    if p_e == 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def sek(cm) -> tuple[float, bool]:
    """Separated kappa and a flag that is True when the no-change-free matrix is empty."""
    q = _counts(cm)
    iou_change, _ = binary_iou_f1(q)
    q_hat = q.copy()
    q_hat[NO_CHANGE, NO_CHANGE] = 0
    if q_hat.sum() == 0:
        return 0.0, True
    return math.exp(iou_change - 1.0) * kappa(q_hat), False


@dataclass
class MetricReport:
    oa: float
    iou_change: float
    f1_change: float
    kappa: float
    sek: float
    sek_degenerate: bool = False
    change_degenerate: bool = False
    label: str = ""
    extra: dict = field(default_factory=dict)

    COLUMNS = ("Kappa(%)", "Sek(%)", "IoU(%)", "F1(%)", "OA(%)")

    def row(self) -> list[str]:
        return [f"{100 * v:.2f}" for v in (self.kappa, self.sek, self.iou_change, self.f1_change, self.oa)]

    def as_dict(self) -> dict[str, str]:
        return {
            "label": self.label,
            "kappa": repr(self.kappa),
            "sek": repr(self.sek),
            "iou_change": repr(self.iou_change),
            "f1_change": repr(self.f1_change),
            "oa": repr(self.oa),
            "sek_degenerate": str(self.sek_degenerate).lower(),
            "change_degenerate": str(self.change_degenerate).lower(),
            **{k: str(v) for k, v in self.extra.items()},
        }


def report(cm, label: str = "") -> MetricReport:
    q = _counts(cm)
    iou_change, f1_change = binary_iou_f1(q)
    s, degenerate = sek(q)
    _, fp, fn, tp = binary_counts(q)
    return MetricReport(
        oa=oa(q),
        iou_change=iou_change,
        f1_change=f1_change,
        kappa=kappa(q),
        sek=s,
        sek_degenerate=degenerate,
        change_degenerate=tp + fp + fn == 0,
        label=label,
    )


def format_table(reports: list[MetricReport], label_header: str = "Method") -> str:
    """Fixed-width table in the column order Kappa, Sek, IoU, F1, OA."""
    width = max([len(label_header)] + [len(r.label) for r in reports])
    lines = ["\t".join([label_header.ljust(width), *MetricReport.COLUMNS])]
    for r in reports:
        lines.append("\t".join([r.label.ljust(width), *r.row()]))
    return "\n".join(lines) + "\n"


def format_report(reports: list[MetricReport], label_header: str = "Method") -> str:
    """Human table followed by one key=value block per report."""
    out = [format_table(reports, label_header)]
    for r in reports:
        out.append("")
        out.append(f"[{r.label or 'report'}]")
        out.extend(f"{k}={v}" for k, v in r.as_dict().items())
    return "\n".join(out) + "\n"
