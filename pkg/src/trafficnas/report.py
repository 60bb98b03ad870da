"""Classification metrics and the raw/ratio hardware comparison tables."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cost import CostReport, DivByZero, efficiency_ratios, format_ratio

logger = logging.getLogger(__name__)


class LengthMismatch(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def render(self, class_names: Optional[Sequence[str]] = None) -> str:
        names = list(class_names or range(self.num_classes))
        width = max(6, max(len(str(n)) for n in names) + 1)
        lines = [" " * width + "".join(f"{str(n):>{width}}" for n in names)]
        for name, row in zip(names, self.counts):
            lines.append(f"{str(name):<{width}}" + "".join(f"{v:>{width}}" for v in row))
        return "\n".join(lines)


def confusion(true_labels, predicted_labels, num_classes: Optional[int] = None) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise LengthMismatch(f"{t.size} true labels vs {p.size} predictions")
    if num_classes is None:
        num_classes = int(max(t.max(initial=-1), p.max(initial=-1))) + 1
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: list
    averaging: str = "weighted"

    def render(self, class_names: Optional[Sequence[str]] = None) -> str:
        names = list(class_names or [str(i) for i in range(len(self.per_class))])
        width = max(12, max(len(n) for n in names) + 1)
        lines = [f"{'class':<{width}} {'prec':>8} {'rec':>8} {'f1':>8} {'support':>8}"]
        for name, m in zip(names, self.per_class):
            lines.append(f"{name:<{width}} {100 * m.precision:>8.2f} {100 * m.recall:>8.2f} "
                         f"{100 * m.f1:>8.2f} {m.support:>8}")
        lines.append("")
        lines.append(f"accuracy  {100 * self.accuracy:.2f}%")
        lines.append(f"precision {100 * self.precision:.2f}% ({self.averaging})")
        lines.append(f"recall    {100 * self.recall:.2f}% ({self.averaging})")
        lines.append(f"f1        {100 * self.f1:.2f}% ({self.averaging})")
        return "\n".join(lines)


def _harmonic(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def metrics(cm: ConfusionMatrix, averaging: str = "weighted") -> MetricsReport:
    """Per-class and averaged precision/recall/F1; undefined ratios count as 0."""
    if averaging not in ("weighted", "macro"):
        raise ValueError("averaging must be 'weighted' or 'macro'")
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(counts)
    colsum, rowsum = counts.sum(axis=0), counts.sum(axis=1)
    per_class = []
    undefined = []
    for i in range(cm.num_classes):
        if colsum[i] == 0 or rowsum[i] == 0:
            undefined.append(i)
        p = diag[i] / colsum[i] if colsum[i] else 0.0
        r = diag[i] / rowsum[i] if rowsum[i] else 0.0
        per_class.append(ClassMetrics(float(p), float(r), _harmonic(p, r), int(rowsum[i])))
    if undefined:
        logger.warning("precision or recall undefined for classes %s; counted as 0", undefined)

    if averaging == "weighted":
        w = rowsum / total
    else:
        w = np.full(cm.num_classes, 1.0 / cm.num_classes)
    agg = {name: float(sum(wi * getattr(m, name) for wi, m in zip(w, per_class)))
           for name in ("precision", "recall", "f1")}
    return MetricsReport(float(diag.sum() / total), agg["precision"], agg["recall"], agg["f1"],
                         per_class, averaging)


@dataclass
class ReportRow:
    """One model in a comparison; scores are fractions in [0, 1] or None when unpublished."""

    name: str
    cost: CostReport
    accuracy: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None

    @classmethod
    def from_metrics(cls, name: str, cost: CostReport, m: Optional[MetricsReport]) -> "ReportRow":
        if m is None:
            return cls(name, cost)
        return cls(name, cost, m.accuracy, m.precision, m.recall, m.f1)

    def scores(self):
        return [self.accuracy, self.precision, self.recall, self.f1]


SCORE_HEADERS = ["Acc. (%)", "Prec. (%)", "Rec. (%)", "F1 (%)"]
RAW_HEADERS = ["Params (M)", "Max Tensor Size", "FLOPs (M)", "Flash (Mbytes)", "RAM (Kbytes)"]
RATIO_HEADERS = ["Params (Ratio)", "Max Tensor (Ratio)", "FLOPs (Ratio)", "Flash (Ratio)", "RAM (Ratio)"]
RATIO_KEYS = ["params", "max_tensor", "flops", "flash_bytes", "ram_bytes"]


def _score_cell(v: Optional[float]) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def _g(v: float) -> str:
    return f"{v:.4f}".rstrip("0").rstrip(".") if v != int(v) else f"{int(v)}"


def raw_cells(c: CostReport) -> list[str]:
    return [_g(c.params / 1e6), f"{c.max_tensor:,}", _g(c.flops / 1e6),
            _g(c.flash_bytes / 1e6), _g(c.ram_bytes / 1e3)]


@dataclass
class ComparisonTables:
    headers_raw: list
    raw: list
    headers_ratio: list
    ratio: list
    ratios: dict = field(default_factory=dict)  # name -> unrounded ratios

    def _render(self, headers, rows) -> str:
        table = [headers] + rows
        widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        return "\n".join([fmt(headers), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows])

    def render(self) -> str:
        return self._render(self.headers_raw, self.raw) + "\n\n" + self._render(self.headers_ratio, self.ratio)

    def to_csv(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(self.headers_raw)
        w.writerows(self.raw)
        w.writerow([])
        w.writerow(self.headers_ratio)
        w.writerows(self.ratio)
        return buf.getvalue()


def comparison_report(rows: Sequence[ReportRow], ours_index: int) -> ComparisonTables:
    ours = rows[ours_index]
    if any(v <= 0 for v in ours.cost.as_dict().values()):
        raise DivByZero(f"reference row {ours.name!r} has a zero cost field")
    raw, ratio, ratios = [], [], {}
    for row in rows:
        scores = [_score_cell(v) for v in row.scores()]
        raw.append([row.name] + scores + raw_cells(row.cost))
        r = efficiency_ratios(row.cost, ours.cost)
        ratios[row.name] = r
        ratio.append([row.name] + scores + [format_ratio(r[k]) for k in RATIO_KEYS])
    return ComparisonTables(["Method"] + SCORE_HEADERS + RAW_HEADERS, raw,
                            ["Method"] + SCORE_HEADERS + RATIO_HEADERS, ratio, ratios)


BASELINE_FIELDS = ["name", "acc", "prec", "rec", "f1", "params_m", "max_tensor", "flops_m", "flash_mb", "ram_kb"]


def _opt_pct(s: str) -> Optional[float]:
    s = s.strip()
    return None if s in ("-", "") else float(s) / 100


def read_baselines(text: str) -> list[ReportRow]:
    """Parse comparison rows in published units: percent, M params, M FLOPs, MB, KB."""
    rows = []
    reader = csv.DictReader(line for line in io.StringIO(text) if line.strip() and not line.startswith("#"))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != BASELINE_FIELDS:
        raise ValueError(f"baselines header must be {','.join(BASELINE_FIELDS)}")
    for rec in reader:
        rec = {k.strip(): v for k, v in rec.items()}
        cost = CostReport(
            params=round(float(rec["params_m"]) * 1e6),
            max_tensor=int(rec["max_tensor"].replace("_", "")),
            flops=round(float(rec["flops_m"]) * 1e6),
            flash_bytes=round(float(rec["flash_mb"]) * 1e6),
            ram_bytes=round(float(rec["ram_kb"]) * 1e3),
        )
        rows.append(ReportRow(rec["name"].strip(), cost, _opt_pct(rec["acc"]), _opt_pct(rec["prec"]),
                              _opt_pct(rec["rec"]), _opt_pct(rec["f1"])))
    return rows


def load_baselines(path=None) -> list[ReportRow]:
    if path is None:
        path = Path(__file__).parent / "data" / "table1_baselines.csv"
    return read_baselines(Path(path).read_text())
