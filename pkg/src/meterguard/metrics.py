"""Regression metrics for disaggregation output and table-style reporting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from meterguard.errors import DataError, DegenerateInputError, EmptyInputError, ShapeError

CSV_COLUMNS = ("appliance_id", "condition_tag", "mae", "rmse", "sae", "corr", "corr_defined")


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ShapeError(f"prediction length {p.size} != truth length {t.size}")
    if p.size == 0:
        raise EmptyInputError("metrics need at least one sample")
    return p, t


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def sae(pred, truth) -> float:
    """Normalized signal aggregate error, ``|sum(pred) - sum(truth)| / sum(truth)``."""
    p, t = _pair(pred, truth)
    total = float(np.sum(t))
    if total <= 0:
        raise DegenerateInputError(f"SAE needs a positive true total, got {total}")
    return abs(float(np.sum(p)) - total) / total


def corr(pred, truth) -> float | None:
    """Pearson correlation, or ``None`` when either input is constant."""
    p, t = _pair(pred, truth)
    dp = p - p.mean()
    dt = t - t.mean()
    denom = math.sqrt(float(np.sum(dp * dp)) * float(np.sum(dt * dt)))
    if denom == 0.0:
        return None
    return max(-1.0, min(1.0, float(np.sum(dp * dt)) / denom))


@dataclass(frozen=True)
class MetricsRow:
    appliance_id: str
    condition_tag: str
    mae: float
    rmse: float
    sae: float
    corr: float | None

    @property
    def corr_defined(self) -> bool:
        return self.corr is not None

    @classmethod
    def evaluate(cls, appliance_id: str, condition_tag: str, pred, truth) -> MetricsRow:
        return cls(appliance_id, condition_tag, mae(pred, truth), rmse(pred, truth), sae(pred, truth), corr(pred, truth))

    def as_record(self) -> list[str]:
        return [
            self.appliance_id,
            self.condition_tag,
            repr(self.mae),
            repr(self.rmse),
            repr(self.sae),
            "" if self.corr is None else repr(self.corr),
            "1" if self.corr_defined else "0",
        ]

    @classmethod
    def from_record(cls, record: Sequence[str]) -> MetricsRow:
        if len(record) != len(CSV_COLUMNS):
            raise DataError(f"expected {len(CSV_COLUMNS)} columns, got {len(record)}")
        aid, tag, m, r, s, c, defined = record
        if defined not in ("0", "1"):
            raise DataError(f"corr_defined must be 0 or 1, got {defined!r}")
        return cls(aid, tag, float(m), float(r), float(s), float(c) if defined == "1" else None)


@dataclass(frozen=True)
class AverageRow:
    condition_tag: str
    mae: float
    rmse: float
    sae: float
    corr: float | None
    corr_skipped: int


def average(rows: Iterable[MetricsRow], condition_tag: str | None = None) -> AverageRow:
    """Arithmetic mean over appliance rows; undefined correlations are skipped and counted."""
    rows = [r for r in rows if condition_tag is None or r.condition_tag == condition_tag]
    if not rows:
        raise EmptyInputError("no rows to average")
    defined = [r.corr for r in rows if r.corr is not None]
    return AverageRow(
        condition_tag if condition_tag is not None else rows[0].condition_tag,
        float(np.mean([r.mae for r in rows])),
        float(np.mean([r.rmse for r in rows])),
        float(np.mean([r.sae for r in rows])),
        float(np.mean(defined)) if defined else None,
        len(rows) - len(defined),
    )


def attack_succeeded(clean: MetricsRow, perturbed: MetricsRow) -> bool:
    """Errors grew and the correlation magnitude shrank."""
    if perturbed.mae <= clean.mae or perturbed.rmse <= clean.rmse or perturbed.sae <= clean.sae:
        return False
    if clean.corr is None or perturbed.corr is None:
        return perturbed.corr is None and clean.corr is not None
    return abs(perturbed.corr) < abs(clean.corr)


def _fmt(v: float | None) -> str:
    return "undef" if v is None else f"{v:.4f}"


def format_report(rows: Sequence[MetricsRow], clean_tag: str = "clean") -> str:
    """Plain-text table: one column per appliance plus an average column.

    Each metric is listed per condition; for non-clean conditions a
    ``delta`` line gives the change relative to ``clean_tag``.
    """
    appliances = list(dict.fromkeys(r.appliance_id for r in rows))
    conditions = list(dict.fromkeys(r.condition_tag for r in rows))
    table = {(r.appliance_id, r.condition_tag): r for r in rows}
    header = ["metric", "condition"] + appliances + ["Ave"]
    lines = []
    for metric in ("mae", "rmse", "sae", "corr"):
        for cond in conditions:
            cells = []
            for a in appliances:
                row = table.get((a, cond))
                cells.append("-" if row is None else _fmt(getattr(row, metric)))
            avg = average([r for r in rows if r.condition_tag == cond])
            cells.append(_fmt(getattr(avg, metric)))
            lines.append([metric.upper(), cond] + cells)
            if cond != clean_tag and any((a, clean_tag) in table for a in appliances):
                deltas = []
                for a in appliances:
                    base, row = table.get((a, clean_tag)), table.get((a, cond))
                    if base is None or row is None:
                        deltas.append("-")
                        continue
                    b, v = getattr(base, metric), getattr(row, metric)
                    deltas.append("undef" if b is None or v is None else f"{v - b:+.4f}")
                lines.append(["", "delta"] + deltas + [""])
    widths = [max(len(str(x)) for x in col) for col in zip(header, *lines)]
    out = ["  ".join(str(c).ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in [header] + lines]
    verdicts = []
    for cond in conditions:
        if cond == clean_tag:
            continue
        for a in appliances:
            base, row = table.get((a, clean_tag)), table.get((a, cond))
            if base is not None and row is not None:
                verdicts.append(f"{a} [{cond}]: {'attack effective' if attack_succeeded(base, row) else 'attack not effective'}")
    return "\n".join(out + verdicts)
