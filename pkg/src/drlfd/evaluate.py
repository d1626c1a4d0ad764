"""Position/orientation error metrics and table-style reports.

Position errors are Euclidean distances reported in millimeters. Orientation
errors are reported both as the unitless quaternion distance
``1 - <q, q_hat>^2`` and as the rotation angle in degrees. ``Loss`` is the
mean absolute error over the raw 7-vectors.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from drlfd import geometry
from drlfd.dataset import SequenceSample, window_samples
from drlfd.validation import ValidationError

TABLE_COLUMNS = ("MaxPE", "AvePE", "MaxOE", "AveOE", "Loss")


@dataclass(frozen=True)
class Metrics:
    max_pe: float  # mm
    ave_pe: float  # mm
    max_oe: float  # quaternion distance
    ave_oe: float
    max_oe_deg: float
    ave_oe_deg: float
    loss: float
    n: int

    def row(self) -> tuple:
        return (self.max_pe, self.ave_pe, self.max_oe, self.ave_oe, self.loss)

    def violations(self) -> list[str]:
        out = []
        if self.max_pe < self.ave_pe or self.max_oe < self.ave_oe or self.max_oe_deg < self.ave_oe_deg:
            out.append("max below average")
        if min(self.row()) < 0:
            out.append("negative metric")
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def _errors(preds, truths):
    preds = np.asarray(preds, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if preds.shape != truths.shape:
        raise ValidationError(f"length/shape mismatch: {preds.shape} vs {truths.shape}", field="preds", rule="length")
    if preds.ndim != 2 or preds.shape[1] != 7:
        raise ValidationError(f"expected (n, 7) arrays, got {preds.shape}", field="preds", rule="shape")
    if len(preds) == 0:
        raise ValidationError("empty prediction set", field="preds", rule="length")
    e_p = np.linalg.norm(preds[:, 4:] - truths[:, 4:], axis=1) * 1000.0
    e_o = geometry.quat_distance(truths[:, :4], preds[:, :4])
    e_deg = geometry.quat_angle_deg(truths[:, :4], preds[:, :4])
    return preds, truths, e_p, e_o, e_deg


def compute_metrics(preds, truths) -> Metrics:
    """Max/average position and orientation errors over paired State7 rows."""
    preds, truths, e_p, e_o, e_deg = _errors(preds, truths)
    return Metrics(max_pe=float(e_p.max()), ave_pe=float(e_p.mean()), max_oe=float(e_o.max()),
                   ave_oe=float(e_o.mean()), max_oe_deg=float(e_deg.max()), ave_oe_deg=float(e_deg.mean()),
                   loss=float(np.mean(np.abs(preds - truths))), n=len(preds))


@dataclass
class EvalReport:
    aggregate: Metrics
    baseline: Metrics
    per_trial: dict = field(default_factory=dict)
    protocol: dict = field(default_factory=dict)

    def violations(self) -> list[str]:
        out = [f"aggregate: {v}" for v in self.aggregate.violations()]
        out += [f"baseline: {v}" for v in self.baseline.violations()]
        for tid, m in self.per_trial.items():
            out += [f"trial {tid}: {v}" for v in m.violations()]
        n = sum(m.n for m in self.per_trial.values())
        if self.per_trial:
            weighted = sum(m.ave_pe * m.n for m in self.per_trial.values()) / n
            if n != self.aggregate.n or abs(weighted - self.aggregate.ave_pe) > 1e-9 * max(1.0, weighted):
                out.append("aggregate inconsistent with per-trial metrics")
        return out

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "aggregate": self.aggregate.to_dict(),
                "baseline": self.baseline.to_dict(),
                "per_trial": {k: m.to_dict() for k, m in self.per_trial.items()}}


def eval_items(model, samples: Sequence, indices: Optional[Sequence[int]] = None) -> list:
    """Model inputs for a test set: Samples, or windows for recurrent models."""
    subset = list(samples) if indices is None else [samples[i] for i in indices]
    cfg = getattr(model, "config", None)
    if cfg is not None and cfg.recurrent:
        return window_samples(subset, cfg.window)
    return subset


def _predict(model, items) -> np.ndarray:
    if hasattr(model, "predict"):
        return np.asarray(model.predict(items), dtype=float)
    if callable(model):
        return np.asarray(model(items), dtype=float)
    raise TypeError("model must provide predict(items) or be callable")


def evaluate(model, test: Sequence[int], dataset: Sequence, protocol: Optional[dict] = None,
             items: Optional[list] = None) -> EvalReport:
    """Per-trial and aggregate metrics on ``dataset[test]`` plus the persistence baseline.

    The persistence baseline predicts the current Arm-2 pose as the next one
    and is scored on exactly the same targets as the model.
    """
    if items is None:
        if not len(test):
            raise ValidationError("empty test set", field="test", rule="nonempty")
        items = eval_items(model, dataset, test)
    if not items:
        raise ValidationError("no evaluable items in the test set", field="test", rule="nonempty")
    preds = _predict(model, items)
    last = [it.last if isinstance(it, SequenceSample) else it for it in items]
    truths = np.stack([it.target for it in last])
    current = np.stack([it.arm2_state for it in last])
    trial_ids = np.array([it.trial_id for it in last])
    per_trial = {}
    for tid in sorted(set(trial_ids)):
        mask = trial_ids == tid
        per_trial[str(tid)] = compute_metrics(preds[mask], truths[mask])
    return EvalReport(aggregate=compute_metrics(preds, truths), baseline=compute_metrics(current, truths),
                      per_trial=per_trial, protocol=dict(protocol or {}))


def report_table(reports: Sequence[EvalReport], labels: Sequence[str], baseline_row: bool = False):
    """Render reports as ``(text_table, csv_text)``; one row per label."""
    reports = list(reports)
    labels = list(labels)
    if not reports:
        raise ValidationError("no reports to tabulate", field="reports", rule="nonempty")
    if len(reports) != len(labels):
        raise ValidationError(f"{len(labels)} labels for {len(reports)} reports", field="labels", rule="length")
    rows = [(lbl, rep.aggregate.row()) for lbl, rep in zip(labels, reports)]
    if baseline_row:
        rows.append(("persistence", reports[0].baseline.row()))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("label",) + TABLE_COLUMNS)
    for lbl, vals in rows:
        w.writerow([lbl] + [repr(float(v)) for v in vals])
    width = max(12, max(len(lbl) for lbl, _ in rows) + 2)
    lines = ["Model".ljust(width) + "".join(c.rjust(12) for c in TABLE_COLUMNS)]
    lines.append("-" * len(lines[0]))
    for lbl, vals in rows:
        lines.append(lbl.ljust(width) + "".join(f"{v:12.4g}" for v in vals))
    lines.append("PE in mm; OE as quaternion distance 1 - <q, q_hat>^2; Loss = MAE on raw 7-vectors")
    return "\n".join(lines) + "\n", buf.getvalue()


def parse_report_csv(text: str) -> list[tuple[str, dict]]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header[1:]) != TABLE_COLUMNS:
        raise ValidationError(f"unexpected report header {header}", field="csv", rule="header")
    return [(row[0], {c: float(x) for c, x in zip(TABLE_COLUMNS, row[1:])}) for row in reader]
