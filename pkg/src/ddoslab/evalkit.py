"""Metrics, benign-quantile thresholds and the cross-evaluation matrix."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy.stats import rankdata

from .flowdata import BENIGN, DDOS, FlowTable, ScalerParams, SchemaError, scale_array
from . import ganomaly as gan

DEFAULT_Q = 0.95
SENSITIVITY_QS = (0.90, 0.95, 0.99)


class UndefinedMetricError(ValueError):
    pass


def _as_labels(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.dtype.kind in "US":
        return np.where(arr == "ddos", DDOS, BENIGN)
    return arr.astype(np.int8)


def roc_auc(scores: Sequence[float], labels) -> float:
    """P(random ddos score > random benign score), ties counted one half.

    Computed from average ranks (Mann-Whitney U).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _as_labels(labels)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    n_pos = int(np.sum(y == DDOS))
    n_neg = int(np.sum(y == BENIGN))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both benign and ddos samples")
    ranks = rankdata(s)
    u = ranks[y == DDOS].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0


def confusion(predictions, labels) -> Confusion:
    p = _as_labels(predictions)
    y = _as_labels(labels)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions for {y.size} labels")
    return Confusion(
        tp=int(np.sum((p == DDOS) & (y == DDOS))),
        fp=int(np.sum((p == DDOS) & (y == BENIGN))),
        tn=int(np.sum((p == BENIGN) & (y == BENIGN))),
        fn=int(np.sum((p == BENIGN) & (y == DDOS))),
    )


def f1(predictions, labels) -> float:
    return confusion(predictions, labels).f1


def classify(scores: np.ndarray, threshold: float) -> np.ndarray:
    """Strictly above the threshold is ddos."""
    return np.where(np.asarray(scores) > threshold, DDOS, BENIGN).astype(np.int8)


# ---------------------------------------------------------------- thresholds

@dataclass
class ThresholdReport:
    threshold: float
    q: float
    summary: dict

    def to_dict(self) -> dict:
        return asdict(self)


def quantile_threshold(scores: Sequence[float], q: float = DEFAULT_Q) -> ThresholdReport:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty validation scores")
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    t = float(np.quantile(s, q, method="linear"))
    return ThresholdReport(t, q, {"min": float(s.min()), "median": float(np.median(s)),
                                  "q": t, "max": float(s.max()), "n": int(s.size)})


class Scorer(Protocol):
    column_names: tuple[str, ...]

    def score(self, table: FlowTable) -> np.ndarray: ...


class Detector:
    """A GANomaly model together with the scaler and calibration of one silo.

    The scaler always belongs to the silo that calibrated the detector; foreign
    test sets are pushed through it unchanged.
    """

    def __init__(self, model: gan.GanomalyModel, scaler: ScalerParams, name: str = "",
                 threshold: float | None = None):
        self.model = model
        self.scaler = scaler
        self.name = name
        self.threshold = threshold
        self.threshold_report: ThresholdReport | None = None

    @property
    def column_names(self) -> tuple[str, ...]:
        return self.scaler.column_names

    def raw_scores(self, table: FlowTable) -> np.ndarray:
        if table.column_names != self.scaler.column_names:
            raise SchemaError(f"{table.source!r} columns do not match detector {self.name!r}")
        return gan.raw_score(self.model, scale_array(table.features, self.scaler))

    def score(self, table: FlowTable) -> np.ndarray:
        return gan.normalize_scores(self.model.score_norm, self.raw_scores(table))


def select_threshold(detector: Detector, validation: FlowTable, q: float = DEFAULT_Q
                     ) -> ThresholdReport:
    """Fit the score normalization on validation and take its q-quantile."""
    if len(validation) == 0:
        raise ValueError("empty validation set")
    if validation.n_ddos:
        raise ValueError("validation set must be benign-only")
    gan.fit_score_norm(detector.model, detector.raw_scores(validation))
    report = quantile_threshold(detector.score(validation), q)
    detector.threshold = report.threshold
    detector.threshold_report = report
    return report


def threshold_sensitivity(detector: Detector, validation: FlowTable, test: FlowTable,
                          qs: Sequence[float] = SENSITIVITY_QS) -> dict:
    val_scores = detector.score(validation)
    test_scores = detector.score(test)
    out = {}
    for q in qs:
        t = quantile_threshold(val_scores, q).threshold
        out[str(q)] = {"threshold": t,
                       "f1": confusion(classify(test_scores, t), test.labels).f1}
    return out


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    model_id: str
    dataset_id: str
    roc_auc: float | None
    f1: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    auc_defined: bool = True
    notes: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: Scorer, test: FlowTable, threshold: float | None = None,
             model_id: str = "", dataset_id: str = "") -> EvalReport:
    if tuple(test.column_names) != tuple(model.column_names):
        raise SchemaError(
            f"feature mismatch: model has {len(model.column_names)} columns, "
            f"{test.source!r} has {len(test.column_names)}")
    if threshold is None:
        threshold = model.threshold
    scores = model.score(test)
    cm = confusion(classify(scores, threshold), test.labels)
    notes = []
    try:
        auc: float | None = roc_auc(scores, test.labels)
    except UndefinedMetricError:
        auc = None
        notes.append("roc_auc undefined: single-class test set")
    return EvalReport(model_id or getattr(model, "name", ""), dataset_id or test.source,
                      auc, cm.f1, float(threshold), cm.tp, cm.fp, cm.tn, cm.fn,
                      auc is not None, notes)


@dataclass
class CrossEvalMatrix:
    cells: dict  # (model_id, dataset_id) -> EvalReport
    model_ids: list
    dataset_ids: list
    participants: dict = field(default_factory=dict)  # model_id -> datasets it was trained on

    def cell(self, model_id: str, dataset_id: str) -> EvalReport:
        return self.cells[(model_id, dataset_id)]

    def average_f1(self, model_id: str, datasets: Sequence[str] | None = None) -> float:
        ds = self.dataset_ids if datasets is None else datasets
        return float(np.mean([self.cells[(model_id, d)].f1 for d in ds]))

    def cross_average_f1(self, model_id: str) -> float | None:
        own = set(self.participants.get(model_id, ()))
        ds = [d for d in self.dataset_ids if d not in own]
        return self.average_f1(model_id, ds) if ds else None

    def averages(self) -> dict:
        out = {}
        for m in self.model_ids:
            out[m] = {"average_f1": self.average_f1(m),
                      "cross_average_f1": self.cross_average_f1(m)}
            own = [d for d in self.participants.get(m, ()) if d in self.dataset_ids]
            if len(own) > 1:
                out[m]["participant_average_f1"] = self.average_f1(m, own)
        return out

    def to_dict(self) -> dict:
        return {
            "models": self.model_ids,
            "datasets": self.dataset_ids,
            "participants": self.participants,
            "scaler_rule": "each model scores foreign data with its training silo's scaler",
            "cells": [self.cells[(m, d)].to_dict() for m in self.model_ids for d in self.dataset_ids],
            "averages": self.averages(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def cross_evaluate(models: Mapping[str, Scorer], datasets: Mapping[str, FlowTable],
                   fl_model: Mapping[str, Scorer] | None = None, fl_id: str = "FL",
                   participants: Mapping[str, Sequence[str]] | None = None) -> CrossEvalMatrix:
    """Evaluate every model on every test set.

    ``models`` maps a model id to a detector calibrated on its own silo. ``fl_model``
    maps each dataset id to the global model calibrated at that silo (the
    participant's local scaler and threshold).
    """
    names = None
    for d, t in datasets.items():
        if names is None:
            names = t.column_names
        elif t.column_names != names:
            raise SchemaError(f"dataset {d!r} does not share the common feature set")
    cells = {}
    model_ids = list(models)
    parts = {k: list(v) for k, v in (participants or {}).items()}
    for m, det in models.items():
        parts.setdefault(m, [m] if m in datasets else [])
        for d, test in datasets.items():
            cells[(m, d)] = evaluate(det, test, model_id=m, dataset_id=d)
    if fl_model:
        model_ids.append(fl_id)
        parts.setdefault(fl_id, [d for d in fl_model])
        for d, test in datasets.items():
            det = fl_model.get(d)
            if det is None:
                raise KeyError(f"no calibration of the federated model for dataset {d!r}")
            cells[(fl_id, d)] = evaluate(det, test, model_id=fl_id, dataset_id=d)
    return CrossEvalMatrix(cells, model_ids, list(datasets), parts)


def render_table(matrix: CrossEvalMatrix | dict) -> str:
    """Aligned text table: model, evaluation dataset, ROC-AUC, F1."""
    d = matrix.to_dict() if isinstance(matrix, CrossEvalMatrix) else matrix
    lines = [f"{'Model':<24}{'Evaluation Dataset':<22}{'ROC-AUC':>9}{'F1':>9}"]
    lines.append("-" * len(lines[0]))
    by_model: dict = {}
    for c in d["cells"]:
        by_model.setdefault(c["model_id"], []).append(c)
    for m in d["models"]:
        first = True
        for c in by_model[m]:
            auc = "n/a" if c["roc_auc"] is None else f"{c['roc_auc']:.3f}"
            label = m if first else ""
            lines.append(f"{label:<24}{c['dataset_id']:<22}{auc:>9}{c['f1']:>9.3f}")
            first = False
        avg = d["averages"][m]
        lines.append(f"{'':<24}{'average F1':<22}{'':>9}{avg['average_f1']:>9.3f}")
    return "\n".join(lines)
