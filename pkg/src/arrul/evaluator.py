"""Autoregressive rollout over whole bearings and the RMSE / MAE / Score metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .armodel import ARModel, init_x2, shift_update
from .datapipe import WindowedBearing
from .errors import ContractViolation

ROLLOUT_MODES = ("carryover", "ones", "teacher")


@dataclass
class PredictionCurve:
    bearing_id: str
    acq_index: np.ndarray      # acquisition index each prediction refers to
    predicted: np.ndarray
    truth: np.ndarray | None
    clamped: bool = False

    def __len__(self) -> int:
        return self.predicted.size


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    score: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise ContractViolation(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    if pred.size == 0:
        raise ContractViolation("metrics need at least one point")
    return pred, truth


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def score_terms(pred, truth) -> np.ndarray:
    """Per-point penalty with E = truth - pred; E <= 0 uses exp(-E/13) - 1, E > 0 uses exp(E/10) - 1."""
    pred, truth = _pair(pred, truth)
    e = truth - pred
    return np.where(e <= 0, np.expm1(-e / 13.0), np.expm1(e / 10.0))


def score(pred, truth) -> float:
    return float(np.sum(score_terms(pred, truth)))


def compute_metrics(pred, truth) -> MetricsReport:
    pred, truth = _pair(pred, truth)
    return MetricsReport(rmse(pred, truth), mae(pred, truth), score(pred, truth), int(pred.size))


def rollout(model: ARModel, bearing: WindowedBearing, init_mode: str = "carryover",
            ablation: str = "none", clamp: bool = False) -> PredictionCurve:
    """Predict every non-padding window of ``bearing`` segment by segment.

    Segment 0 starts from an all-ones HI window. Later segments start from
    the running window (``carryover``), from ones, or from the true labels
    (``teacher``, diagnostics only). With ``ablation='non-ar'`` the HI window
    stays all ones and is never shifted. Parameters are not modified.
    """
    if init_mode not in ROLLOUT_MODES:
        raise ContractViolation(f"unknown rollout mode {init_mode!r}; expected one of {ROLLOUT_MODES}")
    cfg = model.config
    if (cfg.k, cfg.points) != (bearing.k, bearing.points):
        raise ContractViolation(
            f"model (k={cfg.k}, S={cfg.points}) does not match bearing {bearing.id} "
            f"(k={bearing.k}, S={bearing.points})")
    if init_mode == "teacher" and not bearing.has_labels:
        raise ContractViolation("teacher rollout needs labels")
    k = cfg.k
    preds = np.empty(bearing.length)
    x2 = np.ones((1, k))
    for j in range(bearing.n):
        seg = bearing.segment_windows(j)
        if seg.start >= bearing.length:
            break
        if ablation == "non-ar":
            x2 = np.ones((1, k))
        elif init_mode == "teacher":
            x2 = init_x2("teacher", k, 1, label_windows=bearing.label_window(seg.start)[None, :])
        elif init_mode == "ones" or j == 0:
            x2 = init_x2("ones", k, 1)
        else:
            x2 = init_x2("carryover", k, 1, previous=x2)
        for w in seg:
            if w >= bearing.length:
                break
            y = model.forward(bearing.window_input(w)[None], x2, training=False)
            preds[w] = y[0]
            if ablation != "non-ar":
                x2 = shift_update(x2, y)
    if clamp:
        preds = np.clip(preds, 0.0, 1.0)
    truth = bearing.labels[k: k + bearing.length].copy() if bearing.has_labels else None
    return PredictionCurve(bearing.id, np.arange(k, k + bearing.length), preds, truth, clamp)


def evaluate(model: ARModel, bearing: WindowedBearing, init_mode: str = "carryover",
             ablation: str = "none") -> tuple[MetricsReport, PredictionCurve]:
    """Roll out and score against the labels (first k acquisitions and padding excluded)."""
    if not bearing.has_labels:
        raise ContractViolation(f"bearing {bearing.id} has no labels to score against")
    curve = rollout(model, bearing, init_mode=init_mode, ablation=ablation)
    return compute_metrics(curve.predicted, curve.truth), curve


def aggregate(reports: Sequence[MetricsReport]) -> dict:
    """Arithmetic mean of each metric over bearings; ``n`` is the total point count."""
    if not reports:
        raise ContractViolation("nothing to aggregate")
    return {
        "mae": float(np.mean([r.mae for r in reports])),
        "n": int(sum(r.n for r in reports)),
        "rmse": float(np.mean([r.rmse for r in reports])),
        "score": float(np.mean([r.score for r in reports])),
    }


def write_prediction_csv(curve: PredictionCurve, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["acq_index", "predicted_hi", "true_hi"])
        for i, idx in enumerate(curve.acq_index):
            true = "" if curve.truth is None else repr(float(curve.truth[i]))
            w.writerow([int(idx), repr(float(curve.predicted[i])), true])
    return path


def read_prediction_csv(path: str | Path) -> PredictionCurve:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    idx = np.array([int(r["acq_index"]) for r in rows])
    pred = np.array([float(r["predicted_hi"]) for r in rows])
    truth = None
    if rows and all(r["true_hi"] != "" for r in rows):
        truth = np.array([float(r["true_hi"]) for r in rows])
    return PredictionCurve(path.stem, idx, pred, truth)
