"""Evaluation and training diagnostics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import TaskStream, union_test_set
from .errors import ContractError, EvaluationError
from .models import AcganModel, bind, class_logits, classify, features
from .params import ParameterVector

PROJECTION_DIM = 16
PROJECTION_SEED = 20230201
FID_RIDGE = 1e-6


@dataclass
class EvalReport:
    accuracy: float
    labels: list[int]
    confusion: np.ndarray            # [predicted, true] counts in ``labels`` order
    per_class_accuracy: dict[int, float]
    round_index: int = -1
    local_accuracy: dict[int, float] = field(default_factory=dict)

    @property
    def num_samples(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "labels": list(self.labels),
            "confusion": self.confusion.tolist(),
            "per_class_accuracy": {str(k): v for k, v in self.per_class_accuracy.items()},
            "round": self.round_index,
            "local_accuracy": {str(k): v for k, v in self.local_accuracy.items()},
        }


def evaluate_predictions(pred: np.ndarray, true: np.ndarray, labels: Sequence[int],
                         round_index: int = -1) -> EvalReport:
    if len(true) == 0:
        raise EvaluationError("empty test set")
    labels = list(labels)
    pos = {lab: i for i, lab in enumerate(labels)}
    missing = sorted(set(int(t) for t in true) - set(pos))
    if missing:
        raise EvaluationError(f"model has no output for true classes {missing}")
    conf = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p_, t_ in zip(pred, true):
        conf[pos[int(p_)], pos[int(t_)]] += 1
    per_class = {}
    for lab in sorted(set(int(t) for t in true)):
        j = pos[lab]
        per_class[lab] = float(conf[j, j] / conf[:, j].sum())
    acc = float(np.trace(conf) / len(true))
    return EvalReport(acc, labels, conf, per_class, round_index)


def evaluate_model(model: AcganModel, x: np.ndarray, y: np.ndarray,
                   round_index: int = -1) -> EvalReport:
    pred = np.asarray(model.labels)[classify(model, x).argmax(axis=1)]
    return evaluate_predictions(pred, np.asarray(y), model.labels, round_index)


def evaluate_global(model: AcganModel, streams: Sequence[TaskStream],
                    up_to_task: int | None = None, round_index: int = -1) -> EvalReport:
    """Task-agnostic accuracy over every client's test split for tasks so far."""
    x, y = union_test_set(streams, up_to_task)
    if len(y) == 0:
        raise EvaluationError("empty test union")
    return evaluate_model(model, x, y, round_index)


def ce_gradient_norm(model: AcganModel, batch: tuple[np.ndarray, Sequence[int]]) -> float:
    """L2 norm of d(mean CE)/d(class-head weight matrix), by autodiff."""
    x, labels = batch
    tape = Tape()
    p = bind(model.params, tape, ("cls.W",))
    logits = class_logits(p, features(p, Tensor(np.asarray(x, dtype=np.float64)),
                                      model.arch.leak))
    loss = ad.cross_entropy(ad.softmax(logits),
                            ad.one_hot(model.label_index(labels), model.num_classes))
    ad.backward(loss)
    return float(np.linalg.norm(p["cls.W"].grad))


def _feature_map(x: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    if d <= PROJECTION_DIM:
        return x
    proj = np.random.default_rng(PROJECTION_SEED).standard_normal((d, PROJECTION_DIM))
    return x @ proj / math.sqrt(d)


def frechet_distance(mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray,
                     cov2: np.ndarray) -> float:
    diff = mu1 - mu2
    covmean = linalg.sqrtm(cov1 @ cov2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(covmean))
    return max(value, 0.0)


def proxy_fid(real: np.ndarray, generated: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two sample sets.

    Raw coordinates are used up to 16 dimensions; wider data goes through a
    fixed seeded random projection to 16. Both covariances get a 1e-6 ridge.
    """
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    if real.shape[0] == 1 and real.ndim == 2 and real.shape[1] > 1 and generated.shape[0] == 1:
        real, generated = real.T, generated.T
    if len(real) < 2 or len(generated) < 2:
        raise ContractError("proxy_fid needs at least two samples per set")
    if real.shape[1] != generated.shape[1]:
        raise ContractError(f"dimension mismatch {real.shape[1]} vs {generated.shape[1]}")
    fr, fg = _feature_map(real), _feature_map(generated)
    ridge = FID_RIDGE * np.eye(fr.shape[1])
    cov_r = np.atleast_2d(np.cov(fr, rowvar=False)) + ridge
    cov_g = np.atleast_2d(np.cov(fg, rowvar=False)) + ridge
    return frechet_distance(fr.mean(axis=0), cov_r, fg.mean(axis=0), cov_g)


def spike_ratio(trace: Sequence[float], round_length: int) -> float:
    """Mean loss over the first 5% of each round divided by the mean over its last 50%.

    Averaged over every complete round in ``trace``.
    """
    trace = np.asarray(trace, dtype=np.float64)
    if round_length < 1 or len(trace) < round_length:
        raise ContractError("trace shorter than one round")
    head = max(1, int(math.ceil(0.05 * round_length)))
    tail = max(1, round_length // 2)
    ratios = []
    for r in range(len(trace) // round_length):
        seg = trace[r * round_length:(r + 1) * round_length]
        ratios.append(seg[:head].mean() / seg[-tail:].mean())
    return float(np.mean(ratios))


def post_sync_local_accuracy(client, broadcast_params: ParameterVector) -> float:
    """Accuracy of the broadcast model on the client's current-task test split."""
    model = client.model.copy()
    model.load(broadcast_params)
    x, y = client.data.test_set()
    known = np.isin(y, model.labels)
    if model.num_classes == 0:
        return 0.0
    pred = np.asarray(model.labels)[classify(model, x).argmax(axis=1)]
    return float(np.mean((pred == y) & known))


@dataclass
class DiagnosticTrace:
    client: int
    classification_loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    fid_points: list[tuple[int, float]] = field(default_factory=list)

    def extend(self, ce: Sequence[float], gn: Sequence[float]) -> None:
        self.classification_loss.extend(ce)
        self.grad_norm.extend(gn)


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def confusion_csv(path: str | Path, report: EvalReport) -> None:
    """Grid with predicted labels down the rows and true labels across."""
    header = ["predicted\\true"] + [str(k) for k in report.labels]
    rows = [[str(k)] + [int(v) for v in report.confusion[i]]
            for i, k in enumerate(report.labels)]
    write_csv(path, header, rows)
