"""
Evaluation metrics

Confusion matrix over a task's declared label set, accuracy, per-class F1 and
macro-F1. Classes with no true and no predicted instances score F1 = 0 and
still count toward the macro mean.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from ehr_rag.core_model import PredictionInstance
from ehr_rag.errors import DataError, ParameterError


@dataclass(frozen=True)
class ConfusionMatrix:
    """rows = true label, columns = predicted label, both in `labels` order"""

    labels: Tuple[int, ...]
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        size = len(self.labels)
        if counts.shape != (size, size):
            raise ParameterError(f"counts shape {counts.shape} does not match {size} labels")
        if (counts < 0).any():
            raise ParameterError("confusion counts must be nonnegative")
        object.__setattr__(self, "labels", tuple(int(label) for label in self.labels))
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_predictions(cls, labels: Sequence[int], y_true: Sequence[int], y_pred: Sequence[int]) -> "ConfusionMatrix":
        """
        Build from paired true / predicted labels

        Raises:
            ParameterError: length mismatch or a label outside `labels`
        """
        if len(y_true) != len(y_pred):
            raise ParameterError("y_true and y_pred differ in length")
        allowed = set(labels)
        stray = sorted({int(v) for v in list(y_true) + list(y_pred)} - allowed)
        if stray:
            raise ParameterError(f"labels {stray} are outside the declared label set {list(labels)}")
        if not y_true:
            return cls(tuple(labels), np.zeros((len(labels), len(labels)), dtype=np.int64))
        return cls(tuple(labels), confusion_matrix(list(y_true), list(y_pred), labels=list(labels)))

    def to_rows(self) -> List[Dict[str, int]]:
        rows = []
        for i, true_label in enumerate(self.labels):
            row = {"true_label": true_label}
            for j, predicted in enumerate(self.labels):
                row[f"pred_{predicted}"] = int(self.counts[i, j])
            rows.append(row)
        return rows


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float
    per_class_f1: Dict[int, float]
    support: int

    def to_dict(self) -> Dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_f1": {str(label): value for label, value in self.per_class_f1.items()},
            "support": self.support,
        }


def compute_metrics(matrix: ConfusionMatrix) -> Metrics:
    """
    Accuracy, per-class F1 and macro-F1 from a confusion matrix

    Per-class F1 is 2*TP / (predicted + true), which equals 2PR/(P+R) and is
    0 when the class never occurs on either side.

    Raises:
        DataError: all-zero matrix
    """
    total = matrix.total
    if total == 0:
        raise DataError("cannot compute metrics from an empty confusion matrix")

    counts = matrix.counts
    true_positives = np.diag(counts)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1)

    per_class = {}
    for i, label in enumerate(matrix.labels):
        denominator = int(predicted[i] + actual[i])
        per_class[label] = 0.0 if denominator == 0 else 2.0 * int(true_positives[i]) / denominator

    return Metrics(
        accuracy=int(true_positives.sum()) / total,
        macro_f1=float(sum(per_class.values()) / len(per_class)),
        per_class_f1=per_class,
        support=total,
    )


def score_predictions(
    predictions: pd.DataFrame,
    instances: Sequence[PredictionInstance],
    labels: Optional[Sequence[int]] = None,
) -> Dict[str, Tuple[ConfusionMatrix, Metrics]]:
    """
    Join predictions with labelled instances and score each method

    Predictions are matched on (subject_id, prediction_time). Unmatched
    predictions are ignored.

    Args:
        predictions: Frame with subject_id, prediction_time, method, predicted_label
        instances: Labelled instances
        labels: Declared label set; defaults to every label seen on either side

    Returns:
        {method: (confusion matrix, metrics)}, methods in sorted order

    Raises:
        DataError: no prediction matches a labelled instance
    """
    truth = pd.DataFrame(
        [
            {"subject_id": inst.subject_id, "prediction_time": inst.prediction_time, "true_label": inst.true_label}
            for inst in instances
            if inst.true_label is not None
        ],
        columns=["subject_id", "prediction_time", "true_label"],
    )
    truth["prediction_time"] = pd.to_datetime(truth["prediction_time"], utc=True)
    predictions = predictions.assign(
        subject_id=predictions["subject_id"].astype(str),
        prediction_time=pd.to_datetime(predictions["prediction_time"], utc=True),
    )
    joined = predictions.merge(truth, on=["subject_id", "prediction_time"], how="inner")
    if joined.empty:
        raise DataError("no prediction matches a labelled instance")

    if labels is None:
        labels = sorted({int(v) for v in joined["true_label"]} | {int(v) for v in joined["predicted_label"]})

    scores = {}
    for method, group in sorted(joined.groupby("method"), key=lambda item: item[0]):
        matrix = ConfusionMatrix.from_predictions(
            labels, [int(v) for v in group["true_label"]], [int(v) for v in group["predicted_label"]]
        )
        scores[method] = (matrix, compute_metrics(matrix))
    return scores
