"""Zero-shot and generalized zero-shot prediction and evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from dsva.core import ClassAttributeMatrix, InputError, SplitSpec, ValidationError


def harmonic_mean(seen: float, unseen: float) -> float:
    if seen + unseen == 0:
        return 0.0
    return 2.0 * seen * unseen / (seen + unseen)


def zsl_predict(scores) -> int:
    """Index of the best unseen class; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise InputError("no candidate classes")
    return int(np.argmax(scores))


def gzsl_predict(scores, seen_flags, gamma: float) -> int:
    """Calibrated stacking: subtract ``gamma`` from every seen-class score, then argmax."""
    if gamma < 0:
        raise ValidationError("gamma must be >= 0")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise InputError("no candidate classes")
    return int(np.argmax(scores - gamma * np.asarray(seen_flags, dtype=np.float64)))


def gzsl_predict_rows(scores: np.ndarray, seen_flags, gamma: float) -> np.ndarray:
    if gamma < 0:
        raise ValidationError("gamma must be >= 0")
    return np.argmax(np.asarray(scores) - gamma * np.asarray(seen_flags, dtype=np.float64), axis=1)


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Compatibility scores of test images against every candidate class."""

    scores: np.ndarray  # (images, classes)
    class_names: tuple[str, ...]
    seen_flags: np.ndarray  # bool per class
    labels: tuple[str, ...]  # true class per image

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[1] != len(self.class_names):
            raise ValidationError(f"score matrix shape {scores.shape} does not match {len(self.class_names)} classes")
        if scores.shape[0] != len(self.labels):
            raise ValidationError(f"{scores.shape[0]} score rows but {len(self.labels)} labels")
        if not np.all(np.isfinite(scores)):
            raise ValidationError("score matrix has non-finite entries")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "seen_flags", np.asarray(self.seen_flags, dtype=bool))

    @classmethod
    def from_predictions(cls, values: np.ndarray, labels: Sequence[str], split: SplitSpec, classes: ClassAttributeMatrix) -> "ScoreMatrix":
        names = tuple(split.seen) + tuple(split.unseen)
        rows = classes.rows(names)
        flags = np.array([n in set(split.seen) for n in names])
        return cls(np.asarray(values, dtype=np.float64) @ rows.T, names, flags, tuple(labels))


@dataclass
class EvalReport:
    zsl_top1: float
    gzsl_seen: float
    gzsl_unseen: float
    harmonic: float
    gamma: float
    zsl_accuracy_mode: str = "overall"
    gzsl_accuracy_mode: str = "per-class-mean"
    per_class_zsl: dict = field(default_factory=dict)
    per_class_gzsl: dict = field(default_factory=dict)
    predicted_seen: int = 0
    num_test: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _accuracy(pred: np.ndarray, true: np.ndarray, mode: str) -> tuple[float, dict]:
    per_class = {}
    for c in np.unique(true):
        sel = true == c
        per_class[c] = float(np.mean(pred[sel] == c))
    if len(true) == 0:
        return 0.0, {}
    if mode == "overall":
        return float(np.mean(pred == true)), per_class
    if mode == "per-class-mean":
        return float(np.mean(list(per_class.values()))), per_class
    raise ValidationError(f"unknown accuracy mode {mode!r}")


def evaluate_scores(
    matrix: ScoreMatrix,
    gamma: float = 1e-4,
    zsl_mode: str = "overall",
    gzsl_mode: str = "per-class-mean",
) -> EvalReport:
    names = list(matrix.class_names)
    index = {n: i for i, n in enumerate(names)}
    missing = sorted(set(matrix.labels) - set(index))
    if missing:
        raise InputError(f"test labels outside the candidate set: {missing}")
    true = np.array([index[l] for l in matrix.labels], dtype=np.int64)
    seen_rows = matrix.seen_flags[true]
    unseen_cols = np.flatnonzero(~matrix.seen_flags)

    zsl, per_zsl = 0.0, {}
    if unseen_cols.size and (~seen_rows).any():
        sub = matrix.scores[~seen_rows][:, unseen_cols]
        pred = unseen_cols[np.argmax(sub, axis=1)]
        zsl, per_zsl = _accuracy(pred, true[~seen_rows], zsl_mode)

    pred_all = gzsl_predict_rows(matrix.scores, matrix.seen_flags, gamma)
    S, per_s = _accuracy(pred_all[seen_rows], true[seen_rows], gzsl_mode) if seen_rows.any() else (0.0, {})
    U, per_u = _accuracy(pred_all[~seen_rows], true[~seen_rows], gzsl_mode) if (~seen_rows).any() else (0.0, {})
    return EvalReport(
        zsl_top1=zsl,
        gzsl_seen=S,
        gzsl_unseen=U,
        harmonic=harmonic_mean(S, U),
        gamma=float(gamma),
        zsl_accuracy_mode=zsl_mode,
        gzsl_accuracy_mode=gzsl_mode,
        per_class_zsl={names[c]: a for c, a in per_zsl.items()},
        per_class_gzsl={names[c]: a for c, a in {**per_s, **per_u}.items()},
        predicted_seen=int(matrix.seen_flags[pred_all].sum()),
        num_test=len(true),
    )


def evaluate(values: np.ndarray, labels: Sequence[str], split: SplitSpec, classes: ClassAttributeMatrix, config) -> EvalReport:
    """Score predicted attribute vectors against the (normalized) class rows and evaluate.

    ``classes`` must already carry the configured row normalization.
    """
    matrix = ScoreMatrix.from_predictions(values, labels, split, classes)
    return evaluate_scores(matrix, config.gamma_calibration, config.zsl_accuracy, config.gzsl_accuracy)


def calibration_sweep(
    matrix: ScoreMatrix,
    gammas: Sequence[float],
    zsl_mode: str = "overall",
    gzsl_mode: str = "per-class-mean",
) -> tuple[list[EvalReport], float]:
    """Evaluate at every gamma; also return the gamma with the best harmonic mean (first on ties)."""
    gammas = [float(g) for g in gammas]
    if not gammas:
        raise InputError("empty gamma grid")
    if any(g < 0 for g in gammas) or any(b < a for a, b in zip(gammas, gammas[1:])):
        raise ValidationError("gamma grid must be non-negative and sorted")
    reports = [evaluate_scores(matrix, g, zsl_mode, gzsl_mode) for g in gammas]
    best = max(range(len(reports)), key=lambda i: (reports[i].harmonic, -i))
    return reports, gammas[best]
