"""IoU-weighted mismatch-localization metrics, alignment IoU and JSON reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import LocalizationResult, Utterance, ValidationError

REPORT_SCHEMA = "mlvae-report"
REPORT_VERSION = 1


def iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """Intersection over union of two half-open frame intervals."""
    (s1, e1), (s2, e2) = a, b
    if e1 <= s1 or e2 <= s2:
        raise ValidationError(f"empty interval in iou({a}, {b})")
    inter = max(0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    tp_ml: float = 0.0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                               self.tn + other.tn, self.tp_ml + other.tp_ml)

    @property
    def pr_ml(self) -> float:
        return _ratio(self.tp_ml, self.tp + self.fp)

    @property
    def re_ml(self) -> float:
        return _ratio(self.tp_ml, self.tp + self.fn)

    @property
    def f1_ml(self) -> float:
        p, r = self.pr_ml, self.re_ml
        return _ratio(2 * p * r, p + r)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    def as_dict(self) -> dict:
        return {**asdict(self), "PR_ML": self.pr_ml, "RE_ML": self.re_ml, "F1_ML": self.f1_ml}


def _truth_spans(truth: Utterance) -> list[tuple[int, int]]:
    if truth.truth is None:
        raise ValidationError(f"{truth.id}: no ground truth attached")
    return truth.truth.segments(truth.num_frames)


def _check_lengths(pred: LocalizationResult, truth: Utterance):
    if len(pred.segments) != truth.num_phonemes:
        raise ValidationError(f"{truth.id}: prediction has {len(pred.segments)} phonemes, truth has {truth.num_phonemes}")


def score_localization(pred: LocalizationResult, truth: Utterance) -> ConfusionCounts:
    """Per-position confusion counts with IoU-weighted true positives."""
    _check_lengths(pred, truth)
    spans = _truth_spans(truth)
    c = ConfusionCounts()
    for seg, flag, span in zip(pred.segments, truth.truth.mismatch, spans):
        if seg.mismatch and flag:
            c.tp += 1
            c.tp_ml += iou((seg.start, seg.end), span)
        elif seg.mismatch:
            c.fp += 1
        elif flag:
            c.fn += 1
        else:
            c.tn += 1
    return c


def segment_ious(pred: LocalizationResult, truth: Utterance) -> np.ndarray:
    _check_lengths(pred, truth)
    return np.array([iou((s.start, s.end), span) for s, span in zip(pred.segments, _truth_spans(truth))])


def alignment_avg_iou(pred: LocalizationResult, truth: Utterance) -> float:
    """Mean IoU over every phoneme position."""
    return float(segment_ious(pred, truth).mean())


def boundary_hits(pred_starts: Sequence[int], truth: Utterance, tol: int = 2) -> tuple[int, int]:
    """(hits, total) over interior segment starts: a hit lies within ``tol`` frames of the truth."""
    true_starts = np.asarray(truth.truth.boundaries[1:])
    pred_starts = np.asarray(pred_starts)[1:]
    if pred_starts.shape != true_starts.shape:
        raise ValidationError(f"{truth.id}: boundary count mismatch")
    return int(np.sum(np.abs(pred_starts - true_starts) <= tol)), int(true_starts.size)


@dataclass
class UtteranceReport:
    id: str
    counts: ConfusionCounts
    ious: np.ndarray

    def as_dict(self) -> dict:
        return {"id": self.id, **self.counts.as_dict(), "alignment_avg_iou": float(self.ious.mean())}


def evaluate(preds: dict[str, LocalizationResult], truths: Iterable[Utterance]) -> list[UtteranceReport]:
    out = []
    for u in truths:
        if u.id not in preds:
            raise ValidationError(f"no prediction for utterance {u.id}")
        p = preds[u.id]
        out.append(UtteranceReport(u.id, score_localization(p, u), segment_ious(p, u)))
    return out


def aggregate(reports: Sequence[UtteranceReport]) -> dict:
    """Micro-averaged corpus metrics: counts and TP_ML are summed before taking ratios."""
    if not reports:
        raise ValidationError("aggregate needs at least one utterance")
    total = ConfusionCounts()
    for r in reports:
        total = total + r.counts
    ious = np.concatenate([r.ious for r in reports])
    return {**total.as_dict(), "alignment_avg_iou": float(ious.mean()),
            "num_utterances": len(reports), "num_phonemes": int(ious.size)}


def build_report(reports: Sequence[UtteranceReport], meta: dict | None = None) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "meta": meta or {},
        "corpus": aggregate(reports),
        "utterances": [r.as_dict() for r in reports],
    }


def validate_report(doc: dict) -> dict:
    if doc.get("schema") != REPORT_SCHEMA or doc.get("version") != REPORT_VERSION:
        raise ValidationError("not a metrics report of a supported version")
    for key in ("PR_ML", "RE_ML", "F1_ML", "alignment_avg_iou", "tp", "fp", "fn", "tn", "tp_ml"):
        if key not in doc.get("corpus", {}):
            raise ValidationError(f"report corpus section lacks {key!r}")
    return doc


def dumps_report(doc: dict) -> str:
    return json.dumps(validate_report(doc), sort_keys=True, indent=1)
