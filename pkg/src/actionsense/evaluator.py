"""Frame predictions, majority-vote video decisions, metrics and reports."""

from __future__ import annotations

import csv
import io
import json
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import FeatureVector, normalize_matrix
from .dataset import LabelVocabulary
from .errors import EmptyFrameList, FormatError, IndexOutOfRange, IoError, ShapeError, ValidationError
from .mlp import HeadModel, predict_proba

REPORT_FORMAT = "actionsense-report"
REPORT_VERSION = 1


@dataclass(frozen=True)
class FramePrediction:
    video_id: str
    frame_index: int
    probabilities: np.ndarray
    predicted_index: int


@dataclass(frozen=True)
class VideoDecision:
    video_id: str
    predicted_label: str
    predicted_index: int
    vote_counts: tuple[int, ...]
    mean_probabilities: tuple[float, ...]
    tie_broken: bool

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "predicted_label": self.predicted_label,
            "predicted_index": self.predicted_index,
            "vote_counts": list(self.vote_counts),
            "mean_probabilities": list(self.mean_probabilities),
            "tie_broken": self.tie_broken,
        }


def _vocab(model: HeadModel) -> LabelVocabulary:
    if model.vocabulary is not None:
        return model.vocabulary
    return LabelVocabulary(tuple(f"class{i}" for i in range(model.config.output_dim)))


def _feature_matrix(model: HeadModel, features: Sequence[FeatureVector]) -> np.ndarray:
    for f in features:
        model.check_input(f.dim, f.backbone)
    return np.stack([f.values for f in features]).astype(np.float64)


def predict_frames(model: HeadModel, features: Sequence[FeatureVector]) -> list[FramePrediction]:
    """Inference-mode predictions for already-normalised features."""
    if not features:
        return []
    probs = predict_proba(model, _feature_matrix(model, features))
    return [
        FramePrediction(f.video_id, f.frame_index, p, int(np.argmax(p)))
        for f, p in zip(features, probs)
    ]


def predict_frame(model: HeadModel, feature: FeatureVector) -> FramePrediction:
    return predict_frames(model, [feature])[0]


def vote(probabilities: np.ndarray) -> tuple[int, tuple[int, ...], tuple[float, ...], bool]:
    """Majority vote over per-frame probability rows.

    Each frame votes for its argmax (lowest index on exact ties). The class
    with the most votes wins; a vote tie is settled by the highest mean
    probability across all frames, then by the lowest class index.

    Returns ``(winner, vote_counts, mean_probabilities, tie_broken)``.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise EmptyFrameList("at least one frame is needed to classify a video")
    n, k = p.shape
    counts = np.bincount(np.argmax(p, axis=1), minlength=k)
    # fsum is exactly rounded, so the means do not depend on frame order.
    means = tuple(math.fsum(p[:, c]) / n for c in range(k))
    top = counts.max()
    tied = [c for c in range(k) if counts[c] == top]
    if len(tied) == 1:
        return tied[0], tuple(int(c) for c in counts), means, False
    # Compare exact column sums: rounded means can merge values that differ by an ulp.
    sums = {c: sum(map(Fraction, p[:, c].tolist())) for c in tied}
    best = max(sums.values())
    winner = min(c for c in tied if sums[c] == best)
    return winner, tuple(int(c) for c in counts), means, True


def classify_video(
    model: HeadModel, frame_features: Sequence[FeatureVector], video_id: str | None = None
) -> VideoDecision:
    if not frame_features:
        raise EmptyFrameList("at least one frame feature is needed to classify a video")
    preds = predict_frames(model, frame_features)
    probs = np.stack([p.probabilities for p in preds])
    winner, counts, means, tie = vote(probs)
    vid = video_id if video_id is not None else frame_features[0].video_id
    return VideoDecision(vid, _vocab(model).label(winner), winner, counts, means, tie)


def classify_video_raw(
    model: HeadModel, frame_features: Sequence[FeatureVector], video_id: str | None = None
) -> VideoDecision:
    """Like :func:`classify_video` but first applies the model's stored feature normalisation."""
    if model.norm_stats is None:
        return classify_video(model, frame_features, video_id)
    normed = []
    for f in frame_features:
        model.check_input(f.dim, f.backbone)
        normed.append(
            FeatureVector(normalize_matrix(model.norm_stats, f.values), f.video_id, f.frame_index,
                          f.label_index, f.split, f.backbone)
        )
    return classify_video(model, normed, video_id)


def confusion_matrix(decisions: Iterable[tuple[int, int]], k: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    m = np.zeros((k, k), dtype=np.int64)
    for true, pred in decisions:
        if not (0 <= true < k and 0 <= pred < k):
            raise IndexOutOfRange(f"pair ({true}, {pred}) outside [0, {k})")
        m[true, pred] += 1
    return m


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass(frozen=True)
class ClassMetrics:
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    degenerate: tuple[bool, ...]

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision))

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall))

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))


def per_class_metrics(confusion: np.ndarray) -> ClassMetrics:
    """Precision, recall and F1 per class; every 0/0 is taken as 0.

    A class is flagged ``degenerate`` when any of its metrics needed the
    0/0 convention (no true instances or no predictions).
    """
    m = np.asarray(confusion)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"confusion matrix must be square, got {m.shape}")
    if np.any(m < 0):
        raise ValidationError("confusion matrix entries must be non-negative")
    rows = m.sum(axis=1)
    cols = m.sum(axis=0)
    precision, recall, f1, degenerate = [], [], [], []
    for k in range(m.shape[0]):
        tp = float(m[k, k])
        p = _ratio(tp, cols[k])
        r = _ratio(tp, rows[k])
        precision.append(p)
        recall.append(r)
        f1.append(_ratio(2 * p * r, p + r))
        degenerate.append(bool(cols[k] == 0 or rows[k] == 0))
    return ClassMetrics(tuple(precision), tuple(recall), tuple(f1), tuple(degenerate))


@dataclass
class EvaluationReport:
    labels: tuple[str, ...]
    confusion: np.ndarray
    metrics: ClassMetrics
    video_accuracy: float
    n_videos: int
    model_name: str = ""
    decisions: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        per_class = {
            label: {
                "precision": self.metrics.precision[i],
                "recall": self.metrics.recall[i],
                "f1": self.metrics.f1[i],
                "support": int(self.confusion[i].sum()),
                "degenerate": self.metrics.degenerate[i],
            }
            for i, label in enumerate(self.labels)
        }
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "model": self.model_name,
            "labels": list(self.labels),
            "confusion_orientation": "rows=true,columns=predicted",
            "confusion": self.confusion.tolist(),
            "per_class": per_class,
            "macro": {
                "precision": self.metrics.macro_precision,
                "recall": self.metrics.macro_recall,
                "f1": self.metrics.macro_f1,
            },
            "video_accuracy": self.video_accuracy,
            "n_videos": self.n_videos,
            "decisions": self.decisions,
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvaluationReport":
        if data.get("format") != REPORT_FORMAT:
            raise FormatError(f"not an {REPORT_FORMAT} document (format={data.get('format')!r})")
        if data.get("version") != REPORT_VERSION:
            raise FormatError(f"unsupported report version {data.get('version')!r}")
        labels = tuple(data["labels"])
        confusion = np.asarray(data["confusion"], dtype=np.int64)
        pc = data["per_class"]
        metrics = ClassMetrics(
            tuple(float(pc[l]["precision"]) for l in labels),
            tuple(float(pc[l]["recall"]) for l in labels),
            tuple(float(pc[l]["f1"]) for l in labels),
            tuple(bool(pc[l]["degenerate"]) for l in labels),
        )
        return cls(
            labels,
            confusion,
            metrics,
            float(data["video_accuracy"]),
            int(data["n_videos"]),
            data.get("model", ""),
            list(data.get("decisions", [])),
        )


def build_report(
    pairs: Sequence[tuple[int, int]],
    labels: Sequence[str],
    model_name: str = "",
    decisions: Sequence[dict] = (),
) -> EvaluationReport:
    k = len(labels)
    cm = confusion_matrix(pairs, k)
    total = int(cm.sum())
    accuracy = float(np.trace(cm)) / total if total else 0.0
    return EvaluationReport(
        tuple(labels), cm, per_class_metrics(cm), accuracy, total, model_name, list(decisions)
    )


def evaluate_videos(
    model: HeadModel,
    videos: Sequence[tuple[str, int, Sequence[FeatureVector]]],
    normalize: bool = True,
) -> EvaluationReport:
    """Classify ``(video_id, true_index, frame_features)`` triples and tally a report."""
    vocab = _vocab(model)
    pairs, decisions = [], []
    for video_id, true_index, feats in videos:
        decide = classify_video_raw if normalize else classify_video
        d = decide(model, list(feats), video_id)
        pairs.append((true_index, d.predicted_index))
        entry = d.to_json()
        entry["true_label"] = vocab.label(true_index)
        decisions.append(entry)
    return build_report(pairs, vocab.labels, model.backbone_name, decisions)


# -- rendering -----------------------------------------------------------------


def _fmt_pct(x: float) -> str:
    return f"{100 * x:.1f}"


def render_text(report: EvaluationReport) -> str:
    name = report.model_name or "model"
    m = report.metrics
    width = max(12, len(name) + 2)
    lines = [
        "Model performance I (macro averages, %)",
        f"{'Model':<{width}}Precision / F-1 Score / Recall",
        f"{name:<{width}}{_fmt_pct(m.macro_precision)} / {_fmt_pct(m.macro_f1)} / {_fmt_pct(m.macro_recall)}",
        "",
        "Model performance II (per action)",
        f"{'Model':<{width}}{'Action':<10}{'Precision':>10}{'F-1 Score':>11}{'Recall':>9}",
    ]
    for i, label in enumerate(report.labels):
        lead = name if i == 0 else ""
        lines.append(
            f"{lead:<{width}}{label.capitalize():<10}"
            f"{m.precision[i]:>10.2f}{m.f1[i]:>11.2f}{m.recall[i]:>9.2f}"
        )
    correct = int(np.trace(report.confusion))
    lines += [
        "",
        f"Video accuracy: {_fmt_pct(report.video_accuracy)}% ({correct}/{report.n_videos} videos)",
        "",
        "Confusion matrix (rows = true, columns = predicted)",
    ]
    col = max(8, *(len(l) + 2 for l in report.labels))
    lines.append(" " * col + "".join(f"{l:>{col}}" for l in report.labels))
    for i, label in enumerate(report.labels):
        lines.append(f"{label:<{col}}" + "".join(f"{v:>{col}d}" for v in report.confusion[i]))
    flagged = [l for l, d in zip(report.labels, m.degenerate) if d]
    if flagged:
        lines.append("")
        lines.append("Degenerate classes (0/0 metrics reported as 0): " + ", ".join(flagged))
    return "\n".join(lines) + "\n"


def render_json(report: EvaluationReport) -> str:
    return json.dumps(report.to_json(), indent=1) + "\n"


def render_report(report: EvaluationReport, format: str = "text") -> str:
    if format == "text":
        return render_text(report)
    if format == "json":
        return render_json(report)
    raise ValidationError(f"unknown report format {format!r} (expected text or json)")


def confusion_csv(report: EvaluationReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\predicted", *report.labels])
    for label, row in zip(report.labels, report.confusion):
        writer.writerow([label, *(int(v) for v in row)])
    return buf.getvalue()


def save_report(report: EvaluationReport, path: str | Path) -> None:
    try:
        Path(path).write_text(render_json(report), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write report {path}: {exc}") from exc


def load_report(path: str | Path) -> EvaluationReport:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read report {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return EvaluationReport.from_json(data)
