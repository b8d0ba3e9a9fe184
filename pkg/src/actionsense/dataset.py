"""Labeled-video manifests: loading, validation, stratified splitting, one-hot labels."""

from __future__ import annotations

import hashlib
import json
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import InsufficientData, IoError, ParseError, UnknownLabel, ValidationError

MANIFEST_FORMAT = "actionsense-manifest"
MANIFEST_VERSION = 1

DEFAULT_LABELS = ("kick", "punch", "slap")
DEFAULT_RATIOS = (0.70, 0.15, 0.15)
SPLITS = ("train", "val", "test")
UNASSIGNED = "unassigned"
VALID_SPLITS = SPLITS + (UNASSIGNED,)


def canonical_label(label: str) -> str:
    return label.strip().lower()


@dataclass(frozen=True)
class LabelVocabulary:
    """Ordered class names; a label's position is its one-hot index."""

    labels: tuple[str, ...] = DEFAULT_LABELS

    def __post_init__(self):
        labels = tuple(canonical_label(str(l)) for l in self.labels)
        if len(labels) < 2:
            raise ValidationError(f"vocabulary needs at least 2 labels, got {list(labels)}")
        if any(not l for l in labels):
            raise ValidationError("vocabulary labels must be non-empty")
        if len(set(labels)) != len(labels):
            raise ValidationError(f"vocabulary labels must be unique, got {list(labels)}")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: object) -> bool:
        return isinstance(label, str) and canonical_label(label) in self.labels

    def __iter__(self):
        return iter(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(canonical_label(label))
        except ValueError:
            raise UnknownLabel(
                f"unknown label {label!r}; allowed labels: {', '.join(self.labels)}"
            ) from None

    def label(self, index: int) -> str:
        return self.labels[index]


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    source: str
    label: str
    split: str = UNASSIGNED
    fps_hint: int | None = None
    duration_hint: float | None = None

    def __post_init__(self):
        if not self.video_id:
            raise ValidationError("video_id must be non-empty")
        if self.split not in VALID_SPLITS:
            raise ValidationError(
                f"video {self.video_id!r}: split must be one of {VALID_SPLITS}, got {self.split!r}"
            )
        if self.fps_hint is not None and self.fps_hint <= 0:
            raise ValidationError(f"video {self.video_id!r}: fps must be positive")
        if self.duration_hint is not None and not self.duration_hint > 0:
            raise ValidationError(f"video {self.video_id!r}: duration_s must be positive")
        object.__setattr__(self, "label", canonical_label(self.label))


@dataclass(frozen=True)
class DatasetManifest:
    vocabulary: LabelVocabulary
    records: tuple[VideoRecord, ...]
    seed: int = 0
    # Directory that relative record sources resolve against.
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[str] = set()
        for rec in self.records:
            if rec.video_id in seen:
                raise ValidationError(f"duplicate video_id {rec.video_id!r}")
            seen.add(rec.video_id)
            if rec.label not in self.vocabulary.labels:
                raise ValidationError(
                    f"video {rec.video_id!r} has label {rec.label!r} not in vocabulary; "
                    f"allowed labels: {', '.join(self.vocabulary.labels)}"
                )

    @property
    def is_split(self) -> bool:
        return bool(self.records) and all(r.split != UNASSIGNED for r in self.records)

    def by_split(self, split: str) -> list[VideoRecord]:
        return [r for r in self.records if r.split == split]

    def get(self, video_id: str) -> VideoRecord:
        for r in self.records:
            if r.video_id == video_id:
                return r
        raise KeyError(video_id)

    def resolve_source(self, record: VideoRecord) -> Path:
        p = Path(record.source)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


def _require(obj: dict, key: str, kind, lineno: int):
    if key not in obj:
        raise ParseError(f"missing required key {key!r}", lineno)
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ParseError(f"key {key!r} has wrong type {type(value).__name__}", lineno)
    return value


def _optional_number(obj: dict, key: str, lineno: int, integer: bool):
    value = obj.get(key)
    if value is None:
        return None
    kinds = (int,) if integer else (int, float)
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise ParseError(f"key {key!r} must be a {'integer' if integer else 'number'}", lineno)
    return value


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read and validate a JSON-lines manifest.

    Line 1 is the header object naming the format, version and label
    vocabulary; every following non-blank line is one video.

    Raises:
        ParseError: malformed JSON, missing keys or wrong types (line number in
            the message and on ``.line``).
        ValidationError: duplicate ``video_id`` or a label outside the vocabulary.
        IoError: the file cannot be read.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc

    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("missing header line", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"header is not valid JSON: {exc.msg}", 1) from None
    if not isinstance(header, dict) or header.get("format") != MANIFEST_FORMAT:
        raise ParseError(f"header must declare format {MANIFEST_FORMAT!r}", 1)
    if header.get("version") != MANIFEST_VERSION:
        raise ParseError(f"unsupported manifest version {header.get('version')!r}", 1)
    labels = header.get("labels")
    if not isinstance(labels, list) or not all(isinstance(l, str) for l in labels):
        raise ParseError("header 'labels' must be a list of strings", 1)
    vocab = LabelVocabulary(tuple(labels))
    seed = header.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ParseError("header 'seed' must be a non-negative integer", 1)

    records = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
        if not isinstance(obj, dict):
            raise ParseError("row must be a JSON object", lineno)
        video_id = _require(obj, "video_id", str, lineno)
        source = _require(obj, "source", str, lineno)
        label = _require(obj, "label", str, lineno)
        split = obj.get("split", UNASSIGNED)
        if split not in VALID_SPLITS:
            raise ParseError(f"split must be one of {VALID_SPLITS}, got {split!r}", lineno)
        fps = _optional_number(obj, "fps", lineno, integer=True)
        duration = _optional_number(obj, "duration_s", lineno, integer=False)

        if video_id in seen:
            raise ValidationError(
                f"duplicate video_id {video_id!r} (lines {seen[video_id]} and {lineno})"
            )
        seen[video_id] = lineno
        if label not in vocab:
            raise ValidationError(
                f"line {lineno}: label {label!r} not in vocabulary; "
                f"allowed labels: {', '.join(vocab.labels)}"
            )
        try:
            records.append(VideoRecord(video_id, source, label, split, fps, duration))
        except ValidationError as exc:
            raise ParseError(str(exc), lineno) from None

    return DatasetManifest(vocab, tuple(records), seed=seed, root=path.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    header = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "labels": list(manifest.vocabulary.labels),
        "seed": manifest.seed,
    }
    rows = [json.dumps(header)]
    for rec in manifest.records:
        row: dict[str, Any] = {
            "video_id": rec.video_id,
            "source": rec.source,
            "label": rec.label,
            "split": rec.split,
        }
        if rec.fps_hint is not None:
            row["fps"] = rec.fps_hint
        if rec.duration_hint is not None:
            row["duration_s"] = rec.duration_hint
        rows.append(json.dumps(row))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from exc


def apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items over ``ratios``.

    Equal remainders go to the earlier bucket. Afterwards every bucket with a
    non-zero ratio is topped up to one item (taken from the largest bucket)
    so that stratified splits never leave a (class, split) cell empty when
    ``n`` allows it.
    """
    quotas = [n * r for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    # Quantise remainders so float fuzz (30 * 0.7 = 20.999...) does not break ties.
    remainders = [round(q - c, 9) for q, c in zip(quotas, counts)]
    leftover = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        counts[i] += 1

    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: (counts[j], -j))
            if counts[donor] <= 1:
                break
            counts[donor] -= 1
            counts[i] += 1
    return counts


def _class_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def split_dataset(
    manifest: DatasetManifest,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
) -> DatasetManifest:
    """Assign every video to train/val/test, stratified per class.

    Splitting happens at video granularity. Within a class the records are
    sorted by ``video_id`` and shuffled with a generator seeded from
    ``(seed, label)``, so the result depends only on the record set, the
    ratios and the seed; the input order is irrelevant. Bucket sizes follow
    :func:`apportion`.

    Raises:
        ValidationError: ratios are not three non-negative fractions summing to 1.
        InsufficientData: a class has fewer videos than non-zero buckets.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 or not math.isfinite(r) for r in ratios):
        raise ValidationError(f"ratios must be three non-negative fractions, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)!r}")
    if seed < 0:
        raise ValidationError("seed must be non-negative")

    by_label: dict[str, list[VideoRecord]] = defaultdict(list)
    for rec in manifest.records:
        by_label[rec.label].append(rec)

    needed = sum(1 for r in ratios if r > 0)
    assignment: dict[str, str] = {}
    for label in manifest.vocabulary.labels:
        recs = sorted(by_label.get(label, []), key=lambda r: r.video_id)
        if not recs:
            continue
        if len(recs) < needed:
            raise InsufficientData(
                f"class {label!r} has {len(recs)} videos but {needed} splits need at least one each"
            )
        rng = random.Random(_class_seed(seed, label))
        rng.shuffle(recs)
        counts = apportion(len(recs), ratios)
        start = 0
        for split, count in zip(SPLITS, counts):
            for rec in recs[start : start + count]:
                assignment[rec.video_id] = split
            start += count

    records = tuple(replace(r, split=assignment[r.video_id]) for r in manifest.records)
    return DatasetManifest(manifest.vocabulary, records, seed=seed, root=manifest.root)


def one_hot(label: str, vocabulary: LabelVocabulary) -> np.ndarray:
    vec = np.zeros(len(vocabulary), dtype=np.float64)
    vec[vocabulary.index(label)] = 1.0
    return vec


def one_hot_indices(indices: Iterable[int], n_classes: int) -> np.ndarray:
    idx = np.asarray(list(indices), dtype=np.int64)
    out = np.zeros((idx.size, n_classes), dtype=np.float64)
    out[np.arange(idx.size), idx] = 1.0
    return out
