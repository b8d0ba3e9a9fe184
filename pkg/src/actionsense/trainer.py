"""Mini-batch training loop for the head with validation-driven early stopping."""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backbone import FeatureVector, NormStats
from .dataset import LabelVocabulary, one_hot_indices
from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptySet,
    EmptyTrainingSet,
    IoError,
    SplitLeakError,
    ValidationError,
)
from .mlp import (
    AdamHyper,
    AdamState,
    HeadConfig,
    HeadModel,
    backward,
    cross_entropy_loss,
    forward,
    init_head,
    optimizer_step,
    predict_proba,
    sgd_step,
)

EVAL_CHUNK = 4096

# Stream ids for np.random.default_rng([seed, stream, epoch]).
_SHUFFLE_STREAM = 0
_DROPOUT_STREAM = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    early_stop_patience: int = 10
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.records)

    def to_json(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "epochs": [asdict(r) for r in self.records],
        }

    def save(self, path: str | Path) -> None:
        try:
            Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write history {path}: {exc}") from exc


def _stack(features: Sequence[FeatureVector]) -> tuple[np.ndarray, np.ndarray]:
    if not features:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    dims = {f.dim for f in features}
    if len(dims) != 1:
        raise DimensionMismatch(f"features have mixed dimensions {sorted(dims)}")
    if any(f.label_index is None for f in features):
        raise ValidationError("every training/validation feature needs a label_index")
    x = np.stack([f.values for f in features]).astype(np.float64)
    y = np.asarray([f.label_index for f in features], dtype=np.int64)
    return x, y


def argmax_lowest(probabilities: np.ndarray) -> np.ndarray:
    """Row-wise argmax; exact ties go to the lowest index (``np.argmax`` semantics)."""
    return np.argmax(probabilities, axis=-1)


def evaluate_epoch(
    model: HeadModel, features: np.ndarray | Sequence[FeatureVector], labels=None
) -> tuple[float, float]:
    """Inference-mode mean cross-entropy and accuracy over a labelled set."""
    if labels is None:
        x, y = _stack(list(features))
    else:
        x = np.asarray(features if isinstance(features, np.ndarray) else [f.values for f in features])
        y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise EmptySet("cannot evaluate on an empty set")
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{x.shape[0]} features but {y.shape[0]} labels")
    k = model.config.output_dim
    total_loss = 0.0
    correct = 0
    for start in range(0, x.shape[0], EVAL_CHUNK):
        xb, yb = x[start : start + EVAL_CHUNK], y[start : start + EVAL_CHUNK]
        probs = predict_proba(model, xb)
        total_loss += cross_entropy_loss(probs, one_hot_indices(yb, k)) * xb.shape[0]
        correct += int(np.sum(argmax_lowest(probs) == yb))
    return total_loss / x.shape[0], correct / x.shape[0]


def progress_line(record: EpochRecord) -> str:
    return (
        f"epoch={record.epoch} train_loss={record.train_loss:.6f} "
        f"val_loss={record.val_loss:.6f} val_acc={record.val_accuracy:.4f}"
    )


def train_arrays(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray | None,
    y_val: np.ndarray | None,
    head_config: HeadConfig,
    train_config: TrainConfig = TrainConfig(),
    *,
    vocabulary: LabelVocabulary | None = None,
    norm_stats: NormStats | None = None,
    backbone_name: str = "",
    log: Callable[[str], None] | None = None,
) -> tuple[HeadModel, TrainHistory]:
    """Train on already-normalised feature matrices.

    Each epoch shuffles the training rows with a generator seeded by
    ``(seed, 0, epoch)`` and draws dropout masks from ``(seed, 1, epoch)``,
    so the whole run is a pure function of its inputs. After every epoch
    both splits are scored with dropout off. The parameters with the lowest
    validation loss are returned (training loss is used when there is no
    validation data). Parameters are kept on the float32 grid after every
    update so the returned model survives a save/load round trip unchanged.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    if x_train.ndim != 2 or x_train.shape[0] == 0:
        raise EmptyTrainingSet("training set is empty")
    if x_train.shape[1] != head_config.input_dim:
        raise DimensionMismatch(
            f"feature dimension {x_train.shape[1]} != head input_dim {head_config.input_dim}"
        )
    if y_train.shape != (x_train.shape[0],):
        raise DimensionMismatch("one label per training row required")
    k = head_config.output_dim
    if np.any((y_train < 0) | (y_train >= k)):
        raise ValidationError(f"training labels must lie in [0, {k})")
    has_val = x_val is not None and len(x_val) > 0
    if has_val:
        x_val = np.asarray(x_val, dtype=np.float64)
        y_val = np.asarray(y_val, dtype=np.int64)
        if x_val.shape[1] != head_config.input_dim:
            raise DimensionMismatch(
                f"validation dimension {x_val.shape[1]} != head input_dim {head_config.input_dim}"
            )

    model = init_head(head_config, vocabulary, norm_stats, backbone_name)
    history = TrainHistory()
    if train_config.epochs == 0:
        return model, history

    n = x_train.shape[0]
    batch_size = min(train_config.batch_size, n)
    targets = one_hot_indices(y_train, k)
    hyper = AdamHyper(lr=train_config.learning_rate)
    state = AdamState.zeros_like(model)
    step = 0
    best_loss = math.inf
    best_model = model
    since_best = 0

    for epoch in range(1, train_config.epochs + 1):
        order = np.random.default_rng([train_config.seed, _SHUFFLE_STREAM, epoch]).permutation(n)
        drop_rng = np.random.default_rng([train_config.seed, _DROPOUT_STREAM, epoch])
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            probs, cache = forward(model, x_train[idx], "train", drop_rng)
            grads = backward(model, cache, probs, targets[idx])
            step += 1
            if train_config.optimizer == "adam":
                model, state = optimizer_step(model, grads, state, hyper, step)
            else:
                model = sgd_step(model, grads, train_config.learning_rate)
            model = model.quantized()

        train_loss, train_acc = evaluate_epoch(model, x_train, y_train)
        if has_val:
            val_loss, val_acc = evaluate_epoch(model, x_val, y_val)
        else:
            val_loss, val_acc = train_loss, train_acc
        record = EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc)
        history.records.append(record)
        if log is not None:
            log(progress_line(record))

        if val_loss < best_loss:
            best_loss, best_model, since_best = val_loss, model, 0
            history.best_epoch = epoch
        else:
            since_best += 1
            if train_config.early_stop_patience and since_best >= train_config.early_stop_patience:
                history.stopped_early = True
                break

    return best_model, history


def train(
    train_features: Sequence[FeatureVector],
    val_features: Sequence[FeatureVector],
    head_config: HeadConfig,
    train_config: TrainConfig = TrainConfig(),
    *,
    vocabulary: LabelVocabulary | None = None,
    norm_stats: NormStats | None = None,
    backbone_name: str = "",
    verbose: bool = False,
) -> tuple[HeadModel, TrainHistory]:
    """Train the head on labelled, normalised feature vectors.

    Raises:
        SplitLeakError: any input feature is tagged with the ``test`` split.
        EmptyTrainingSet: no training features.
        DimensionMismatch: feature length differs from ``head_config.input_dim``.
    """
    for name, feats in (("training", train_features), ("validation", val_features)):
        leaked = [f.video_id for f in feats if f.split == "test"]
        if leaked:
            raise SplitLeakError(
                f"{len(leaked)} test-split features passed as {name} data (e.g. video {leaked[0]!r})"
            )
    if not train_features:
        raise EmptyTrainingSet("training set is empty")
    x_tr, y_tr = _stack(list(train_features))
    x_va, y_va = _stack(list(val_features)) if val_features else (None, None)
    log = (lambda line: print(line, file=sys.stderr, flush=True)) if verbose else None
    return train_arrays(
        x_tr,
        y_tr,
        x_va,
        y_va,
        head_config,
        train_config,
        vocabulary=vocabulary,
        norm_stats=norm_stats,
        backbone_name=backbone_name,
        log=log,
    )
