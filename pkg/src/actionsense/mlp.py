"""Five-layer fully connected classification head, written directly in NumPy.

Architecture: four hidden layers ``ReLU(x @ W + b)`` each followed by
inverted dropout, then a softmax output layer. Weights are stored as
``(fan_in, fan_out)`` matrices so a batch is a row-major ``(B, input_dim)``
array. Computation runs in float64; parameters handed out by
:func:`init_head` and by the trainer sit exactly on the float32 grid so a
saved bundle (float32 on disk) reloads bit-identically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import NormStats
from .dataset import LabelVocabulary
from .errors import (
    ChecksumError,
    ConfigError,
    DimensionMismatch,
    FormatError,
    IoError,
    NonFiniteGradient,
    NonFiniteInput,
    ShapeError,
    StaleCache,
)

N_HIDDEN = 4
DEFAULT_HIDDEN_WIDTHS = (512, 256, 128, 64)
DEFAULT_DROPOUT = 0.5
LOSS_EPS = 1e-12

MODEL_FORMAT = "actionsense-model"
MODEL_VERSION = 1
MODEL_JSON = "model.json"
WEIGHTS_BIN = "weights.bin"


@dataclass(frozen=True)
class HeadConfig:
    input_dim: int
    hidden_widths: tuple[int, ...] = DEFAULT_HIDDEN_WIDTHS
    output_dim: int = 3
    dropout_rate: float = DEFAULT_DROPOUT
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.hidden_widths)
        object.__setattr__(self, "hidden_widths", widths)
        if len(widths) != N_HIDDEN:
            raise ConfigError(f"the head has exactly {N_HIDDEN} hidden layers, got widths {widths}")
        if self.input_dim <= 0 or self.output_dim < 2 or any(w <= 0 for w in widths):
            raise ConfigError(
                f"layer widths must be positive (input {self.input_dim}, hidden {widths}, "
                f"output {self.output_dim})"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    def to_json(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "HeadConfig":
        return cls(
            int(data["input_dim"]),
            tuple(data["hidden_widths"]),
            int(data["output_dim"]),
            float(data["dropout_rate"]),
            int(data.get("seed", 0)),
        )


@dataclass
class HeadModel:
    config: HeadConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    vocabulary: LabelVocabulary | None = None
    norm_stats: NormStats | None = None
    backbone_name: str = ""

    def __post_init__(self):
        sizes = self.config.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ShapeError(f"expected {len(sizes) - 1} weight/bias pairs")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ShapeError(
                    f"layer {i + 1}: weight {w.shape} / bias {b.shape} do not chain "
                    f"{sizes[i]} -> {sizes[i + 1]}"
                )
        if self.vocabulary is not None and len(self.vocabulary) != self.config.output_dim:
            raise ShapeError(
                f"vocabulary has {len(self.vocabulary)} labels but output_dim is {self.config.output_dim}"
            )
        if self.norm_stats is not None and self.norm_stats.dimension != self.config.input_dim:
            raise DimensionMismatch(
                f"norm stats dimension {self.norm_stats.dimension} != input_dim {self.config.input_dim}"
            )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Flat list ``[W1, b1, ..., W5, b5]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> "HeadModel":
        return replace(self, weights=list(params[0::2]), biases=list(params[1::2]))

    def quantized(self) -> "HeadModel":
        """Copy with every parameter rounded to float32 precision."""
        return self.with_parameters([_to_f32_grid(p) for p in self.parameters()])

    def check_input(self, dim: int, source: str | None = None) -> None:
        if dim != self.config.input_dim:
            trained = self.backbone_name or "unknown backbone"
            given = source or "unknown backbone"
            raise DimensionMismatch(
                f"feature dimension {dim} (from {given}) does not match head input_dim "
                f"{self.config.input_dim} (trained on {trained})"
            )


def _to_f32_grid(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_head(
    config: HeadConfig,
    vocabulary: LabelVocabulary | None = None,
    norm_stats: NormStats | None = None,
    backbone_name: str = "",
) -> HeadModel:
    """Glorot-uniform weights, zero biases, deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    sizes = config.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = glorot_limit(fan_in, fan_out)
        w = _to_f32_grid(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        # float32 rounding may step just past the bound; pull those back inside.
        inner = float(np.nextafter(np.float32(limit), np.float32(0)))
        w = np.clip(w, -inner, inner) if np.float32(limit) > limit else w
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return HeadModel(config, weights, biases, vocabulary, norm_stats, backbone_name)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre_activations: list[np.ndarray] = field(default_factory=list)
    activations: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)
    mode: str = "infer"

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], rate: float) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1 / (1 - rate)``."""
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def forward(
    model: HeadModel,
    batch: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the head on a ``(B, input_dim)`` batch.

    In ``train`` mode every hidden activation is multiplied by a fresh
    inverted-dropout mask drawn from ``rng``; in ``infer`` mode no masks
    are applied. Returns softmax probabilities and the cache that
    :func:`backward` needs.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise ShapeError(f"batch must have shape (B, {model.config.input_dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("batch contains non-finite values")
    rate = model.config.dropout_rate
    use_dropout = mode == "train" and rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")

    cache = ForwardCache(inputs=x, mode=mode)
    a = x
    last = model.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        cache.pre_activations.append(z)
        if i == last:
            break
        a = np.maximum(z, 0.0)
        mask = dropout_mask(rng, a.shape, rate) if use_dropout else None
        if mask is not None:
            a = a * mask
        cache.masks.append(mask)
        cache.activations.append(a)
    return softmax(cache.pre_activations[-1]), cache


def predict_proba(model: HeadModel, batch: np.ndarray) -> np.ndarray:
    return forward(model, batch, "infer")[0]


def cross_entropy_loss(probabilities: np.ndarray, targets_one_hot: np.ndarray) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    t = np.asarray(targets_one_hot, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2 or p.shape[0] == 0:
        raise ShapeError(f"probabilities {p.shape} and targets {t.shape} must be equal (B, K) shapes")
    return float(-(t * np.log(np.maximum(p, LOSS_EPS))).sum() / p.shape[0])


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.parameters())


def backward(
    model: HeadModel,
    cache: ForwardCache,
    probabilities: np.ndarray,
    targets_one_hot: np.ndarray,
) -> Gradients:
    """Gradients of the mean cross-entropy loss w.r.t. every weight and bias."""
    p = np.asarray(probabilities, dtype=np.float64)
    t = np.asarray(targets_one_hot, dtype=np.float64)
    batch = cache.batch_size
    if (
        p.shape != (batch, model.config.output_dim)
        or t.shape != p.shape
        or len(cache.pre_activations) != model.n_layers
    ):
        raise StaleCache(
            f"cache for batch {batch} does not match probabilities {p.shape} / targets {t.shape}"
        )

    grads_w: list[np.ndarray] = [None] * model.n_layers
    grads_b: list[np.ndarray] = [None] * model.n_layers
    delta = (p - t) / batch
    for i in range(model.n_layers - 1, -1, -1):
        a_prev = cache.inputs if i == 0 else cache.activations[i - 1]
        grads_w[i] = a_prev.T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ model.weights[i].T
        mask = cache.masks[i - 1]
        if mask is not None:
            delta = delta * mask
        delta = delta * (cache.pre_activations[i - 1] > 0)
    return Gradients(grads_w, grads_b)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, model: HeadModel) -> "AdamState":
        params = model.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def optimizer_step(
    model: HeadModel,
    gradients: Gradients,
    state: AdamState,
    hyper: AdamHyper = AdamHyper(),
    t: int = 1,
) -> tuple[HeadModel, AdamState]:
    """One bias-corrected adaptive-moment update; returns new model and state."""
    if t < 1:
        raise ValueError("step count t must be >= 1")
    grads = gradients.parameters()
    if not gradients.all_finite():
        raise NonFiniteGradient("gradient contains non-finite values")
    params = model.parameters()
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ShapeError("optimizer state does not match model parameters")

    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * (g * g)
        step = hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        new_params.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return model.with_parameters(new_params), AdamState(new_m, new_v)


def sgd_step(model: HeadModel, gradients: Gradients, lr: float) -> HeadModel:
    if not gradients.all_finite():
        raise NonFiniteGradient("gradient contains non-finite values")
    params = [p - lr * g for p, g in zip(model.parameters(), gradients.parameters())]
    return model.with_parameters(params)


# -- persistence ---------------------------------------------------------------


def _tensor_names(n_layers: int) -> list[str]:
    names = []
    for i in range(1, n_layers + 1):
        names.extend((f"W{i}", f"b{i}"))
    return names


def save_model(model: HeadModel, path: str | Path) -> None:
    """Write a bundle directory holding ``model.json`` and ``weights.bin``.

    Parameters are stored as little-endian float32 in the order
    W1, b1, ..., W5, b5, each row-major.
    """
    directory = Path(path)
    blobs, tensors, offset = [], [], 0
    for name, p in zip(_tensor_names(model.n_layers), model.parameters()):
        raw = np.ascontiguousarray(p, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    weights = b"".join(blobs)
    meta = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": model.config.to_json(),
        "vocabulary": list(model.vocabulary.labels) if model.vocabulary else None,
        "backbone_name": model.backbone_name,
        "norm_stats": model.norm_stats.to_json() if model.norm_stats else None,
        "dtype": "float32-le",
        "tensors": tensors,
        "checksum": "sha256:" + hashlib.sha256(weights).hexdigest(),
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / WEIGHTS_BIN).write_bytes(weights)
        (directory / MODEL_JSON).write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write model bundle {directory}: {exc}") from exc


def load_model(path: str | Path) -> HeadModel:
    directory = Path(path)
    try:
        meta_text = (directory / MODEL_JSON).read_text(encoding="utf-8")
        weights = (directory / WEIGHTS_BIN).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read model bundle {directory}: {exc}") from exc
    try:
        meta = json.loads(meta_text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{directory / MODEL_JSON}: {exc}") from None
    if meta.get("format") != MODEL_FORMAT:
        raise FormatError(f"{directory}: not an {MODEL_FORMAT} bundle (format={meta.get('format')!r})")
    if meta.get("version") != MODEL_VERSION:
        raise FormatError(f"{directory}: unsupported bundle version {meta.get('version')!r}")

    tensors = meta.get("tensors", [])
    expected = sum(t["nbytes"] for t in tensors)
    if len(weights) != expected:
        raise FormatError(
            f"{directory / WEIGHTS_BIN}: expected {expected} bytes, found {len(weights)} (truncated?)"
        )
    digest = "sha256:" + hashlib.sha256(weights).hexdigest()
    if digest != meta.get("checksum"):
        raise ChecksumError(f"{directory / WEIGHTS_BIN}: checksum mismatch")

    params = []
    for t in tensors:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        if t["nbytes"] != count * 4:
            raise FormatError(f"tensor {t['name']}: nbytes {t['nbytes']} disagrees with shape {t['shape']}")
        arr = np.frombuffer(weights, dtype="<f4", count=count, offset=t["offset"])
        params.append(arr.reshape(t["shape"]).astype(np.float64))

    config = HeadConfig.from_json(meta["config"])
    vocab = LabelVocabulary(tuple(meta["vocabulary"])) if meta.get("vocabulary") else None
    stats = NormStats.from_json(meta["norm_stats"]) if meta.get("norm_stats") else None
    if len(params) != 2 * (N_HIDDEN + 1):
        raise FormatError(f"{directory}: expected {2 * (N_HIDDEN + 1)} tensors, found {len(params)}")
    return HeadModel(
        config,
        list(params[0::2]),
        list(params[1::2]),
        vocab,
        stats,
        meta.get("backbone_name", ""),
    )
