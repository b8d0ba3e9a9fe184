"""Frozen feature extractors and the second (feature-level) normalisation stage.

A backbone maps a 224x224x3 frame in [0, 1] to an (H, W, C) activation
volume which is flattened row-major (H, then W, then C). Real backbones are
ONNX files run through onnxruntime; the built-in ``stub`` backbone does 7x7
grid per-channel mean pooling and needs no model file.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptySet,
    InferenceError,
    ModelLoadError,
    NonFiniteInput,
    ShapeError,
    ShapeMismatch,
)
from .framepipe import TARGET_SIZE, FrameTensor

INPUT_SHAPE = (TARGET_SIZE, TARGET_SIZE, 3)
STUB_GRID = 7

# Output shapes of the feature layers used for each architecture. Names
# missing here (inception_v3, mobilenet_v2) take their shape from the model.
KNOWN_OUTPUT_SHAPES: dict[str, tuple[int, int, int]] = {
    "vgg16": (7, 7, 512),
    "resnet50": (7, 7, 2048),
    "xception": (7, 7, 2048),
    "stub": (STUB_GRID, STUB_GRID, 3),
}
KNOWN_BACKBONES = ("vgg16", "mobilenet_v2", "xception", "inception_v3", "resnet50", "stub")


@dataclass(frozen=True)
class Preprocessing:
    """Backbone-specific mapping applied to [0, 1] pixels before inference.

    ``unit_interval`` leaves values alone, ``symmetric_unit_interval`` maps
    to [-1, 1], and ``custom`` computes ``(x - mean[c]) * scale[c]``.
    """

    kind: str = "unit_interval"
    mean: tuple[float, float, float] | None = None
    scale: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("unit_interval", "symmetric_unit_interval", "custom"):
            raise ConfigError(f"unknown preprocessing {self.kind!r}")
        if self.kind == "custom":
            if self.mean is None or self.scale is None or len(self.mean) != 3 or len(self.scale) != 3:
                raise ConfigError("custom preprocessing needs 3-element 'mean' and 'scale'")
            object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
            object.__setattr__(self, "scale", tuple(float(v) for v in self.scale))

    @classmethod
    def parse(cls, value: Any) -> "Preprocessing":
        if value is None:
            return cls()
        if isinstance(value, Preprocessing):
            return value
        if isinstance(value, str):
            return cls(value)
        if isinstance(value, Mapping):
            kind = value.get("kind", "custom")
            return cls(kind, value.get("mean"), value.get("scale"))
        raise ConfigError(f"cannot interpret preprocessing {value!r}")

    @property
    def key(self) -> str:
        if self.kind != "custom":
            return self.kind
        return f"custom(mean={list(self.mean)},scale={list(self.scale)})"

    def to_json(self) -> Any:
        if self.kind != "custom":
            return self.kind
        return {"kind": "custom", "mean": list(self.mean), "scale": list(self.scale)}

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "unit_interval":
            return x
        if self.kind == "symmetric_unit_interval":
            return x * np.float32(2.0) - np.float32(1.0)
        mean = np.asarray(self.mean, dtype=np.float32)
        scale = np.asarray(self.scale, dtype=np.float32)
        return (x - mean) * scale


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    model_path: str | None = None
    input_shape: tuple[int, int, int] = INPUT_SHAPE
    declared_output_shape: tuple[int, ...] | None = None
    preprocessing: Preprocessing = field(default_factory=Preprocessing)
    layout: str = "nhwc"

    def __post_init__(self):
        object.__setattr__(self, "name", self.name.strip().lower())
        if tuple(self.input_shape) != INPUT_SHAPE:
            raise ConfigError(f"backbone input shape must be {INPUT_SHAPE}, got {self.input_shape}")
        object.__setattr__(self, "input_shape", INPUT_SHAPE)
        if self.declared_output_shape is None and self.name in KNOWN_OUTPUT_SHAPES:
            object.__setattr__(self, "declared_output_shape", KNOWN_OUTPUT_SHAPES[self.name])
        if self.declared_output_shape is not None:
            shape = tuple(int(d) for d in self.declared_output_shape)
            if not shape or any(d <= 0 for d in shape):
                raise ConfigError(f"declared output shape must be positive, got {shape}")
            object.__setattr__(self, "declared_output_shape", shape)
        if self.layout not in ("nhwc", "nchw"):
            raise ConfigError(f"layout must be 'nhwc' or 'nchw', got {self.layout!r}")
        object.__setattr__(self, "preprocessing", Preprocessing.parse(self.preprocessing))

    @property
    def flat_length(self) -> int | None:
        if self.declared_output_shape is None:
            return None
        return int(np.prod(self.declared_output_shape))


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    video_id: str = ""
    frame_index: int = 0
    label_index: int | None = None
    split: str | None = None
    backbone: str | None = None

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ShapeError(f"feature vector must be 1-D, got shape {self.values.shape}")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


class Backbone:
    """Loaded, inference-ready feature extractor. Safe to share across threads."""

    def __init__(self, spec: BackboneSpec, output_shape: tuple[int, ...]):
        self.spec = spec
        self.output_shape = tuple(output_shape)
        self.flat_length = int(np.prod(self.output_shape))
        self._count = 0
        self._count_lock = threading.Lock()

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def cache_key(self) -> dict:
        return {"backbone": self.name, "preprocessing": self.spec.preprocessing.key}

    @property
    def inference_count(self) -> int:
        return self._count

    def _run(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def extract(self, frame: FrameTensor) -> np.ndarray:
        values = frame.values
        if values.shape != INPUT_SHAPE:
            raise ShapeError(f"frame must be {INPUT_SHAPE}, got {values.shape}")
        x = self.spec.preprocessing.apply(values.astype(np.float32, copy=False))
        try:
            out = self._run(x)
        except (ShapeError, ShapeMismatch):
            raise
        except Exception as exc:  # runtime failures inside the model
            raise InferenceError(f"backbone {self.name!r} failed: {exc}") from exc
        with self._count_lock:
            self._count += 1
        flat = np.ascontiguousarray(out, dtype=np.float32).reshape(-1)
        if flat.shape[0] != self.flat_length:
            raise ShapeMismatch(self.output_shape, out.shape, self.name)
        if not np.all(np.isfinite(flat)):
            raise InferenceError(f"backbone {self.name!r} produced non-finite features")
        return flat


class StubBackbone(Backbone):
    """7x7 grid per-channel mean pooling; deterministic and dependency-free."""

    def __init__(self, spec: BackboneSpec):
        super().__init__(spec, (STUB_GRID, STUB_GRID, 3))

    def _run(self, x: np.ndarray) -> np.ndarray:
        cell = TARGET_SIZE // STUB_GRID
        blocks = x.astype(np.float64).reshape(STUB_GRID, cell, STUB_GRID, cell, 3)
        return blocks.mean(axis=(1, 3))


class OnnxBackbone(Backbone):
    def __init__(self, spec: BackboneSpec, session, output_shape: tuple[int, ...]):
        super().__init__(spec, output_shape)
        self._session = session
        self._input_name = session.get_inputs()[0].name

    def _to_model_input(self, x: np.ndarray) -> np.ndarray:
        if self.spec.layout == "nchw":
            x = np.transpose(x, (2, 0, 1))
        return np.ascontiguousarray(x[None, ...], dtype=np.float32)

    def _from_model_output(self, y: np.ndarray) -> np.ndarray:
        y = y[0] if y.ndim >= 2 and y.shape[0] == 1 else y
        if self.spec.layout == "nchw" and y.ndim == 3:
            y = np.transpose(y, (1, 2, 0))
        return y

    def _raw(self, x: np.ndarray) -> np.ndarray:
        return self._session.run(None, {self._input_name: self._to_model_input(x)})[0]

    def _run(self, x: np.ndarray) -> np.ndarray:
        return self._from_model_output(self._raw(x))


def _probe_output_shape(backbone: OnnxBackbone) -> tuple[int, ...]:
    zeros = np.zeros(INPUT_SHAPE, dtype=np.float32)
    try:
        return tuple(backbone._run(zeros).shape)
    except Exception as exc:
        raise ModelLoadError(f"backbone {backbone.name!r}: probe inference failed: {exc}") from exc


def _shapes_agree(declared: tuple[int, ...], actual: tuple[int, ...]) -> bool:
    if declared == actual:
        return True
    # A model emitting an already-flat vector is accepted when the lengths agree.
    return len(actual) == 1 and actual[0] == int(np.prod(declared))


def load_backbone(spec: BackboneSpec) -> Backbone:
    """Return an inference-ready backbone for ``spec``.

    For ONNX models the real output shape is measured with one probe
    inference and checked against ``spec.declared_output_shape``.

    Raises:
        ModelLoadError: missing/unreadable model file or unusable input tensor.
        ShapeMismatch: declared and actual output shapes disagree.
    """
    if spec.name == "stub" and spec.model_path is None:
        actual = (STUB_GRID, STUB_GRID, 3)
        if spec.declared_output_shape is not None and spec.declared_output_shape != actual:
            raise ShapeMismatch(spec.declared_output_shape, actual, spec.name)
        return StubBackbone(spec)

    if spec.model_path is None:
        raise ModelLoadError(f"backbone {spec.name!r} needs a model_path (see the registry)")
    path = Path(spec.model_path)
    if not path.is_file():
        raise ModelLoadError(f"backbone {spec.name!r}: model file not found: {path}")
    try:
        import onnxruntime as ort
    except ImportError as exc:  # pragma: no cover - declared dependency
        raise ModelLoadError("onnxruntime is required for non-stub backbones") from exc

    opts = ort.SessionOptions()
    opts.log_severity_level = 3
    try:
        session = ort.InferenceSession(str(path), sess_options=opts, providers=["CPUExecutionProvider"])
    except Exception as exc:
        raise ModelLoadError(f"backbone {spec.name!r}: cannot load {path}: {exc}") from exc

    inputs, outputs = session.get_inputs(), session.get_outputs()
    if len(inputs) != 1 or len(outputs) < 1:
        raise ModelLoadError(
            f"backbone {spec.name!r}: expected one input and one output tensor, "
            f"got {len(inputs)} inputs and {len(outputs)} outputs"
        )
    expected_in = (1, *INPUT_SHAPE) if spec.layout == "nhwc" else (1, 3, TARGET_SIZE, TARGET_SIZE)
    declared_in = inputs[0].shape
    if len(declared_in) != 4 or any(
        isinstance(d, int) and d != e for d, e in zip(declared_in, expected_in)
    ):
        raise ModelLoadError(
            f"backbone {spec.name!r}: input tensor shape {declared_in} does not match "
            f"{expected_in} for layout {spec.layout}"
        )

    backbone = OnnxBackbone(spec, session, (1,))
    actual = _probe_output_shape(backbone)
    if spec.declared_output_shape is not None and not _shapes_agree(spec.declared_output_shape, actual):
        raise ShapeMismatch(spec.declared_output_shape, actual, spec.name)
    shape = spec.declared_output_shape or actual
    return OnnxBackbone(spec, session, shape)


def extract_features(
    backbone: Backbone, frame: FrameTensor, label_index: int | None = None, split: str | None = None
) -> FeatureVector:
    values = backbone.extract(frame)
    return FeatureVector(values, frame.video_id, frame.frame_index, label_index, split, backbone.name)


def load_registry(path: str | Path) -> dict[str, BackboneSpec]:
    """Read a backbone registry (JSON or TOML).

    Accepted shapes: ``{"backbones": {name: entry}}`` or ``{name: entry}``
    where each entry may set ``model_path`` (relative to the registry file),
    ``layout``, ``declared_output_shape`` and ``preprocessing``.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ModelLoadError(f"cannot read backbone registry {path}: {exc}") from exc
    if path.suffix.lower() == ".toml":
        from ._toml import loads as toml_loads

        data = toml_loads(raw.decode("utf-8"))
    else:
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"registry {path} is not valid JSON: {exc}") from None
    entries = data.get("backbones", data)
    specs = {}
    for name, entry in entries.items():
        entry = dict(entry)
        model_path = entry.get("model_path")
        if model_path is not None and not Path(model_path).is_absolute():
            model_path = str(path.parent / model_path)
        shape = entry.get("declared_output_shape")
        specs[name.lower()] = BackboneSpec(
            name=name,
            model_path=model_path,
            declared_output_shape=tuple(shape) if shape is not None else None,
            preprocessing=Preprocessing.parse(entry.get("preprocessing")),
            layout=entry.get("layout", "nhwc"),
        )
    return specs


def resolve_spec(name: str, registry: Mapping[str, BackboneSpec] | None = None) -> BackboneSpec:
    name = name.strip().lower()
    if registry and name in registry:
        return registry[name]
    if name == "stub":
        return BackboneSpec("stub")
    raise ConfigError(
        f"backbone {name!r} is not in the registry; only 'stub' is built in "
        f"(pass --registry to map {name!r} to a model file)"
    )


@dataclass(frozen=True)
class NormStats:
    """Per-dimension min/max of the training-split features."""

    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.minimum, dtype=np.float64)
        hi = np.asarray(self.maximum, dtype=np.float64)
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise DimensionMismatch(f"min/max shapes differ: {lo.shape} vs {hi.shape}")
        if np.any(lo > hi):
            raise ShapeError("normalisation stats have min > max")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)

    @property
    def dimension(self) -> int:
        return self.minimum.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "NormStats":
        return cls(np.zeros(dim), np.ones(dim))

    def to_json(self) -> dict:
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_json(cls, data: Mapping) -> "NormStats":
        return cls(np.asarray(data["min"], dtype=np.float64), np.asarray(data["max"], dtype=np.float64))


def _as_matrix(features: Iterable[FeatureVector | np.ndarray]) -> np.ndarray:
    rows = [f.values if isinstance(f, FeatureVector) else np.asarray(f) for f in features]
    if not rows:
        raise EmptySet("no features to fit normalisation statistics on")
    dims = {r.shape for r in rows}
    if len(dims) != 1 or rows[0].ndim != 1:
        raise DimensionMismatch(f"features have mixed shapes {sorted(dims)}")
    return np.stack(rows).astype(np.float64)


def fit_feature_normalizer(train_features: Sequence[FeatureVector | np.ndarray]) -> NormStats:
    """Per-dimension min and max over the given (training-split) features."""
    if isinstance(train_features, np.ndarray) and train_features.ndim == 2:
        if train_features.shape[0] == 0:
            raise EmptySet("no features to fit normalisation statistics on")
        matrix = train_features.astype(np.float64)
    else:
        matrix = _as_matrix(train_features)
    if not np.all(np.isfinite(matrix)):
        raise NonFiniteInput("training features contain non-finite values")
    return NormStats(matrix.min(axis=0), matrix.max(axis=0))


def normalize_matrix(stats: NormStats, x: np.ndarray) -> np.ndarray:
    """Min-max scale rows of ``x``; constant dimensions map to 0, nothing is clamped."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stats.dimension:
        raise DimensionMismatch(
            f"feature dimension {x.shape[-1]} does not match normaliser dimension {stats.dimension}"
        )
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - stats.minimum) / safe, 0.0)


def apply_feature_normalizer(stats: NormStats, feature: FeatureVector) -> FeatureVector:
    values = normalize_matrix(stats, feature.values)
    return FeatureVector(
        values, feature.video_id, feature.frame_index, feature.label_index, feature.split, feature.backbone
    )
