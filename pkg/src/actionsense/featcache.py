"""On-disk feature cache.

Layout of a cache directory::

    features.afv   b"AFV1", u32 version (1), u32 rows, u32 cols, rows*cols f32 (all little-endian)
    index.jsonl    one object per matrix row: video_id, frame_index, label_index, split
    meta.json      backbone name and preprocessing the rows were extracted with
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import FeatureVector
from .errors import FormatError, IoError

MAGIC = b"AFV1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")

MATRIX_FILE = "features.afv"
INDEX_FILE = "index.jsonl"
META_FILE = "meta.json"


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def encode_matrix(matrix: np.ndarray) -> bytes:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    rows, cols = matrix.shape
    return _HEADER.pack(MAGIC, VERSION, rows, cols) + matrix.astype("<f4").tobytes(order="C")


def decode_matrix(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError(f"{source}: too short for an AFV1 header")
    magic, version, rows, cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    expected = _HEADER.size + rows * cols * 4
    if len(blob) != expected:
        raise FormatError(f"{source}: expected {expected} bytes for {rows}x{cols}, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size, count=rows * cols)
    return data.reshape(rows, cols).astype(np.float32)


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    _atomic_write(Path(path), encode_matrix(matrix))


def read_matrix(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read feature matrix {path}: {exc}") from exc
    return decode_matrix(blob, str(path))


@dataclass
class FeatureCache:
    matrix: np.ndarray
    index: list[dict]
    meta: dict

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.index):
            raise FormatError(
                f"feature matrix has {self.matrix.shape[0]} rows but index has {len(self.index)}"
            )

    @property
    def backbone(self) -> str | None:
        return self.meta.get("backbone")

    def video_ids(self) -> set[str]:
        return {row["video_id"] for row in self.index}

    def vectors(self, splits: Sequence[str] | None = None) -> list[FeatureVector]:
        out = []
        for row, values in zip(self.index, self.matrix):
            if splits is not None and row.get("split") not in splits:
                continue
            out.append(
                FeatureVector(
                    values,
                    row["video_id"],
                    int(row["frame_index"]),
                    row.get("label_index"),
                    row.get("split"),
                    self.backbone,
                )
            )
        return out

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        try:
            directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoError(f"cannot create {directory}: {exc}") from exc
        write_matrix(directory / MATRIX_FILE, self.matrix)
        lines = [
            json.dumps(
                {
                    "video_id": row["video_id"],
                    "frame_index": int(row["frame_index"]),
                    "label_index": row.get("label_index"),
                    "split": row.get("split"),
                }
            )
            for row in self.index
        ]
        _atomic_write(directory / INDEX_FILE, ("\n".join(lines) + "\n" if lines else "").encode())
        _atomic_write(directory / META_FILE, (json.dumps(self.meta, indent=2, sort_keys=True) + "\n").encode())

    @classmethod
    def load(cls, directory: str | Path) -> "FeatureCache":
        directory = Path(directory)
        matrix = read_matrix(directory / MATRIX_FILE)
        try:
            index_text = (directory / INDEX_FILE).read_text(encoding="utf-8")
            meta = json.loads((directory / META_FILE).read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoError(f"incomplete feature cache in {directory}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{directory / META_FILE}: {exc}") from None
        index = []
        for lineno, line in enumerate(index_text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                index.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{directory / INDEX_FILE}:{lineno}: {exc.msg}") from None
        return cls(matrix, index, meta)

    @classmethod
    def exists(cls, directory: str | Path) -> bool:
        directory = Path(directory)
        return all((directory / f).is_file() for f in (MATRIX_FILE, INDEX_FILE, META_FILE))
