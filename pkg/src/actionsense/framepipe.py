"""Video source -> sampled, resized, pixel-normalised frame tensors.

Order of operations per video: decode at a fixed rate (30 fps by default),
keep one frame per second (``frame_index % fps == 0``), resize each kept
frame bilinearly to 224x224, and divide by 255.
"""

from __future__ import annotations

import shlex
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DecodeError,
    DecoderUnavailable,
    EmptyStream,
    InvalidFrame,
    ShapeError,
    ValidationError,
)

TARGET_SIZE = 224
DEFAULT_FPS = 30
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm", ".tif", ".tiff", ".webp"}

DEFAULT_DECODER = (
    "ffmpeg -nostdin -v error -i {input} "
    "-vf fps={fps},scale={width}:{height}:flags=bilinear -f rawvideo -pix_fmt rgb24 -"
)
DEFAULT_PROBE = (
    "ffprobe -v error -select_streams v:0 -show_entries stream=width,height -of csv=p=0 {input}"
)


@dataclass(frozen=True)
class RawFrame:
    """One decoded RGB frame, ``data`` shaped (height, width, 3) uint8."""

    data: np.ndarray
    frame_index: int
    video_id: str = ""

    def __post_init__(self):
        data = self.data
        if data.dtype != np.uint8 or data.ndim != 3 or data.shape[2] != 3:
            raise InvalidFrame(f"expected (H, W, 3) uint8 frame, got {data.dtype} {data.shape}")
        if self.frame_index < 0:
            raise InvalidFrame("frame_index must be non-negative")
        data.flags.writeable = False

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3


@dataclass(frozen=True)
class FrameTensor:
    """A 224x224x3 float32 frame with values in [0, 1]."""

    values: np.ndarray
    video_id: str = ""
    frame_index: int = 0

    def __post_init__(self):
        if self.values.shape != (TARGET_SIZE, TARGET_SIZE, 3):
            raise ShapeError(f"frame tensor must be 224x224x3, got {self.values.shape}")
        self.values.flags.writeable = False


@dataclass(frozen=True)
class DecoderConfig:
    """External decoder invocation.

    ``command`` is a shell-style template with ``{input}``, ``{fps}``,
    ``{width}`` and ``{height}`` placeholders; the process must write raw
    RGB24 frames of exactly ``width * height * 3`` bytes to stdout. When
    ``width``/``height`` are not set they are obtained by running
    ``probe_command``, which must print ``<width>,<height>``.
    """

    command: str = DEFAULT_DECODER
    width: int | None = None
    height: int | None = None
    probe_command: str | None = DEFAULT_PROBE
    timeout: float | None = None


def _render(template: str, **values) -> list[str]:
    # Substitute per token so paths containing spaces stay single arguments.
    return [tok.format(**values) for tok in shlex.split(template)]


def _check_executable(argv: Sequence[str]) -> None:
    if not argv:
        raise DecoderUnavailable("decoder command is empty")
    if shutil.which(argv[0]) is None:
        raise DecoderUnavailable(f"decoder executable {argv[0]!r} not found on PATH")


def _probe_geometry(source: Path, config: DecoderConfig) -> tuple[int, int]:
    if config.width and config.height:
        return config.width, config.height
    if not config.probe_command:
        raise DecodeError(f"{source}: decoder geometry unknown and no probe command configured")
    argv = _render(config.probe_command, input=str(source))
    _check_executable(argv)
    proc = subprocess.run(argv, capture_output=True, text=True, timeout=config.timeout)
    if proc.returncode != 0:
        raise DecodeError(f"{source}: probe failed: {proc.stderr.strip()}")
    try:
        w, h = (int(v) for v in proc.stdout.strip().splitlines()[0].split(",")[:2])
    except (ValueError, IndexError):
        raise DecodeError(f"{source}: cannot parse probe output {proc.stdout!r}") from None
    return w, h


def _decode_with_subprocess(
    source: Path, target_fps: int, config: DecoderConfig, video_id: str
) -> Iterator[RawFrame]:
    width, height = _probe_geometry(source, config)
    argv = _render(config.command, input=str(source), fps=target_fps, width=width, height=height)
    _check_executable(argv)
    frame_bytes = width * height * 3
    # stderr goes to a file so a chatty decoder cannot block on a full pipe.
    errlog = tempfile.TemporaryFile()
    try:
        proc = subprocess.Popen(argv, stdout=subprocess.PIPE, stderr=errlog)
    except OSError as exc:
        errlog.close()
        raise DecoderUnavailable(f"cannot start decoder {argv[0]!r}: {exc}") from exc

    index = 0
    try:
        while True:
            buf = proc.stdout.read(frame_bytes)
            if not buf:
                break
            if len(buf) != frame_bytes:
                raise DecodeError(
                    f"{source}: truncated frame {index} ({len(buf)} of {frame_bytes} bytes)"
                )
            data = np.frombuffer(buf, dtype=np.uint8).reshape(height, width, 3).copy()
            yield RawFrame(data, index, video_id)
            index += 1
        code = proc.wait(timeout=config.timeout)
        if code != 0:
            errlog.seek(0)
            stderr = errlog.read().decode(errors="replace").strip()
            raise DecodeError(f"{source}: decoder exited with status {code}: {stderr}")
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait()
        proc.stdout.close()
        errlog.close()
    if index == 0:
        raise EmptyStream(f"{source}: decoder produced no frames")


def list_frame_files(directory: Path) -> list[Path]:
    return sorted(
        (p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.name,
    )


def resample_indices(n_frames: int, source_fps: int, target_fps: int) -> list[int]:
    """Source frame shown at each tick of a ``target_fps`` clock.

    Output frame ``j`` lands at time ``j / target_fps`` and takes the latest
    source frame at or before that instant; the output has
    ``round(n_frames * target_fps / source_fps)`` frames (at least one).
    """
    if source_fps == target_fps:
        return list(range(n_frames))
    n_out = max(1, round(n_frames * target_fps / source_fps))
    return [min(n_frames - 1, (j * source_fps) // target_fps) for j in range(n_out)]


def _decode_directory(
    directory: Path, target_fps: int, fps_hint: int | None, video_id: str
) -> Iterator[RawFrame]:
    files = list_frame_files(directory)
    if not files:
        raise EmptyStream(f"{directory}: no image frames found")
    src_fps = fps_hint or target_fps
    for out_index, src_index in enumerate(resample_indices(len(files), src_fps, target_fps)):
        path = files[src_index]
        try:
            with Image.open(path) as img:
                data = np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
        except OSError as exc:
            raise DecodeError(f"cannot read frame {path}: {exc}") from exc
        yield RawFrame(data, out_index, video_id)


def decode_frames(
    source: str | Path,
    target_fps: int = DEFAULT_FPS,
    fps_hint: int | None = None,
    decoder: DecoderConfig | None = None,
    video_id: str = "",
) -> Iterator[RawFrame]:
    """Decode ``source`` into a stream of RGB frames at ``target_fps``.

    ``source`` is either a directory of numbered images (treated as already
    decoded at ``fps_hint``, default ``target_fps``) or a video file handed
    to the external decoder. Validation of the path happens eagerly; frames
    are produced lazily.

    Raises:
        DecodeError: the path does not exist, or decoding fails.
        DecoderUnavailable: the decoder executable is missing.
        EmptyStream: the source holds zero frames.
    """
    if target_fps <= 0:
        raise ValidationError("target_fps must be positive")
    path = Path(source)
    if not path.exists():
        raise DecodeError(f"video source not found: {path}")
    if path.is_dir():
        return _decode_directory(path, target_fps, fps_hint, video_id)
    return _decode_with_subprocess(path, target_fps, decoder or DecoderConfig(), video_id)


def sample_frames(stream: Iterable[RawFrame], fps: int) -> list[RawFrame]:
    """Keep one frame per second: those with ``frame_index % fps == 0``."""
    if fps <= 0:
        raise ValidationError("fps must be positive")
    kept = [f for f in stream if f.frame_index % fps == 0]
    if not kept:
        raise EmptyStream("no frame survived sampling")
    return kept


def _axis_weights(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Pixel-centre alignment: dst centre (i + 0.5) maps to src (i + 0.5) * n_src / n_dst.
    pos = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, pos - lo


def bilinear_resize(data: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resample of an (H, W, C) array; returns float64."""
    src = data.astype(np.float64)
    y0, y1, wy = _axis_weights(src.shape[0], height)
    x0, x1, wx = _axis_weights(src.shape[1], width)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def resize_frame(frame: RawFrame, size: int = TARGET_SIZE) -> RawFrame:
    if frame.height == 0 or frame.width == 0:
        raise InvalidFrame(f"cannot resize zero-sized frame {frame.data.shape}")
    if frame.data.shape[:2] == (size, size):
        return frame
    out = bilinear_resize(frame.data, size, size)
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return RawFrame(out, frame.frame_index, frame.video_id)


def normalize_pixels(frame: RawFrame) -> FrameTensor:
    if frame.data.shape != (TARGET_SIZE, TARGET_SIZE, 3):
        raise ShapeError(f"normalize_pixels expects 224x224x3, got {frame.data.shape}")
    values = frame.data.astype(np.float32) / np.float32(255.0)
    return FrameTensor(values, frame.video_id, frame.frame_index)


def preprocess_video(
    source: str | Path,
    fps: int = DEFAULT_FPS,
    fps_hint: int | None = None,
    decoder: DecoderConfig | None = None,
    video_id: str = "",
) -> list[FrameTensor]:
    """Full per-video pipeline: decode, sample one frame per second, resize, normalise."""
    stream = decode_frames(source, fps, fps_hint=fps_hint, decoder=decoder, video_id=video_id)
    return [normalize_pixels(resize_frame(f)) for f in sample_frames(stream, fps)]
