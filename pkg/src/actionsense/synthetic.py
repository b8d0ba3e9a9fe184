"""Synthetic clips and features for tests, demos and the acceptance run.

Clips are tiny JSON descriptors (``*.synth``) rendered on demand by a
stand-in decoder that honours the external-decoder contract::

    python -m actionsense.synthetic decode {input} {fps} {width} {height}
    python -m actionsense.synthetic probe {input}

Each class has its own dominant colour and stripe orientation (kick: red,
vertical; punch: green, horizontal; slap: blue, checkerboard), plus a
moving bright square and per-frame noise.
"""

from __future__ import annotations

import json
import math
import sys
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .dataset import DEFAULT_LABELS, MANIFEST_FORMAT, MANIFEST_VERSION

SYNTH_FORMAT = "actionsense-synth"
DEFAULT_GEOMETRY = (320, 180)


def decoder_command(python: str | None = None) -> str:
    exe = python or sys.executable
    return f"{exe} -m actionsense.synthetic decode {{input}} {{fps}} {{width}} {{height}}"


def probe_command(python: str | None = None) -> str:
    exe = python or sys.executable
    return f"{exe} -m actionsense.synthetic probe {{input}}"


@lru_cache(maxsize=32)
def _background(label_index: int, width: int, height: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    u = xs / max(width, 1)
    v = ys / max(height, 1)
    if label_index % 3 == 0:
        stripes = (np.floor(u * 8) % 2).astype(bool)
    elif label_index % 3 == 1:
        stripes = (np.floor(v * 6) % 2).astype(bool)
    else:
        stripes = ((np.floor(u * 8) + np.floor(v * 6)) % 2).astype(bool)
    frame = np.full((height, width, 3), 50, dtype=np.int16)
    frame[..., label_index % 3] = np.where(stripes, 225, 140)
    frame.flags.writeable = False
    return frame


def render_frame(label_index: int, t: float, seed: int, width: int, height: int) -> np.ndarray:
    """One RGB frame of class ``label_index`` at time ``t`` seconds."""
    rng = np.random.default_rng([seed, int(round(t * 1000))])
    frame = _background(label_index, width, height).copy()

    # moving square
    phase = (seed % 97) / 97.0
    cx = 0.5 + 0.3 * math.sin(2 * math.pi * (t / 3.0 + phase))
    cy = 0.5 + 0.2 * math.cos(2 * math.pi * (t / 2.0 + phase))
    x0, x1 = int((cx - 0.08) * width), int((cx + 0.08) * width)
    y0, y1 = int((cy - 0.12) * height), int((cy + 0.12) * height)
    frame[max(y0, 0) : max(y1, 0), max(x0, 0) : max(x1, 0)] = 235

    frame += rng.integers(-20, 21, size=frame.shape, dtype=np.int16)
    return np.clip(frame, 0, 255).astype(np.uint8)


def write_clip(
    path: str | Path,
    label_index: int | Sequence[int],
    seed: int,
    fps: int = 30,
    duration_s: float = 3.0,
    geometry: tuple[int, int] = DEFAULT_GEOMETRY,
) -> Path:
    """Write a ``.synth`` descriptor.

    ``label_index`` may be a per-second schedule, e.g. ``[0, 0, 1, 0, 0]``.
    """
    schedule = [label_index] if isinstance(label_index, int) else list(label_index)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    desc = {
        "format": SYNTH_FORMAT,
        "schedule": schedule,
        "seed": seed,
        "fps": fps,
        "duration_s": duration_s,
        "width": geometry[0],
        "height": geometry[1],
    }
    path.write_text(json.dumps(desc) + "\n", encoding="utf-8")
    return path


def _load_descriptor(path: str | Path) -> dict:
    desc = json.loads(Path(path).read_text(encoding="utf-8"))
    if desc.get("format") != SYNTH_FORMAT:
        raise ValueError(f"{path} is not a synthetic clip descriptor")
    return desc


def clip_frames(desc: dict, fps: int, width: int, height: int):
    """Frames of a descriptor resampled to ``fps`` (latest native frame at each tick)."""
    native = int(desc["fps"])
    n_native = int(round(desc["duration_s"] * native))
    n_out = max(1, round(n_native * fps / native))
    schedule = desc["schedule"]
    for j in range(n_out):
        src = min(n_native - 1, (j * native) // fps)
        t = src / native
        label = schedule[min(int(t), len(schedule) - 1)]
        yield render_frame(label, t, int(desc["seed"]), width, height)


def write_frame_directory(
    directory: str | Path,
    label_index: int,
    seed: int,
    n_frames: int = 90,
    fps: int = 30,
    geometry: tuple[int, int] = DEFAULT_GEOMETRY,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(n_frames):
        img = render_frame(label_index, i / fps, seed, *geometry)
        Image.fromarray(img).save(directory / f"{i:06d}.png")
    return directory


def make_dataset(
    root: str | Path,
    per_class: int = 10,
    labels: Sequence[str] = DEFAULT_LABELS,
    fps: int = 30,
    duration_s: float = 3.0,
    geometry: tuple[int, int] = DEFAULT_GEOMETRY,
    seed: int = 0,
) -> Path:
    """Write ``per_class`` clips per label plus an unsplit manifest; returns the manifest path."""
    root = Path(root)
    clips = root / "clips"
    rows = [json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "labels": list(labels)})]
    for li, label in enumerate(labels):
        for j in range(per_class):
            video_id = f"{label}_{j:03d}"
            clip_seed = seed * 100003 + li * 1009 + j
            write_clip(clips / f"{video_id}.synth", li, clip_seed, fps, duration_s, geometry)
            rows.append(
                json.dumps(
                    {
                        "video_id": video_id,
                        "source": f"clips/{video_id}.synth",
                        "label": label,
                        "fps": fps,
                        "duration_s": duration_s,
                    }
                )
            )
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return manifest


def gaussian_blobs(
    n: int = 300,
    dim: int = 64,
    k: int = 3,
    separation: float = 6.0,
    sigma: float = 1.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Balanced isotropic blobs with class means ``separation * sigma`` apart (pairwise).

    Means sit on scaled coordinate axes, ``separation * sigma / sqrt(2) * e_c``,
    so every pair of class means is exactly ``separation * sigma`` apart.
    """
    rng = np.random.default_rng(seed)
    y = np.arange(n) % k
    means = np.zeros((k, dim))
    for c in range(k):
        means[c, c] = separation * sigma / math.sqrt(2.0)
    x = means[y] + rng.normal(0.0, sigma, size=(n, dim))
    perm = rng.permutation(n)
    return x[perm], y[perm]


def _main(argv: Sequence[str]) -> int:
    if len(argv) >= 2 and argv[0] == "probe":
        desc = _load_descriptor(argv[1])
        print(f"{desc['width']},{desc['height']}")
        return 0
    if len(argv) == 5 and argv[0] == "decode":
        desc = _load_descriptor(argv[1])
        fps, width, height = int(argv[2]), int(argv[3]), int(argv[4])
        out = sys.stdout.buffer
        for frame in clip_frames(desc, fps, width, height):
            out.write(frame.tobytes())
        out.flush()
        return 0
    print("usage: python -m actionsense.synthetic {probe FILE | decode FILE FPS WIDTH HEIGHT}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(_main(sys.argv[1:]))
