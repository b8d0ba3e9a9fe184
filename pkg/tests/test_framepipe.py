import math
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from actionsense.errors import DecodeError, DecoderUnavailable, EmptyStream, InvalidFrame, ShapeError
from actionsense.framepipe import (
    DecoderConfig,
    RawFrame,
    decode_frames,
    normalize_pixels,
    preprocess_video,
    resample_indices,
    resize_frame,
    sample_frames,
)
from actionsense.synthetic import decoder_command, probe_command, write_clip


def stream(n, h=4, w=4):
    return [RawFrame(np.zeros((h, w, 3), np.uint8), i) for i in range(n)]


def synth_decoder(**kw):
    return DecoderConfig(decoder_command(sys.executable), probe_command=probe_command(sys.executable), **kw)


def bilinear_point(src, y, x):
    """Scalar bilinear evaluation of ``src`` at continuous (y, x), edge-clamped."""
    h, w = src.shape
    y = min(max(y, 0.0), h - 1)
    x = min(max(x, 0.0), w - 1)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    return top * (1 - fy) + bot * fy


class TestSampleFrames:
    def test_ninety_at_thirty(self):
        assert [f.frame_index for f in sample_frames(stream(90), 30)] == [0, 30, 60]

    def test_short_stream(self):
        assert [f.frame_index for f in sample_frames(stream(29), 30)] == [0]

    def test_fps_one_keeps_all(self):
        assert len(sample_frames(stream(17), 1)) == 17

    def test_empty(self):
        with pytest.raises(EmptyStream):
            sample_frames([], 30)

    @given(st.integers(min_value=1, max_value=600), st.integers(min_value=1, max_value=120))
    def test_count_and_gaps(self, n, fps):
        kept = [f.frame_index for f in sample_frames(stream(n, 1, 1), fps)]
        assert len(kept) == math.ceil(n / fps)
        assert all(b - a == fps for a, b in zip(kept, kept[1:]))


class TestResize:
    def test_constant_fixed_point(self):
        frame = RawFrame(np.full((720, 1280, 3), 200, np.uint8), 0)
        out = resize_frame(frame)
        assert out.data.shape == (224, 224, 3)
        assert np.all(out.data == 200)

    def test_identity_size(self, rng):
        data = rng.integers(0, 256, size=(224, 224, 3), dtype=np.uint8)
        out = resize_frame(RawFrame(data, 3))
        assert out.data.tobytes() == data.tobytes()
        assert out.frame_index == 3

    def test_checkerboard_centre_against_formula(self):
        board = np.array([[0, 255], [255, 0]], dtype=np.uint8)
        frame = RawFrame(np.repeat(board[:, :, None], 3, axis=2), 0)
        out = resize_frame(frame).data[..., 0]
        scale = 2 / 224
        for i, j in [(111, 111), (112, 112), (100, 120), (60, 170)]:
            expected = bilinear_point(board.astype(float), (i + 0.5) * scale - 0.5, (j + 0.5) * scale - 0.5)
            assert out[i, j] == int(np.rint(expected))
        assert 0 < out[111, 111] < 255 and 0 < out[112, 112] < 255

    def test_random_downscale_matches_pointwise_oracle(self, rng):
        src = rng.integers(0, 256, size=(37, 53, 3), dtype=np.uint8)
        out = resize_frame(RawFrame(src, 0)).data
        sy, sx = 37 / 224, 53 / 224
        for i, j in rng.integers(0, 224, size=(40, 2)):
            for c in range(3):
                expected = bilinear_point(src[..., c].astype(float), (i + 0.5) * sy - 0.5, (j + 0.5) * sx - 0.5)
                assert out[i, j, c] == int(np.rint(expected))

    @pytest.mark.parametrize("shape", [(720, 1280), (100, 50), (300, 300)])
    def test_mean_preserved_for_gradient(self, shape):
        h, w = shape
        ramp = np.linspace(0, 255, w)[None, :].repeat(h, axis=0)
        data = np.repeat(np.rint(ramp)[:, :, None], 3, axis=2).astype(np.uint8)
        out = resize_frame(RawFrame(data, 0)).data
        assert abs(out.mean() - data.mean()) <= 1.0

    def test_zero_sized(self):
        with pytest.raises(InvalidFrame):
            resize_frame(RawFrame(np.zeros((0, 5, 3), np.uint8), 0))


class TestNormalize:
    def test_values(self):
        data = np.zeros((224, 224, 3), np.uint8)
        data[0, 0, 0] = 255
        data[0, 1, 0] = 128
        t = normalize_pixels(RawFrame(data, 7, "vid"))
        assert t.values[0, 2, 0] == 0.0
        assert t.values[0, 0, 0] == 1.0
        assert t.values[0, 1, 0] == pytest.approx(0.501961, abs=1e-6)
        assert (t.video_id, t.frame_index) == ("vid", 7)

    def test_bijective_monotone(self):
        levels = np.arange(256, dtype=np.uint8)
        data = np.zeros((224, 224, 3), np.uint8)
        data.reshape(-1)[:256] = levels
        vals = normalize_pixels(RawFrame(data, 0)).values.reshape(-1)[:256]
        assert np.all(np.diff(vals) > 0)
        np.testing.assert_allclose(vals, levels / 255.0, rtol=0, atol=1e-7)

    def test_wrong_shape(self):
        with pytest.raises(ShapeError):
            normalize_pixels(RawFrame(np.zeros((10, 10, 3), np.uint8), 0))


class TestResampleIndices:
    def test_passthrough(self):
        assert resample_indices(5, 30, 30) == [0, 1, 2, 3, 4]

    def test_halving(self):
        assert resample_indices(180, 60, 30) == list(range(0, 180, 2))

    def test_doubling(self):
        assert resample_indices(3, 15, 30) == [0, 0, 1, 1, 2, 2]


class TestDecode:
    def test_frame_directory_passthrough(self, tmp_path):
        for i in range(90):
            Image.fromarray(np.full((8, 12, 3), i, np.uint8)).save(tmp_path / f"{i:04d}.png")
        frames = list(decode_frames(tmp_path, 30, fps_hint=30))
        assert [f.frame_index for f in frames] == list(range(90))
        assert frames[42].data[0, 0, 0] == 42

    def test_frame_directory_resampled(self, tmp_path):
        for i in range(120):
            Image.fromarray(np.full((4, 4, 3), i, np.uint8)).save(tmp_path / f"{i:04d}.png")
        frames = list(decode_frames(tmp_path, 30, fps_hint=60))
        assert len(frames) == 60
        assert [f.data[0, 0, 0] for f in frames[:3]] == [0, 2, 4]

    def test_subprocess_resamples_sixty_to_thirty(self, tmp_path):
        clip = write_clip(tmp_path / "c.synth", 1, seed=3, fps=60, duration_s=3.0, geometry=(64, 36))
        frames = list(decode_frames(clip, 30, decoder=synth_decoder()))
        # counted independently: 3 s of a 60 fps clip is 180 native frames, every other one at 30 fps
        assert len(frames) == 90
        assert [f.frame_index for f in frames] == list(range(90))
        assert frames[0].data.shape == (36, 64, 3)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DecodeError, match="nope.mp4"):
            decode_frames(tmp_path / "nope.mp4")

    def test_decoder_unavailable(self, tmp_path):
        clip = tmp_path / "x.mp4"
        clip.write_bytes(b"\0")
        cfg = DecoderConfig("definitely-not-a-decoder-xyz {input}", width=4, height=4)
        with pytest.raises(DecoderUnavailable):
            list(decode_frames(clip, decoder=cfg))

    def test_decoder_failure(self, tmp_path):
        clip = tmp_path / "x.mp4"
        clip.write_bytes(b"garbage")
        cfg = DecoderConfig(decoder_command(sys.executable), width=4, height=4)
        with pytest.raises(DecodeError):
            list(decode_frames(clip, decoder=cfg))

    def test_truncated_frame(self, tmp_path):
        clip = tmp_path / "x.bin"
        clip.write_bytes(b"\x01" * (4 * 4 * 3 + 5))
        cfg = DecoderConfig(f"{sys.executable} -c \"import sys; sys.stdout.buffer.write(open(sys.argv[1],'rb').read())\" {{input}}", width=4, height=4)
        with pytest.raises(DecodeError, match="truncated"):
            list(decode_frames(clip, decoder=cfg))

    def test_empty_stream(self, tmp_path):
        clip = tmp_path / "x.bin"
        clip.write_bytes(b"")
        cfg = DecoderConfig(f"{sys.executable} -c pass {{input}}", width=4, height=4)
        with pytest.raises(EmptyStream):
            list(decode_frames(clip, decoder=cfg))

    def test_empty_directory(self, tmp_path):
        with pytest.raises(EmptyStream):
            list(decode_frames(tmp_path))


def test_pipeline_deterministic(tmp_path):
    clip = write_clip(tmp_path / "c.synth", 2, seed=11, fps=30, duration_s=2.0, geometry=(96, 54))
    a = preprocess_video(clip, 30, decoder=synth_decoder())
    b = preprocess_video(clip, 30, decoder=synth_decoder())
    assert [t.frame_index for t in a] == [0, 30]
    for x, y in zip(a, b):
        assert x.values.tobytes() == y.values.tobytes()
        assert x.values.min() >= 0 and x.values.max() <= 1
