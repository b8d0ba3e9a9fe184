import json
import threading

import numpy as np
import pytest

from actionsense.backbone import (
    BackboneSpec,
    FeatureVector,
    NormStats,
    Preprocessing,
    apply_feature_normalizer,
    extract_features,
    fit_feature_normalizer,
    load_backbone,
    load_registry,
    resolve_spec,
)
from actionsense.errors import (
    ConfigError,
    DimensionMismatch,
    EmptySet,
    ModelLoadError,
    ShapeMismatch,
)
from actionsense.featcache import FeatureCache, decode_matrix, encode_matrix
from actionsense.errors import FormatError
from actionsense.framepipe import FrameTensor


def frame(values, vid="v", idx=0):
    return FrameTensor(np.asarray(values, dtype=np.float32), vid, idx)


def block_mean_oracle(img):
    """7x7 grid cell means by explicit loops."""
    out = np.zeros((7, 7, 3))
    for gy in range(7):
        for gx in range(7):
            for c in range(3):
                total = 0.0
                for y in range(gy * 32, gy * 32 + 32):
                    for x in range(gx * 32, gx * 32 + 32):
                        total += float(img[y, x, c])
                out[gy, gx, c] = total / (32 * 32)
    return out.reshape(-1)


class TestStub:
    def test_constant_frame(self):
        bb = load_backbone(BackboneSpec("stub", declared_output_shape=(7, 7, 3)))
        fv = extract_features(bb, frame(np.full((224, 224, 3), 0.37)))
        assert fv.values.shape == (147,)
        assert np.all(fv.values == np.float32(0.37))

    def test_left_right_halves(self):
        img = np.zeros((224, 224, 3), np.float32)
        img[:, 112:, :] = 1.0
        vals = extract_features(load_backbone(BackboneSpec("stub")), frame(img)).values.reshape(7, 7, 3)
        np.testing.assert_array_equal(vals, block_mean_oracle(img).reshape(7, 7, 3))
        assert np.all(vals[:, 0, :] == 0.0)
        assert np.all(vals[:, 6, :] == 1.0)

    def test_matches_block_mean_oracle(self, rng):
        bb = load_backbone(BackboneSpec("stub"))
        for _ in range(3):
            img = rng.random((224, 224, 3)).astype(np.float32)
            np.testing.assert_allclose(extract_features(bb, frame(img)).values, block_mean_oracle(img), atol=1e-6)

    def test_flatten_order_is_h_w_c(self, rng):
        img = rng.random((224, 224, 3)).astype(np.float32)
        vals = extract_features(load_backbone(BackboneSpec("stub")), frame(img)).values
        cube = vals.reshape(7, 7, 3)
        assert cube[2, 5, 1] == vals[(2 * 7 + 5) * 3 + 1]
        np.testing.assert_array_equal(cube.reshape(-1), vals)

    def test_declared_mismatch(self):
        with pytest.raises(ShapeMismatch):
            load_backbone(BackboneSpec("stub", declared_output_shape=(7, 7, 4)))

    def test_provenance(self):
        fv = extract_features(load_backbone(BackboneSpec("stub")), frame(np.zeros((224, 224, 3)), "clip9", 60), 2, "val")
        assert (fv.video_id, fv.frame_index, fv.label_index, fv.split, fv.backbone) == ("clip9", 60, 2, "val", "stub")

    def test_concurrent_extraction_is_deterministic(self, rng):
        bb = load_backbone(BackboneSpec("stub"))
        imgs = [rng.random((224, 224, 3)).astype(np.float32) for _ in range(8)]
        serial = [bb.extract(frame(i)) for i in imgs]
        results = [None] * len(imgs)

        def work(k):
            results[k] = bb.extract(frame(imgs[k]))

        threads = [threading.Thread(target=work, args=(k,)) for k in range(len(imgs))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for a, b in zip(serial, results):
            assert a.tobytes() == b.tobytes()


class TestSpecs:
    def test_known_shapes(self):
        assert BackboneSpec("vgg16").flat_length == 25088
        assert BackboneSpec("resnet50").flat_length == 100352
        assert BackboneSpec("xception").flat_length == 100352
        assert BackboneSpec("mobilenet_v2").declared_output_shape is None

    def test_input_shape_fixed(self):
        with pytest.raises(ConfigError):
            BackboneSpec("stub", input_shape=(299, 299, 3))

    def test_preprocessing(self):
        x = np.array([0.0, 0.5, 1.0], dtype=np.float32)
        np.testing.assert_allclose(Preprocessing("symmetric_unit_interval").apply(x), [-1, 0, 1])
        p = Preprocessing.parse({"mean": [0.5, 0.5, 0.5], "scale": [2, 2, 2]})
        np.testing.assert_allclose(p.apply(np.full((2, 3), 1.0, np.float32)), 1.0)
        with pytest.raises(ConfigError):
            Preprocessing("imagenet")

    def test_resolve_unknown(self):
        with pytest.raises(ConfigError, match="registry"):
            resolve_spec("vgg16")
        assert resolve_spec("stub").name == "stub"


class TestOnnx:
    def test_vgg_class_shape(self, onnx_model_factory):
        path = onnx_model_factory(512)
        bb = load_backbone(BackboneSpec("vgg16", model_path=str(path)))
        assert bb.flat_length == 25088
        fv = extract_features(bb, frame(np.full((224, 224, 3), 0.5)))
        assert fv.values.shape == (25088,)

    def test_resnet_class_shape(self, onnx_model_factory):
        bb = load_backbone(BackboneSpec("resnet50", model_path=str(onnx_model_factory(2048))))
        assert bb.flat_length == 100352

    def test_shape_mismatch(self, onnx_model_factory):
        path = onnx_model_factory(2048)
        with pytest.raises(ShapeMismatch) as info:
            load_backbone(BackboneSpec("vgg16", model_path=str(path)))
        assert info.value.declared == (7, 7, 512)
        assert info.value.actual == (7, 7, 2048)
        assert "(7, 7, 512)" in str(info.value) and "(7, 7, 2048)" in str(info.value)

    def test_unstated_shape_taken_from_model(self, onnx_model_factory):
        bb = load_backbone(BackboneSpec("mobilenet_v2", model_path=str(onnx_model_factory(6))))
        assert bb.output_shape == (7, 7, 6)

    @pytest.mark.parametrize("layout", ["nhwc", "nchw"])
    def test_three_channel_model_equals_stub(self, onnx_model_factory, rng, layout):
        path = onnx_model_factory(3, layout=layout)
        onnx_bb = load_backbone(BackboneSpec("custom", model_path=str(path), declared_output_shape=(7, 7, 3), layout=layout))
        stub = load_backbone(BackboneSpec("stub"))
        img = frame(rng.random((224, 224, 3)))
        np.testing.assert_allclose(onnx_bb.extract(img), stub.extract(img), atol=1e-6)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ModelLoadError):
            load_backbone(BackboneSpec("vgg16", model_path=str(tmp_path / "none.onnx")))

    def test_garbage_file(self, tmp_path):
        bad = tmp_path / "bad.onnx"
        bad.write_bytes(b"not a model")
        with pytest.raises(ModelLoadError):
            load_backbone(BackboneSpec("vgg16", model_path=str(bad)))

    def test_wrong_layout(self, onnx_model_factory):
        path = onnx_model_factory(3, layout="nchw")
        with pytest.raises(ModelLoadError):
            load_backbone(BackboneSpec("x", model_path=str(path), layout="nhwc"))

    def test_registry(self, tmp_path, onnx_model_factory):
        path = onnx_model_factory(512, name="vgg.onnx")
        reg = tmp_path / "registry.json"
        reg.write_text(json.dumps({"backbones": {"vgg16": {"model_path": path.name, "layout": "nhwc",
                                                           "declared_output_shape": [7, 7, 512],
                                                           "preprocessing": "symmetric_unit_interval"}}}))
        specs = load_registry(reg)
        assert specs["vgg16"].model_path == str(path)
        assert specs["vgg16"].preprocessing.kind == "symmetric_unit_interval"
        assert load_backbone(resolve_spec("vgg16", specs)).flat_length == 25088


class TestNormalizer:
    def test_fit(self):
        s = fit_feature_normalizer([np.array([0.0, 2.0]), np.array([1.0, 4.0])])
        np.testing.assert_array_equal(s.minimum, [0, 2])
        np.testing.assert_array_equal(s.maximum, [1, 4])

    def test_single(self):
        s = fit_feature_normalizer([np.array([5.0, 5.0])])
        np.testing.assert_array_equal(s.minimum, s.maximum)

    def test_mixed_dims(self):
        with pytest.raises(DimensionMismatch):
            fit_feature_normalizer([np.zeros(3), np.zeros(4)])

    def test_empty(self):
        with pytest.raises(EmptySet):
            fit_feature_normalizer([])

    @pytest.mark.parametrize(
        "lo,hi,x,expected",
        [([0.0], [10.0], [10.0], [1.0]), ([5.0], [5.0], [5.0], [0.0]), ([0.0], [10.0], [12.0], [1.2])],
    )
    def test_apply(self, lo, hi, x, expected):
        out = apply_feature_normalizer(NormStats(np.array(lo), np.array(hi)), FeatureVector(np.array(x)))
        np.testing.assert_allclose(out.values, expected)

    def test_apply_dimension(self):
        with pytest.raises(DimensionMismatch):
            apply_feature_normalizer(NormStats.identity(3), FeatureVector(np.zeros(4)))

    def test_training_set_lands_in_unit_box(self, rng):
        feats = [FeatureVector(v) for v in rng.normal(size=(50, 20)) * rng.uniform(0.1, 10, 20)]
        stats = fit_feature_normalizer(feats)
        out = np.stack([apply_feature_normalizer(stats, f).values for f in feats])
        assert out.min() >= 0.0 and out.max() <= 1.0
        np.testing.assert_allclose(out.min(axis=0), 0.0)
        np.testing.assert_allclose(out.max(axis=0), 1.0)


class TestFeatureCache:
    def test_matrix_roundtrip(self, rng):
        m = rng.random((5, 7)).astype(np.float32)
        blob = encode_matrix(m)
        assert blob[:4] == b"AFV1"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 5
        assert int.from_bytes(blob[12:16], "little") == 7
        assert len(blob) == 16 + 5 * 7 * 4
        np.testing.assert_array_equal(decode_matrix(blob), m)

    def test_bad_magic_and_truncation(self, rng):
        blob = encode_matrix(rng.random((2, 3)))
        with pytest.raises(FormatError):
            decode_matrix(b"XXXX" + blob[4:])
        with pytest.raises(FormatError):
            decode_matrix(blob[:-1])

    def test_directory_roundtrip(self, tmp_path, rng):
        m = rng.random((3, 4)).astype(np.float32)
        index = [{"video_id": "a", "frame_index": i * 30, "label_index": 1, "split": "train"} for i in range(3)]
        FeatureCache(m, index, {"backbone": "stub"}).save(tmp_path / "c")
        c = FeatureCache.load(tmp_path / "c")
        np.testing.assert_array_equal(c.matrix, m)
        assert c.index == index
        vecs = c.vectors(["train"])
        assert [v.frame_index for v in vecs] == [0, 30, 60]
        assert vecs[0].backbone == "stub"
