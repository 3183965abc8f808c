import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsodm import ops
from fsodm.gradcheck import check_gradients
from fsodm.loss import build_anchors, build_targets, encode_targets, total_loss
from fsodm.dataset import BoxAnnotation
from fsodm.model import (
    FSODM,
    REFERENCE_ANCHORS,
    ModelConfig,
    candidate_detections,
    class_scores,
    decode_boxes,
    reweight,
)
from fsodm.tensor import DimensionError, Tensor, UsageError, precision


@pytest.fixture(scope="module")
def model():
    return FSODM(ModelConfig(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(99)


def tiny_config(**kw):
    base = dict(image_size=32, width_scale=1 / 32, reweight_size=64, res_blocks=1)
    base.update(kw)
    return ModelConfig(**base)


def zero_model(config):
    m = FSODM(config, seed=0)
    for p in m.params.values():
        p.data = np.zeros_like(p.data)
    return m


class TestConfig:
    def test_feature_channels_follow_quarter_width(self):
        assert ModelConfig().feature_channels == (256, 128, 64)

    def test_default_anchor_table_at_128(self):
        cfg = ModelConfig()
        expected = (
            ((19, 14), (25, 32), (60, 52)),
            ((5, 10), (10, 7), (9, 19)),
            ((2, 2), (3, 5), (5, 4)),
        )
        assert cfg.anchor_sizes == tuple(tuple(tuple(float(v) for v in a) for a in s) for s in expected)

    def test_reference_anchors_are_the_published_nine(self):
        flat = sorted(a for s in REFERENCE_ANCHORS for a in s)
        assert flat == sorted([(10, 13), (16, 30), (33, 23), (30, 61), (62, 45), (59, 119), (116, 90), (156, 198), (373, 326)])

    def test_anchors_rescale_with_input(self):
        cfg = ModelConfig()
        np.testing.assert_allclose(cfg.anchors_for(256), 2 * cfg.anchors_for(128))

    @pytest.mark.parametrize("size", [100, 48])
    def test_rejects_indivisible_image_size(self, size):
        with pytest.raises(ValueError):
            ModelConfig(image_size=size)

    def test_dict_roundtrip(self):
        cfg = ModelConfig(width_scale=0.5, num_categories=11)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestMetaFeatures:
    def test_shapes_at_128(self, model):
        feats = model.extract(Tensor(np.zeros((1, 3, 128, 128))))
        assert [f.shape for f in feats] == [(1, 256, 4, 4), (1, 128, 8, 8), (1, 64, 16, 16)]

    @pytest.mark.parametrize("size", [64, 96, 160])
    def test_extents_follow_strides(self, model, size):
        feats = model.extract(Tensor(np.zeros((2, 3, size, size))))
        assert [f.shape[2:] for f in feats] == [(size // s, size // s) for s in (32, 16, 8)]

    def test_indivisible_input_is_rejected(self, model):
        with pytest.raises(DimensionError):
            model.extract(Tensor(np.zeros((1, 3, 100, 100))))

    def test_zero_network_gives_zero_features(self, rng):
        m = zero_model(tiny_config())
        for f in m.extract(Tensor(rng.random((1, 3, 32, 32)))):
            assert not f.data.any()


class TestReweightingModule:
    def test_vector_dims(self, model, rng):
        vs = model.reweighting(Tensor(rng.random((2, 4, 128, 128))))
        assert [v.shape for v in vs] == [(2, 256), (2, 128), (2, 64)]

    def test_route_layers_branch_before_pooling(self, model, rng):
        cap = {}
        model.reweighting(Tensor(rng.random((1, 4, 128, 128))), capture=cap)
        np.testing.assert_array_equal(cap[("in", 11)].data, cap[("out", 8)].data)
        np.testing.assert_array_equal(cap[("in", 16)].data, cap[("out", 13)].data)
        # global max taps see spatial maps of 8x8, 4x4 and 2x2 for a 128 input
        assert cap[("in", 10)].shape[2:] == (8, 8)
        assert cap[("in", 15)].shape[2:] == (4, 4)
        assert cap[("in", 20)].shape[2:] == (2, 2)

    def test_missing_mask_channel(self, model):
        with pytest.raises(UsageError, match="4 channels"):
            model.reweighting(Tensor(np.zeros((1, 3, 128, 128))))

    def test_zero_support_zero_bias_gives_zero_vectors(self):
        m = FSODM(tiny_config(), seed=1)
        for name, p in m.params.items():
            if name.endswith(".bias"):
                p.data = np.zeros_like(p.data)
        for v in m.reweighting(Tensor(np.zeros((2, 4, 64, 64)))):
            assert not v.data.any()


class TestReweight:
    def test_unit_vectors_are_identity(self, model, rng):
        feats = model.extract(Tensor(rng.random((2, 3, 64, 64))))
        ones = [Tensor(np.ones((3, f.shape[1]))) for f in feats]
        for f, r in zip(feats, reweight(feats, ones)):
            for b in range(2):
                for m in range(3):
                    np.testing.assert_array_equal(r.data[b * 3 + m], f.data[b])

    def test_zero_vector_zeroes_its_category(self, model, rng):
        feats = model.extract(Tensor(rng.random((1, 3, 64, 64))))
        vs = [Tensor(np.stack([np.ones(f.shape[1]), np.zeros(f.shape[1])])) for f in feats]
        for r in reweight(feats, vs):
            assert not r.data[1].any()
            assert r.data[0].any()

    def test_matches_diagonal_conv(self, model, rng):
        feats = model.extract(Tensor(rng.random((1, 3, 64, 64))))
        vs = [Tensor(rng.normal(size=(2, f.shape[1]))) for f in feats]
        for f, v, r in zip(feats, vs, reweight(feats, vs)):
            for m in range(2):
                w = np.diag(v.data[m])[:, :, None, None]
                ref = ops.conv2d(f, Tensor(w)).data
                np.testing.assert_allclose(r.data[m], ref[0], rtol=1e-6, atol=1e-7)

    def test_dimension_mismatch(self, model, rng):
        feats = model.extract(Tensor(rng.random((1, 3, 64, 64))))
        with pytest.raises(DimensionError):
            reweight(feats, [Tensor(np.ones((1, 7)))] * 3)


class TestHeads:
    def test_eighteen_channels(self, model, rng):
        raw = model.forward(Tensor(rng.random((1, 3, 64, 64))), Tensor(rng.random((2, 4, 128, 128))))
        assert [r.shape for r in raw] == [(2, 18, 2, 2), (2, 18, 4, 4), (2, 18, 8, 8)]

    def test_zero_heads_give_zero_raw(self, rng):
        m = FSODM(tiny_config(), seed=0)
        for name, p in m.params.items():
            if name.startswith("head."):
                p.data = np.zeros_like(p.data)
        raw = m.forward(Tensor(rng.random((1, 3, 32, 32))), Tensor(rng.random((2, 4, 64, 64))))
        assert all(not r.data.any() for r in raw)

    def test_category_permutation_permutes_outputs(self, rng):
        with precision(np.float64):
            m = FSODM(ModelConfig(), seed=3)
            images = Tensor(rng.random((2, 3, 64, 64)))
            supports = rng.random((3, 4, 128, 128))
            perm = [2, 0, 1]
            a = m.forward(images, Tensor(supports))
            b = m.forward(images, Tensor(supports[perm]))
        for ra, rb in zip(a, b):
            ra = ra.data.reshape(2, 3, *ra.shape[1:])
            rb = rb.data.reshape(2, 3, *rb.shape[1:])
            np.testing.assert_allclose(ra[:, perm], rb, rtol=1e-12, atol=1e-14)

    def test_doubling_a_category_vector_doubles_its_maps(self, model, rng):
        feats = model.extract(Tensor(rng.random((2, 3, 64, 64))))
        vs = model.reweighting(Tensor(rng.random((3, 4, 128, 128))))
        doubled = []
        for v in vs:
            d = v.data.copy()
            d[1] *= 2
            doubled.append(Tensor(d))
        base, twice = reweight(feats, vs), reweight(feats, doubled)
        for r0, r1 in zip(base, twice):
            for b in range(2):
                np.testing.assert_array_equal(r1.data[b * 3 + 1], 2 * r0.data[b * 3 + 1])
                np.testing.assert_array_equal(r1.data[b * 3], r0.data[b * 3])


class TestDecode:
    def test_zero_raw_decodes_to_anchor_priors(self):
        cfg = ModelConfig()
        raw = [np.zeros((2, 18, 128 // s, 128 // s)) for s in (32, 16, 8)]
        dec = decode_boxes(raw, cfg, 128, 2)
        d = dec[0]
        assert d["cx"][0, 0, 0, 0, 0] == 16 and d["cy"][0, 0, 0, 0, 0] == 16
        assert d["cx"][0, 0, 0, 0, 1] == 48
        assert d["w"][0, 1, 2, 0, 0] == 60 and d["h"][0, 1, 2, 0, 0] == 52
        assert np.all(d["objectness"] == 0.5)

    def test_roundtrip_with_encoder(self, rng):
        cfg = ModelConfig()
        raw = [rng.normal(size=(1, 18, 128 // s, 128 // s)) for s in (32, 16, 8)]
        dec = decode_boxes(raw, cfg, 128, 1)
        for i, (d, s) in enumerate(zip(dec, (32, 16, 8))):
            g = 128 // s
            gy, gx = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
            for a in range(3):
                box = np.stack([d[k][0, 0, a] for k in ("cx", "cy", "w", "h")], axis=-1)
                t = encode_targets(box, np.broadcast_to(cfg.anchors_for(128)[i, a], box.shape[:-1] + (2,)), np.stack([gx, gy], -1), s)
                ref = raw[i][0].reshape(3, 6, g, g)[a, :4].transpose(1, 2, 0)
                np.testing.assert_allclose(t, ref, rtol=1e-6, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_centres_stay_in_cell_and_sizes_positive(self, seed):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig()
        raw = [rng.normal(scale=5, size=(2, 18, 128 // s, 128 // s)) for s in (32, 16, 8)]
        for d, s in zip(decode_boxes(raw, cfg, 128, 2), (32, 16, 8)):
            g = 128 // s
            cols = np.arange(g)[None, None, None, None, :]
            rows = np.arange(g)[None, None, None, :, None]
            assert np.all((d["cx"] >= cols * s) & (d["cx"] <= (cols + 1) * s))
            assert np.all((d["cy"] >= rows * s) & (d["cy"] <= (rows + 1) * s))
            assert np.all(d["w"] > 0) and np.all(d["h"] > 0)

    def test_group_size_mismatch_raises(self):
        with pytest.raises(RuntimeError):
            class_scores(np.zeros((1, 3, 2)), num_categories=4, axis=1)


class TestClassScores:
    def test_uniform(self):
        np.testing.assert_allclose(class_scores(np.zeros((1, 5)), 5), np.full((1, 5), 0.2))

    def test_saturation(self):
        p = class_scores(np.array([[50.0, 0, 0]]), 3)
        assert abs(p[0, 0] - 1) < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=11))
    def test_matches_exp_normalise(self, values):
        x = np.asarray(values)[None]
        ref = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(class_scores(x, x.shape[1]), ref, rtol=1e-12)
        assert abs(class_scores(x).sum() - 1) < 1e-6


class TestCandidates:
    def test_score_is_objectness_times_best_probability(self, model, rng):
        raw = model.forward(Tensor(rng.random((1, 3, 64, 64))), Tensor(rng.random((3, 4, 128, 128))))
        (cand,) = candidate_detections([r.data for r in raw], model.config, 64, 3)
        np.testing.assert_allclose(cand["class_probs"].sum(axis=1), 1, atol=1e-6)
        np.testing.assert_allclose(cand["score"], cand["objectness"] * cand["class_probs"].max(axis=1))
        assert cand["box"].shape == (3 * (4 + 16 + 64), 4)

    def test_cold_start_score_bound(self):
        cfg = tiny_config()
        m = FSODM(cfg, seed=0)
        for p in m.params.values():
            if p.name.startswith("head."):
                p.data = np.zeros_like(p.data)
        raw = m.forward(Tensor(np.random.default_rng(0).random((1, 3, 32, 32))), Tensor(np.ones((4, 4, 64, 64))))
        (cand,) = candidate_detections([r.data for r in raw], cfg, 32, 4)
        assert cand["score"].max() <= 0.5 / 4 + 1e-12


class TestEndToEndGradient:
    def test_loss_gradient_wrt_parameters(self):
        with precision(np.float64):
            cfg = tiny_config(image_size=64)
            m = FSODM(cfg, seed=5)
            rng = np.random.default_rng(0)
            images = Tensor(rng.random((1, 3, 64, 64)))
            supports = Tensor(rng.random((2, 4, 64, 64)))
            anns = [[BoxAnnotation(30.0, 22.0, 20.0, 14.0, 0), BoxAnnotation(44.0, 45.0, 11.0, 17.0, 1)]]
            targets = build_targets(anns, [0, 1], build_anchors(cfg, 64))
            picks = [m.params[n] for n in ("reweight.layer12.weight", "reweight.layer19.bias", "extractor.fpn.fuse3.weight", "head.scale2.weight")]

            def loss():
                return total_loss(m.forward(images, supports), targets).total

            err = check_gradients(loss, picks, max_probes=6, seed=1)
        assert err < 1e-3


def test_kaiming_bound_sanity():
    m = FSODM(ModelConfig(), seed=0)
    w = m.params["extractor.stem.weight"].data
    bound = math.sqrt(2 / 1.01) * math.sqrt(3 / 27)
    assert np.abs(w).max() <= bound
