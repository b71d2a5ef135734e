"""Model assembly: staging, batch independence, reductions, mask inertness."""

import numpy as np
import pytest

from bifusion.config import ConfigError, FusionConfig
from bifusion.models import (
    BilinearFusionModel,
    CoAttentionModel,
    ConcatLinearModel,
    build_model,
    masked_mean,
)
from bifusion.tensor import Tensor

TINY = dict(d_v=8, d_q=8, d_m=4, d_hid=8, d_joint=8, heads=2, glimpses=2,
            coattention_layers=1, answers=3)


def tiny_config(**kw):
    base = dict(TINY)
    base.update(kw)
    return FusionConfig(**base)


def tiny_inputs(batch=2, n_q=3, seed=0):
    rng = np.random.default_rng(seed)
    image = rng.normal(size=(batch, 1, TINY["d_hid"]))
    question = rng.normal(size=(batch, n_q, TINY["d_q"]))
    mask = np.ones((batch, n_q), dtype=bool)
    mask[:, -1] = False
    return image, question, mask


class TestBuildModel:
    def test_dispatch(self):
        assert isinstance(build_model(tiny_config(arch="omniban")), BilinearFusionModel)
        assert isinstance(build_model(tiny_config(arch="coattention")), CoAttentionModel)
        assert isinstance(build_model(tiny_config(arch="concat")), ConcatLinearModel)

    def test_unknown_arch_rejected(self):
        with pytest.raises(ConfigError):
            build_model(tiny_config(arch="mystery"))

    def test_same_seed_same_init(self):
        a = build_model(tiny_config(), seed=4).params()
        b = build_model(tiny_config(), seed=4).params()
        for name in a:
            assert np.array_equal(a[name].data, b[name].data)

    def test_heads_must_divide_dims(self):
        with pytest.raises(ConfigError):
            tiny_config(d_v=6, heads=4).validate()


class TestOmnibanForward:
    def test_zeroed_final_layer_gives_bias_logits(self):
        model = build_model(tiny_config(), seed=1)
        model.classifier.w2.assign(np.zeros_like(model.classifier.w2.data))
        model.classifier.b2.assign(np.full(3, 0.7))
        image, question, mask = tiny_inputs()
        logits, _ = model.forward(image, question, mask)
        assert np.allclose(logits.data, 0.7)
        scores = 1 / (1 + np.exp(-logits.data))
        assert np.abs(scores - scores[0, 0]).max() < 1e-12

    def test_batch_independence(self):
        model = build_model(tiny_config(), seed=2)
        image, question, mask = tiny_inputs(batch=2, seed=3)
        both, _ = model.forward(image, question, mask)
        solo, _ = model.forward(image[:1], question[:1], mask[:1])
        assert np.abs(both.data[0] - solo.data[0]).max() < 1e-9

    def test_bundle_shapes(self):
        model = build_model(tiny_config(), seed=4)
        image, question, mask = tiny_inputs(batch=2)
        logits, bundle = model.forward(image, question, mask)
        assert logits.shape == (2, 3)
        assert len(bundle.distributions) == 2
        assert bundle.distributions[0].shape == (2, 1 * 3)
        assert bundle.fused[0].shape == (2, 4)
        assert bundle.joint.shape == (2, 8)

    def test_masked_content_inert_end_to_end(self):
        model = build_model(tiny_config(), seed=5)
        image, question, mask = tiny_inputs(batch=2, seed=6)
        base, _ = model.forward(image, question, mask)
        q2 = question.copy()
        q2[:, -1] = 1e3
        again, _ = model.forward(image, q2, mask)
        assert np.abs(base.data - again.data).max() < 1e-9

    def test_no_mha_flag_skips_refinement(self):
        cfg = tiny_config(use_intra_attention=False)
        model = build_model(cfg, seed=7)
        image, question, mask = tiny_inputs(seed=8)
        logits, _ = model.forward(image, question, mask)
        # attention params exist but must not influence the output
        model.intra_q.w_q.assign(model.intra_q.w_q.data + 10.0)
        logits2, _ = model.forward(image, question, mask)
        assert np.array_equal(logits.data, logits2.data)


class TestCoAttentionForward:
    def test_zero_layers_reduce_to_intra_plus_classifier(self):
        cfg = tiny_config(arch="coattention", coattention_layers=0)
        model = build_model(cfg, seed=9)
        image, question, mask = tiny_inputs(seed=10)
        logits, _ = model.forward(image, question, mask)

        from bifusion.attention import self_attend
        from bifusion.models import _as_tensor
        from bifusion.tensor import concat
        v = self_attend(model.encode(image), None, model.intra_v)
        q = self_attend(_as_tensor(question), mask, model.intra_q)
        pooled = concat([masked_mean(v, None), masked_mean(q, mask)], axis=-1)
        expect = model.classifier(pooled)
        assert np.abs(logits.data - expect.data).max() < 1e-12

    def test_single_token_cross_attention_weight_one(self):
        cfg = tiny_config(arch="coattention", coattention_layers=1)
        model = build_model(cfg, seed=11)
        layer = model.layers[0]
        rng = np.random.default_rng(12)
        v = Tensor(rng.normal(size=(1, 1, 8)))
        q = Tensor(rng.normal(size=(1, 1, 8)))
        out = layer.cross_vq(v, q).data[0]
        # single key: attention output is exactly the value path
        value = q.data[0] @ layer.cross_vq.w_v.data + layer.cross_vq.b_v.data
        expect = value @ layer.cross_vq.w_o.data + layer.cross_vq.b_o.data
        assert np.abs(out - expect).max() < 1e-12

    def test_batch_independence(self):
        model = build_model(tiny_config(arch="coattention"), seed=13)
        image, question, mask = tiny_inputs(batch=2, seed=14)
        both, _ = model.forward(image, question, mask)
        solo, _ = model.forward(image[1:], question[1:], mask[1:])
        assert np.abs(both.data[1] - solo.data[0]).max() < 1e-9

    def test_masked_content_inert(self):
        model = build_model(tiny_config(arch="coattention"), seed=15)
        image, question, mask = tiny_inputs(batch=1, seed=16)
        base, _ = model.forward(image, question, mask)
        q2 = question.copy()
        q2[:, -1] = -55.0
        again, _ = model.forward(image, q2, mask)
        assert np.abs(base.data - again.data).max() < 1e-9


class TestConcatModel:
    def test_additive_structure(self):
        """Logits decompose into an image part plus a question part."""
        model = build_model(tiny_config(arch="concat"), seed=17)
        rng = np.random.default_rng(18)
        image_a, image_b = rng.normal(size=(2, 1, 1, 8))
        q_a, q_b = rng.normal(size=(2, 1, 3, 8))
        mask = np.ones((1, 3), dtype=bool)

        def logits(image, question):
            return model.forward(image, question, mask)[0].data

        delta_image = logits(image_a, q_a) - logits(image_b, q_a)
        delta_image2 = logits(image_a, q_b) - logits(image_b, q_b)
        assert np.abs(delta_image - delta_image2).max() < 1e-9

    def test_pooling_ignores_padding(self):
        model = build_model(tiny_config(arch="concat"), seed=19)
        image, question, mask = tiny_inputs(batch=1, seed=20)
        base = model.forward(image, question, mask)[0].data
        q2 = question.copy()
        q2[:, -1] = 99.0
        assert np.array_equal(model.forward(image, q2, mask)[0].data, base)


class TestMaskedMean:
    def test_uniform_weights(self):
        x = Tensor(np.arange(12.0).reshape(1, 3, 4))
        out = masked_mean(x, np.array([[True, True, False]]))
        assert np.allclose(out.data, x.data[0, :2].mean(axis=0))


class TestImageProjection:
    def test_identity_projection_passes_through(self):
        model = build_model(tiny_config(), seed=21)
        model.w_proj.assign(np.eye(8))
        model.b_proj.assign(np.zeros(8))
        image = np.random.default_rng(22).normal(size=(1, 1, 8))
        assert np.abs(model.encode(image).data - image).max() < 1e-12

    def test_zero_input_yields_bias_row(self):
        model = build_model(tiny_config(), seed=23)
        model.b_proj.assign(np.arange(8.0))
        out = model.encode(np.zeros((1, 1, 8))).data
        assert np.array_equal(out[0, 0], np.arange(8.0))

    def test_gradcheck_projection_through_fusion(self):
        from bifusion.gradcheck import check_gradients
        from bifusion.synthetic import one_hot
        from bifusion.tensor import bce_with_logits
        model = build_model(tiny_config(), seed=24)
        image, question, mask = tiny_inputs(batch=1, seed=25)
        targets = one_hot(np.array([2]), 3)

        def loss():
            logits, _ = model.forward(image, question, mask)
            return bce_with_logits(logits, targets)

        worst = check_gradients(loss, [model.w_proj, model.b_proj])
        assert worst < 1e-4
