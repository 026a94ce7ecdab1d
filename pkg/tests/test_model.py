import numpy as np
import pytest

from memseg import numerics as nm
from memseg.losses import LossWeights, loss_memory_rows, loss_output_map, loss_weight_map, total_loss
from memseg.memory import FeatureMemory
from memseg.model import ModelConfig, SegModel, load_checkpoint, save_checkpoint
from memseg.numerics import Tensor


def make_model(use_memory=True, **overrides):
    defaults = dict(in_channels=2, num_classes=3, dim=4, backbone_widths=(4,),
                    stride=1, fusion_mode="concat", precision=64, seed=0,
                    use_memory=use_memory)
    defaults.update(overrides)
    cfg = ModelConfig(**defaults)
    model = SegModel(cfg)
    if use_memory:
        model.memory = FeatureMemory(
            values=np.random.default_rng(42).standard_normal((3, 4))
        )
    return model


def image(h=4, w=4, c=2, seed=1):
    return Tensor(np.random.default_rng(seed).standard_normal((c, h, w)))


class TestBackbone:
    def test_stride_one_preserves_extents(self):
        model = make_model()
        r = model.backbone.forward(image())
        assert r.shape == (4, 4, 4)

    def test_stride_two_halves_extents(self):
        model = make_model(stride=2)
        r = model.backbone.forward(image(8, 8))
        assert r.shape == (4, 4, 4)

    def test_stride_eight_needs_enough_blocks(self):
        model = make_model(stride=8, backbone_widths=(4, 4, 4))
        r = model.backbone.forward(image(16, 16))
        assert r.shape == (4, 2, 2)
        with pytest.raises(ValueError):
            make_model(stride=8, backbone_widths=())

    def test_divisibility_validated(self):
        model = make_model(stride=2)
        with pytest.raises(ValueError, match="divisible"):
            model.backbone.forward(image(5, 4))

    def test_zero_input_zero_biases_gives_zero(self):
        model = make_model()
        r = model.backbone.forward(Tensor(np.zeros((2, 4, 4))))
        np.testing.assert_array_equal(r.data, 0.0)

    def test_deterministic_under_seed(self):
        a = make_model().backbone.forward(image()).data
        b = make_model().backbone.forward(image()).data
        np.testing.assert_array_equal(a, b)


class TestWithinImageContext:
    def test_output_spatially_constant(self):
        model = make_model(within_image="global-pool")
        out = model.within_image_context(model.backbone.forward(image()))
        for i in range(4):
            for j in range(4):
                np.testing.assert_allclose(out.data[:, i, j], out.data[:, 0, 0], atol=1e-12)

    def test_pooled_vector_is_channel_mean(self):
        model = make_model(within_image="global-pool")
        r = model.backbone.forward(image())
        pooled = nm.spatial_mean(r)
        expected = np.array([r.data[c].mean() for c in range(4)])
        np.testing.assert_allclose(pooled.data, expected, atol=1e-12)

    def test_disabled_mode_raises(self):
        model = make_model()
        with pytest.raises(RuntimeError):
            model.within_image_context(model.backbone.forward(image()))


class TestForwardFull:
    @pytest.mark.parametrize("mode", ["add", "weighted_add", "concat"])
    def test_output_positions_are_probability_vectors(self, mode):
        model = make_model(fusion_mode=mode)
        out = model.forward_full(image())
        np.testing.assert_allclose(out["o"].data.sum(axis=0), 1.0, atol=1e-6)
        assert (out["o"].data >= 0).all()

    def test_o_mem_has_one_row_per_memory_entry(self):
        model = make_model()
        out = model.forward_full(image(), with_memory_predictions=True)
        assert out["o_mem"].shape == (3, 3)
        np.testing.assert_allclose(out["o_mem"].data.sum(axis=1), 1.0, atol=1e-9)

    def test_deterministic(self):
        model = make_model()
        a = model.forward_full(image())["o"].data
        b = model.forward_full(image())["o"].data
        np.testing.assert_array_equal(a, b)

    def test_output_matches_input_resolution_across_strides(self):
        for stride, widths, hw in ((1, (4,), 8), (2, (4,), 8), (8, (4, 4, 4), 16)):
            model = make_model(stride=stride, backbone_widths=widths)
            out = model.forward_full(image(hw, hw))
            assert out["o"].shape == (3, hw, hw)

    def test_zeroed_memory_path_reduces_to_baseline(self):
        # zero memory rows and zero value/output attention maps: context is null
        model = make_model(fusion_mode="add")
        model.memory = FeatureMemory(values=np.zeros((3, 4)))
        for p in (model.attn.wv, model.attn.bv, model.attn.wo, model.attn.bo):
            p.data = np.zeros_like(p.data)
        full = model.forward_full(image())["o"].data
        baseline = model.forward_baseline(image())["o"].data
        np.testing.assert_allclose(full, baseline, atol=1e-12)


class TestForwardBaseline:
    def test_normalized_output(self):
        model = make_model(use_memory=False)
        out = model.forward_baseline(image())
        np.testing.assert_allclose(out["o"].data.sum(axis=0), 1.0, atol=1e-6)

    def test_fewer_parameters_than_full_model(self):
        full = make_model()
        base = make_model(use_memory=False)
        assert base.num_parameters() < full.num_parameters()

    def test_shared_seed_shares_backbone_outputs(self):
        full = make_model()
        base = make_model(use_memory=False)
        a = full.backbone.forward(image()).data
        b = base.backbone.forward(image()).data
        np.testing.assert_array_equal(a, b)


class TestStopGradient:
    def test_memory_gets_no_gradient_but_head2_does(self):
        model = make_model()
        gt = np.random.default_rng(5).integers(0, 3, (4, 4))
        out = model.forward_full(image(), with_memory_predictions=True)
        lw = loss_weight_map(out["w"], gt)
        lo = loss_output_map(out["o"], gt)
        lm = loss_memory_rows(out["o_mem"])
        total_loss(lw, lm, lo, LossWeights()).backward()
        assert (out["memory_param"].grad == 0).all()
        assert any((p.grad != 0).any() for p in model.head2.parameters())


class TestCheckpoint:
    def test_round_trip_reproduces_forward(self, tmp_path):
        model = make_model()
        model.memory.update_count = 17
        img = image()
        before = model.forward_full(img)["o"].data
        path = str(tmp_path / "ckpt.mct")
        save_checkpoint(path, model, extra={"iteration": 9})
        loaded, extra = load_checkpoint(path)
        after = loaded.forward_full(img)["o"].data
        np.testing.assert_array_equal(before, after)
        assert loaded.memory.update_count == 17
        assert extra["iteration"] == 9

    def test_baseline_checkpoint(self, tmp_path):
        model = make_model(use_memory=False)
        img = image()
        before = model.forward_baseline(img)["o"].data
        path = str(tmp_path / "ckpt.mct")
        save_checkpoint(path, model)
        loaded, _ = load_checkpoint(path)
        np.testing.assert_array_equal(before, loaded.forward_baseline(img)["o"].data)


class TestConfigValidation:
    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(dim=5)

    def test_bad_stride_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(stride=3)

    def test_bad_within_mode_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(within_image="ppm")
