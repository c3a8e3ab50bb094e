"""Tests for the dual-path multi-branch model: heads, sharing, losses."""

import numpy as np
import pytest

from stripenet.model import (
    ModelConfig,
    build_model,
    forward_features,
    path_stripe_maps,
    total_loss,
)
from stripenet.receptive import ArchSpec, LayerSpec
from stripenet.tensor import ShapeError, Tensor


def make_batch(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(0.0, 1.0, size=(n, 3, 48, 16)))


def fresh_model(seed=1, **kw):
    cfg = ModelConfig(num_classes=kw.pop("num_classes", 8), **kw)
    return cfg, build_model(cfg, np.random.default_rng(seed))


class TestConfig:
    def test_default_head_count_is_fourteen(self):
        cfg = ModelConfig()
        assert cfg.head_count == 14
        assert cfg.feature_dim == 14 * cfg.reduced_dim

    def test_single_path_head_counts(self):
        assert ModelConfig(with_rp=False).head_count == 7
        assert ModelConfig(with_original=False).head_count == 7

    def test_head_count_scales_with_stripes(self):
        assert ModelConfig(stripe_counts=(4,)).head_count == 2 * 5

    @pytest.mark.parametrize(
        "kw",
        [
            {"stripe_counts": ()},
            {"stripe_counts": (2, 0)},
            {"reduced_dim": 0},
            {"num_classes": 0},
            {"with_original": False, "with_rp": False},
        ],
    )
    def test_invalid_configs(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_paths_property(self):
        assert ModelConfig().paths == ("orig", "rp")
        assert ModelConfig(with_rp=False).paths == ("orig",)
        assert ModelConfig(with_original=False).paths == ("rp",)


class TestBuild:
    def test_head_key_order_branch_major_orig_first(self):
        _, model = fresh_model()
        expected = (
            ["b0.orig.s0", "b0.orig.s1", "b0.orig.s2"]
            + ["b0.rp.s0", "b0.rp.s1", "b0.rp.s2"]
            + [f"b1.orig.s{s}" for s in range(4)]
            + [f"b1.rp.s{s}" for s in range(4)]
        )
        assert [str(k) for k in model.head_keys] == expected

    def test_parameter_storage_is_unique(self):
        _, model = fresh_model()
        params = list(model.parameters())
        assert len({id(p) for p in params}) == len(params)

    def test_parameter_count_matches_named(self):
        _, model = fresh_model()
        assert model.parameter_count == sum(p.data.size for _, p in model.named_parameters())

    def test_head_and_backbone_partition_all_parameters(self):
        _, model = fresh_model()
        head_ids = {id(p) for p in model.head_parameters()}
        backbone_ids = {id(p) for p in model.backbone_parameters()}
        assert head_ids.isdisjoint(backbone_ids)
        assert head_ids | backbone_ids == {id(p) for p in model.parameters()}

    def test_rp_path_gradients_reach_shared_body(self):
        # a loss built from a partitioned-path head alone must reach the
        # stem and the branch body: both paths share those tensors
        _, model = fresh_model()
        model.train()
        bundle = forward_features(model, make_batch())
        rp_key = next(k for k in model.head_keys if k.path == "rp")
        loss = bundle.features[rp_key].reshape((4 * 16,))
        from stripenet.tensor import split

        parts = split(loss, 4 * 16, axis=0)
        acc = parts[0].reshape(())
        for p in parts[1:]:
            from stripenet.tensor import add

            acc = add(acc, p.reshape(()))
        acc.backward()
        stem_conv = model.stem[0].weight
        body_conv = model.branches[rp_key.branch].body[0].weight
        assert stem_conv.grad is not None and np.any(stem_conv.grad != 0)
        assert body_conv.grad is not None and np.any(body_conv.grad != 0)

    def test_ineffective_partition_rejected_at_build(self):
        # a pointwise branch tail gives receptive field 1 < stripe height
        arch = ArchSpec(
            layers=(
                LayerSpec("stem1", "conv", (3, 3), (2, 2), (1, 1)),
                LayerSpec("stem2", "conv", (3, 3), (2, 2), (1, 1)),
                LayerSpec("branch1", "conv", (1, 1), (1, 1), (0, 0)),
            ),
            input_size=(48, 16),
        )
        with pytest.raises(ValueError, match="not effective"):
            build_model(ModelConfig(num_classes=4), np.random.default_rng(0), arch=arch)

    def test_effectiveness_check_skipped_without_rp(self):
        arch = ArchSpec(
            layers=(
                LayerSpec("stem1", "conv", (3, 3), (2, 2), (1, 1)),
                LayerSpec("stem2", "conv", (3, 3), (2, 2), (1, 1)),
                LayerSpec("branch1", "conv", (1, 1), (1, 1), (0, 0)),
            ),
            input_size=(48, 16),
        )
        build_model(
            ModelConfig(num_classes=4, with_rp=False), np.random.default_rng(0), arch=arch
        )


class TestForward:
    def test_bundle_shapes(self):
        cfg, model = fresh_model()
        bundle = forward_features(model, make_batch(n=5), mode="train")
        assert bundle.f.shape == (5, cfg.feature_dim)
        for key in model.head_keys:
            assert bundle.features[key].shape == (5, cfg.reduced_dim)
            assert bundle.scores[key].shape == (5, cfg.num_classes)

    def test_final_descriptor_concatenates_in_head_order(self):
        cfg, model = fresh_model()
        bundle = forward_features(model, make_batch(), mode="eval")
        manual = np.concatenate(
            [bundle.features[k].data for k in bundle.head_keys], axis=1
        )
        assert np.array_equal(bundle.f.data, manual)

    def test_branch_features_concatenate_per_branch(self):
        _, model = fresh_model()
        bundle = forward_features(model, make_batch(), mode="eval")
        for b, branch in enumerate(model.branches):
            manual = np.concatenate(
                [bundle.features[k].data for k in branch.head_keys], axis=1
            )
            assert np.array_equal(bundle.branch_features[b].data, manual)

    def test_wrong_input_shape_rejected(self):
        _, model = fresh_model()
        with pytest.raises(ShapeError, match="48"):
            forward_features(model, Tensor(np.zeros((2, 3, 24, 16))))

    def test_bad_mode_rejected(self):
        _, model = fresh_model()
        with pytest.raises(ValueError, match="mode"):
            forward_features(model, make_batch(), mode="predict")

    def test_mode_argument_switches_training_flag(self):
        _, model = fresh_model()
        forward_features(model, make_batch(), mode="eval")
        assert not model.training
        forward_features(model, make_batch(), mode="train")
        assert model.training

    def test_single_stripe_rp_map_equals_original_map(self):
        # a one-stripe partition is the identity; built directly because a
        # single full-height stripe never passes the effectiveness check
        from stripenet.model import RMGLModel

        cfg = ModelConfig(num_classes=8, stripe_counts=(1,))
        model = RMGLModel(cfg, np.random.default_rng(1))
        model.eval()
        stem_out = model.stem(make_batch())
        maps = path_stripe_maps(model.branches[0], stem_out)
        assert np.allclose(maps["orig"][0].data, maps["rp"][0].data, atol=1e-12)

    def test_eval_forward_deterministic(self):
        _, model = fresh_model()
        x = make_batch()
        a = forward_features(model, x, mode="eval").f.data
        b = forward_features(model, x, mode="eval").f.data
        assert np.array_equal(a, b)

    def test_rp_only_model_has_no_orig_heads(self):
        _, model = fresh_model(with_original=False)
        bundle = forward_features(model, make_batch(), mode="eval")
        assert all(k.path == "rp" for k in bundle.head_keys)


class TestBalancedPoolingAtEval:
    def make_pair(self, seed=3):
        """Two models with identical weights, differing only in the eval-pooling flag."""
        _, plain = fresh_model(seed=seed, abp_at_inference=False)
        _, balanced = fresh_model(seed=seed, abp_at_inference=True)
        return plain, balanced

    def test_train_mode_ignores_flag(self):
        plain, balanced = self.make_pair()
        x = make_batch()
        a = forward_features(plain, x, mode="train").f.data
        b = forward_features(balanced, x, mode="train").f.data
        assert np.array_equal(a, b)

    def test_eval_changes_only_original_path_locals(self):
        plain, balanced = self.make_pair()
        x = make_batch()
        a = forward_features(plain, x, mode="eval")
        b = forward_features(balanced, x, mode="eval")
        for key in plain.head_keys:
            same = np.array_equal(a.features[key].data, b.features[key].data)
            if key.path == "rp" or key.stripe == 0:
                assert same, f"{key} should not be affected by eval pooling"
            else:
                assert not same, f"{key} should use balanced average pooling"

    def test_eval_pooling_batch_consistency(self):
        # per-sample cuts: a sample's feature must not depend on batch mates
        _, model = fresh_model(abp_at_inference=True)
        x = make_batch(n=4)
        full = forward_features(model, x, mode="eval").f.data
        single = forward_features(
            model, Tensor(x.data[2:3].copy()), mode="eval"
        ).f.data
        assert np.allclose(full[2], single[0], atol=1e-12)


class TestTotalLoss:
    def test_breakdown_sums_to_total(self):
        cfg, model = fresh_model()
        bundle = forward_features(model, make_batch(n=6), mode="train")
        labels = np.array([0, 0, 1, 1, 2, 2])
        total, breakdown = total_loss(bundle, labels, cfg)
        assert len(breakdown) == len(cfg.stripe_counts) + cfg.head_count
        assert abs(total.item() - sum(breakdown.values())) < 1e-12

    def test_identical_inputs_give_margin_triplet_loss(self):
        # identical images -> identical features -> every anchor's hinge is
        # exactly the margin under mean reduction
        cfg, model = fresh_model(margin=0.6)
        img = np.random.default_rng(5).uniform(size=(1, 3, 48, 16))
        x = Tensor(np.repeat(img, 4, axis=0))
        labels = np.array([0, 0, 1, 1])
        bundle = forward_features(model, x, mode="train")
        _, breakdown = total_loss(bundle, labels, cfg)
        assert breakdown["triplet.b0"] == pytest.approx(0.6, abs=1e-12)
        assert breakdown["triplet.b1"] == pytest.approx(0.6, abs=1e-12)

    def test_classification_weight_scales_terms(self):
        cfg, model = fresh_model()
        weighted = ModelConfig(
            num_classes=8, cls_weight=2.0, triplet_weight=0.5
        )
        bundle = forward_features(model, make_batch(), mode="train")
        labels = np.array([0, 0, 1, 1])
        _, base = total_loss(bundle, labels, cfg)
        _, scaled = total_loss(bundle, labels, weighted)
        for key, value in base.items():
            factor = 2.0 if key.startswith("cls") else 0.5
            assert scaled[key] == pytest.approx(factor * value, rel=1e-12)

    def test_loss_backward_reaches_every_parameter(self):
        cfg, model = fresh_model()
        model.train()
        bundle = forward_features(model, make_batch(n=6, seed=8))
        labels = np.array([0, 0, 1, 1, 2, 2])
        total, _ = total_loss(bundle, labels, cfg)
        total.backward()
        for name, p in model.named_parameters():
            assert p.grad is not None, f"{name} got no gradient"
