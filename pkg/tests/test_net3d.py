import numpy as np
import pytest

from ricekit import net3d
from ricekit.errors import TrainingDivergedError


def small_cfg(**kw):
    defaults = dict(in_channels=2, base_width=2, stem_kernel=3, input_shape=(8, 8, 8))
    defaults.update(kw)
    return net3d.ResNet3DConfig(**defaults)


# Shape table computed by hand for in_channels=3, base_width=2, stem_kernel=7:
# widths per stage (2, 4, 8, 16); projections at the first block of stages 2-4.
WIDTH2_SHAPES = {
    "stem.conv.w": (7, 7, 7, 3, 2),
    "layer1.block0.conv1.w": (3, 3, 3, 2, 2),
    "layer1.block0.conv2.w": (3, 3, 3, 2, 2),
    "layer1.block1.conv1.w": (3, 3, 3, 2, 2),
    "layer1.block1.conv2.w": (3, 3, 3, 2, 2),
    "layer2.block0.conv1.w": (3, 3, 3, 2, 4),
    "layer2.block0.conv2.w": (3, 3, 3, 4, 4),
    "layer2.block0.down.conv.w": (1, 1, 1, 2, 4),
    "layer2.block1.conv1.w": (3, 3, 3, 4, 4),
    "layer2.block1.conv2.w": (3, 3, 3, 4, 4),
    "layer3.block0.conv1.w": (3, 3, 3, 4, 8),
    "layer3.block0.conv2.w": (3, 3, 3, 8, 8),
    "layer3.block0.down.conv.w": (1, 1, 1, 4, 8),
    "layer3.block1.conv1.w": (3, 3, 3, 8, 8),
    "layer3.block1.conv2.w": (3, 3, 3, 8, 8),
    "layer4.block0.conv1.w": (3, 3, 3, 8, 16),
    "layer4.block0.conv2.w": (3, 3, 3, 16, 16),
    "layer4.block0.down.conv.w": (1, 1, 1, 8, 16),
    "layer4.block1.conv1.w": (3, 3, 3, 16, 16),
    "layer4.block1.conv2.w": (3, 3, 3, 16, 16),
    "head.w": (16, 2),
    "head.b": (2,),
}


class TestStructure:
    def test_width2_shape_table(self):
        cfg = net3d.ResNet3DConfig(in_channels=3, base_width=2, stem_kernel=7,
                                   input_shape=(32, 32, 32))
        shapes = net3d.param_shapes(cfg)
        for name, shape in WIDTH2_SHAPES.items():
            assert shapes[name] == shape, name
        # every norm layer carries scale/offset plus the two running statistics
        bn_prefixes = {n.rsplit(".", 1)[0] for n in shapes if n.endswith(".gamma")}
        for prefix in bn_prefixes:
            width = shapes[f"{prefix}.gamma"][0]
            for suffix in ("beta", "running_mean", "running_var"):
                assert shapes[f"{prefix}.{suffix}"] == (width,)
        assert len(bn_prefixes) == 1 + 4 * 2 * 2 + 3  # stem + 2 per block + 3 projections

    def test_width8_three_channel_audit(self):
        cfg = net3d.ResNet3DConfig(in_channels=3, base_width=8, stem_kernel=7,
                                   input_shape=(64, 64, 64))
        params = net3d.init_model(cfg, 0)
        net3d.audit_params(params, cfg)
        shapes = net3d.param_shapes(cfg)
        assert shapes["stem.conv.w"] == (7, 7, 7, 3, 8)
        assert shapes["layer4.block1.conv2.w"] == (3, 3, 3, 64, 64)
        assert shapes["head.w"] == (64, 2)

    def test_audit_detects_mutations(self):
        cfg = small_cfg()
        params = net3d.init_model(cfg, 0)
        net3d.audit_params(params, cfg)
        bad = dict(params)
        bad["stem.conv.w"] = bad["stem.conv.w"][..., :1]
        with pytest.raises(ValueError, match="shape"):
            net3d.audit_params(bad, cfg)
        missing = dict(params)
        del missing["head.b"]
        with pytest.raises(ValueError, match="missing"):
            net3d.audit_params(missing, cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            net3d.ResNet3DConfig(in_channels=4).validate()
        with pytest.raises(ValueError):
            net3d.ResNet3DConfig(blocks_per_stage=(2, 2, 2, 3)).validate()


class TestInit:
    def test_deterministic(self):
        cfg = small_cfg()
        a = net3d.init_model(cfg, np.random.default_rng(5))
        b = net3d.init_model(cfg, np.random.default_rng(5))
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_norm_layers_start_at_identity(self):
        params = net3d.init_model(small_cfg(), 1)
        for name, arr in params.items():
            if name.endswith(".gamma") or name.endswith(".running_var"):
                assert (arr == 1.0).all(), name
            if name.endswith(".beta") or name.endswith(".running_mean"):
                assert (arr == 0.0).all(), name
        assert (params["head.b"] == 0.0).all()

    def test_conv_weights_fan_in_scaled(self):
        params = net3d.init_model(net3d.ResNet3DConfig(in_channels=3, base_width=8), 2)
        w = params["layer4.block1.conv2.w"]
        fan_in = 27 * w.shape[3]
        assert w.std() == pytest.approx(np.sqrt(2.0 / fan_in), rel=0.15)


class TestForward:
    def test_shape_contract_width8_64cube(self):
        cfg = net3d.ResNet3DConfig(in_channels=3, base_width=8, stem_kernel=7,
                                   input_shape=(64, 64, 64))
        params = net3d.init_model(cfg, 0)
        x = np.random.default_rng(0).standard_normal((1, 3, 64, 64, 64)).astype(np.float32)
        assert net3d.forward(params, x, cfg, mode="eval").shape == (1, 2)

    def test_eval_forward_is_pure(self):
        cfg = small_cfg()
        params = net3d.init_model(cfg, 3)
        x = np.random.default_rng(1).standard_normal((2, 2, 8, 8, 8)).astype(np.float32)
        a = net3d.forward(params, x, cfg, mode="eval")
        b = net3d.forward(params, x, cfg, mode="eval")
        assert np.array_equal(a, b)

    def test_identical_samples_get_identical_logits(self):
        cfg = small_cfg()
        params = net3d.init_model(cfg, 4)
        x = np.zeros((3, 2, 8, 8, 8), dtype=np.float32)
        logits = net3d.forward(params, x, cfg, mode="eval")
        assert np.allclose(logits, logits[0])

    def test_batch_composition_invariance(self):
        cfg = small_cfg()
        params = net3d.init_model(cfg, 5)
        rng = np.random.default_rng(2)
        a = rng.standard_normal((3, 2, 8, 8, 8)).astype(np.float32)
        b = rng.standard_normal((2, 2, 8, 8, 8)).astype(np.float32)
        joint = net3d.forward(params, np.concatenate([a, b]), cfg, mode="eval")
        separate = np.concatenate([net3d.forward(params, a, cfg, mode="eval"),
                                   net3d.forward(params, b, cfg, mode="eval")])
        np.testing.assert_allclose(joint, separate, atol=1e-5)

    def test_channel_permutation_sensitivity(self):
        cfg = net3d.ResNet3DConfig(in_channels=3, base_width=2, stem_kernel=3,
                                   input_shape=(8, 8, 8))
        params = net3d.init_model(cfg, 6)
        x = np.random.default_rng(3).standard_normal((2, 3, 8, 8, 8)).astype(np.float32)
        base = net3d.forward(params, x, cfg, mode="eval")
        permuted = net3d.forward(params, x[:, [2, 0, 1]], cfg, mode="eval")
        identity = net3d.forward(params, x[:, [0, 1, 2]], cfg, mode="eval")
        assert not np.allclose(base, permuted, atol=1e-6)
        np.testing.assert_array_equal(base, identity)

    def test_shape_mismatch_rejected(self):
        cfg = small_cfg()
        params = net3d.init_model(cfg, 7)
        with pytest.raises(ValueError):
            net3d.forward(params, np.zeros((1, 1, 8, 8, 8), dtype=np.float32), cfg)


class TestPredictProb:
    def test_symmetric_logits(self):
        np.testing.assert_allclose(net3d.predict_prob(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_log3_logits(self):
        p = net3d.predict_prob(np.array([[np.log(3.0), 0.0]]))
        np.testing.assert_allclose(p, [[0.75, 0.25]], atol=1e-12)

    def test_extreme_logits_do_not_overflow(self):
        p = net3d.predict_prob(np.array([[1000.0, 0.0]]))
        assert np.isfinite(p).all()
        assert p[0, 0] == pytest.approx(1.0)
        assert p[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            net3d.predict_prob(np.array([[np.inf, 0.0]]))


class TestBackward:
    def test_fresh_model_loss_near_ln2(self):
        cfg = small_cfg()
        params = net3d.init_model(cfg, 8)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((4, 2, 8, 8, 8)).astype(np.float32)
        loss, _ = net3d.backward(params, x, np.array([0, 1, 0, 1]), cfg, update_stats=False)
        assert 0.6 <= loss <= 0.8

    def test_duplicated_sample_gradient_linearity(self):
        cfg = small_cfg()
        params = net3d.init_model(cfg, 9, dtype=np.float64)
        rng = np.random.default_rng(5)
        a = rng.standard_normal((1, 2, 8, 8, 8))
        pair = np.concatenate([a, a])
        _, g1 = net3d.backward(params, a, np.array([1]), cfg, update_stats=False)
        _, g2 = net3d.backward(params, pair, np.array([1, 1]), cfg, update_stats=False)
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], rtol=1e-8, atol=1e-12)

    def test_gradcheck_spot(self):
        cfg = small_cfg(input_shape=(8, 8, 8))
        rng = np.random.default_rng(6)
        params = net3d.init_model(cfg, rng, dtype=np.float64)
        x = rng.standard_normal((2, 2, 8, 8, 8))
        labels = np.array([0, 1])
        _, grads = net3d.backward(params, x, labels, cfg, update_stats=False)
        h = 1e-5
        checked = 0
        for name in ("stem.conv.w", "layer2.block0.down.conv.w", "layer4.block1.bn2.gamma", "head.w"):
            flat = params[name].reshape(-1)
            gflat = grads[name].reshape(-1)
            for i in rng.choice(flat.size, size=3, replace=False):
                orig = flat[i]
                flat[i] = orig + h
                lp = net3d.loss_eval(params, x, labels, cfg)
                flat[i] = orig - h
                lm = net3d.loss_eval(params, x, labels, cfg)
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-5)
                assert rel < 1e-4, f"{name}[{i}]: fd={fd}, got={gflat[i]}"
                checked += 1
        assert checked == 12

    def test_running_stats_update_in_train_only(self):
        cfg = small_cfg()
        params = net3d.init_model(cfg, 10)
        rm_before = params["stem.bn.running_mean"].copy()
        x = np.random.default_rng(7).standard_normal((2, 2, 8, 8, 8)).astype(np.float32) + 1.0
        net3d.forward(params, x, cfg, mode="eval")
        assert np.array_equal(params["stem.bn.running_mean"], rm_before)
        net3d.backward(params, x, np.array([0, 1]), cfg)
        assert not np.array_equal(params["stem.bn.running_mean"], rm_before)

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_nonfinite_loss_raises(self):
        cfg = small_cfg()
        params = net3d.init_model(cfg, 11)
        params["head.w"] = params["head.w"] + np.inf
        x = np.random.default_rng(8).standard_normal((2, 2, 8, 8, 8)).astype(np.float32)
        with pytest.raises((TrainingDivergedError, ValueError)):
            net3d.backward(params, x, np.array([0, 1]), cfg)

    def test_bad_labels_rejected(self):
        cfg = small_cfg()
        params = net3d.init_model(cfg, 12)
        x = np.zeros((2, 2, 8, 8, 8), dtype=np.float32)
        with pytest.raises(ValueError):
            net3d.backward(params, x, np.array([0, 2]), cfg)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = small_cfg()
        params = net3d.init_model(cfg, 13)
        net3d.save_checkpoint(tmp_path / "ck", cfg, params, extra={"combo_index": 5})
        cfg2, params2 = net3d.load_checkpoint(tmp_path / "ck")
        assert cfg2 == cfg
        assert all(np.array_equal(params[k], params2[k]) for k in params)
        assert net3d.load_checkpoint_extra(tmp_path / "ck")["combo_index"] == 5
